//! Denoiser checkpoint file format (little-endian):
//!
//! ```text
//! magic "SDAD" | version u32
//! C u32 | H u32 | W u32 | base u32 | sigma_data f64
//! per channel: name (u16 length + UTF-8) | transform tag u8 | shift f64
//!              | mean f64 | std f64
//! section count u32
//! per section: name (u16 length + UTF-8) | offset u64 | len u64   (f32 elements)
//! blob length u64 | blob of f32 values
//! ```
//!
//! Each conv layer contributes a "<layer>.w" section (column-major weight
//! matrix) and a "<layer>.b" section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::denoiser::{ConvArch, ConvDenoiser};
use crate::denoiser::Denoiser;
use crate::error::{Result, SdaError};
use crate::field::NormStats;
use crate::io::grid_file::{read_channel_spec, write_channel_spec};

const MAGIC: &[u8; 4] = b"SDAD";
const VERSION: u32 = 1;

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(SdaError::config("section name too long".to_string()));
    }
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| SdaError::Format(format!("name is not UTF-8: {e}")))
}

/// Save a trained model (weights as f32) with its normalization stats.
pub fn write_checkpoint(path: &Path, model: &ConvDenoiser) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let arch = model.arch();
    w.write_u32::<LittleEndian>(arch.field_channels as u32)?;
    w.write_u32::<LittleEndian>(model.height() as u32)?;
    w.write_u32::<LittleEndian>(model.width() as u32)?;
    w.write_u32::<LittleEndian>(arch.base as u32)?;
    w.write_f64::<LittleEndian>(arch.sigma_data)?;
    for (c, spec) in model.channels().iter().enumerate() {
        write_channel_spec(&mut w, spec, model.norm().mean[c], model.norm().std[c])?;
    }
    let sections = model.sections();
    w.write_u32::<LittleEndian>((sections.len() * 2) as u32)?;
    let mut offset = 0u64;
    for (name, weights, biases) in &sections {
        write_name(&mut w, &format!("{name}.w"))?;
        w.write_u64::<LittleEndian>(offset)?;
        w.write_u64::<LittleEndian>(weights.len() as u64)?;
        offset += weights.len() as u64;
        write_name(&mut w, &format!("{name}.b"))?;
        w.write_u64::<LittleEndian>(offset)?;
        w.write_u64::<LittleEndian>(biases.len() as u64)?;
        offset += biases.len() as u64;
    }
    w.write_u64::<LittleEndian>(offset)?;
    for (_, weights, biases) in &sections {
        for &v in weights {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &v in biases {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a model checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<ConvDenoiser> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SdaError::Format(format!(
            "bad magic {:?}, expected \"SDAD\"",
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SdaError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let c = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let base = r.read_u32::<LittleEndian>()? as usize;
    let sigma_data = r.read_f64::<LittleEndian>()?;
    let mut channels = Vec::with_capacity(c);
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for _ in 0..c {
        let (spec, m, s) = read_channel_spec(&mut r)?;
        channels.push(spec);
        mean.push(m);
        std.push(s);
    }
    let n_sections = r.read_u32::<LittleEndian>()? as usize;
    let mut index = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name = read_name(&mut r)?;
        let offset = r.read_u64::<LittleEndian>()? as usize;
        let len = r.read_u64::<LittleEndian>()? as usize;
        index.push((name, offset, len));
    }
    let blob_len = r.read_u64::<LittleEndian>()? as usize;
    let mut blob = Vec::with_capacity(blob_len);
    for _ in 0..blob_len {
        blob.push(r.read_f32::<LittleEndian>()? as f64);
    }
    for (name, offset, len) in &index {
        if offset + len > blob.len() {
            return Err(SdaError::Format(format!(
                "section '{name}' spans past the end of the weight blob"
            )));
        }
    }
    if index.len() % 2 != 0 {
        return Err(SdaError::Format("odd checkpoint section count".to_string()));
    }
    let mut sections = Vec::with_capacity(index.len() / 2);
    for pair in index.chunks(2) {
        let (wname, woff, wlen) = &pair[0];
        let (bname, boff, blen) = &pair[1];
        let layer = wname.strip_suffix(".w").ok_or_else(|| {
            SdaError::Format(format!("expected weight section, found '{wname}'"))
        })?;
        if bname != &format!("{layer}.b") {
            return Err(SdaError::Format(format!(
                "weight section '{wname}' not followed by its bias section"
            )));
        }
        sections.push((
            layer.to_string(),
            blob[*woff..woff + wlen].to_vec(),
            blob[*boff..boff + blen].to_vec(),
        ));
    }
    let arch = ConvArch {
        field_channels: c,
        base,
        sigma_data,
    };
    ConvDenoiser::from_sections(channels, NormStats::new(mean, std)?, h, w, arch, &sections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ChannelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let channels = vec![ChannelSpec::identity("u10", "m/s")];
        let norm = NormStats::new(vec![1.5], vec![2.5]).unwrap();
        let model = ConvDenoiser::new(channels.clone(), norm, 8, 8, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdad");
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();

        assert_eq!(back.arch(), model.arch());
        assert_eq!(back.norm(), model.norm());
        assert_eq!(back.channels()[0].name, "u10");

        // Outputs agree to f32 weight precision. Weights of a fresh seed-11
        // model are O(0.1); quantization error is ~1e-8 relative.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = crate::field::FieldGrid::new(
            channels,
            8,
            8,
            data,
            NormStats::new(vec![1.5], vec![2.5]).unwrap(),
        )
        .unwrap();
        let a = model.evaluate(&x, 0.7).unwrap();
        let b = back.evaluate(&x, 0.7).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }

    #[test]
    fn checkpoint_is_byte_stable_after_reload() {
        let channels = vec![ChannelSpec::identity("u10", "m/s")];
        let model =
            ConvDenoiser::new(channels, NormStats::unit(1), 8, 8, 4, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.sdad");
        let p2 = dir.path().join("b.sdad");
        write_checkpoint(&p1, &model).unwrap();
        let back = read_checkpoint(&p1).unwrap();
        write_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sdad");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
