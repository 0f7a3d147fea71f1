//! Binary grid file format (little-endian):
//!
//! ```text
//! magic "SDAG" | version u32 | C u32 | H u32 | W u32
//! per channel: name (u16 length + UTF-8) | transform tag u8 | shift f64
//!              | mean f64 | std f64
//! C*H*W f32 values, channel-major
//! ```
//!
//! Transform tags: 0 = identity, 1 = log_shift(shift). Values on disk are
//! f32; read -> write round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, SdaError};
use crate::field::{ChannelSpec, FieldGrid, NormStats, Transform};

const MAGIC: &[u8; 4] = b"SDAG";
const VERSION: u32 = 1;

pub(crate) fn write_channel_spec<W: Write>(
    w: &mut W,
    spec: &ChannelSpec,
    mean: f64,
    std: f64,
) -> Result<()> {
    let name = spec.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(SdaError::config("channel name too long".to_string()));
    }
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name)?;
    let (tag, shift) = match spec.transform {
        Transform::Identity => (0u8, 0.0),
        Transform::LogShift { shift } => (1u8, shift),
    };
    w.write_u8(tag)?;
    w.write_f64::<LittleEndian>(shift)?;
    w.write_f64::<LittleEndian>(mean)?;
    w.write_f64::<LittleEndian>(std)?;
    Ok(())
}

pub(crate) fn read_channel_spec<R: Read>(r: &mut R) -> Result<(ChannelSpec, f64, f64)> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|e| SdaError::Format(format!("channel name is not UTF-8: {e}")))?;
    let tag = r.read_u8()?;
    let shift = r.read_f64::<LittleEndian>()?;
    let mean = r.read_f64::<LittleEndian>()?;
    let std = r.read_f64::<LittleEndian>()?;
    let transform = match tag {
        0 => Transform::Identity,
        1 => Transform::LogShift { shift },
        t => return Err(SdaError::Format(format!("unknown transform tag {t}"))),
    };
    // Units are not stored in the binary format.
    let spec = ChannelSpec::new(name, transform, "")?;
    Ok((spec, mean, std))
}

/// Serialize a grid into a writer.
pub fn write_grid<W: Write>(w: &mut W, grid: &FieldGrid) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(grid.channel_count() as u32)?;
    w.write_u32::<LittleEndian>(grid.height() as u32)?;
    w.write_u32::<LittleEndian>(grid.width() as u32)?;
    for (c, spec) in grid.channels().iter().enumerate() {
        write_channel_spec(w, spec, grid.norm().mean[c], grid.norm().std[c])?;
    }
    for &v in grid.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Deserialize a grid from a reader.
pub fn read_grid<R: Read>(r: &mut R) -> Result<FieldGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SdaError::Format(format!(
            "bad magic {:?}, expected \"SDAG\"",
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SdaError::Format(format!("unsupported grid version {version}")));
    }
    let c = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let mut channels = Vec::with_capacity(c);
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for _ in 0..c {
        let (spec, m, s) = read_channel_spec(r)?;
        channels.push(spec);
        mean.push(m);
        std.push(s);
    }
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c * h * w {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    FieldGrid::new(channels, h, w, data, NormStats::new(mean, std)?)
}

/// Write a grid to a file path.
pub fn write_grid_file(path: &Path, grid: &FieldGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

/// Read a grid from a file path.
pub fn read_grid_file(path: &Path) -> Result<FieldGrid> {
    let mut r = BufReader::new(File::open(path)?);
    read_grid(&mut r)
}
