//! Run output helpers: raster export with value-range sidecars and the
//! per-run file manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use sda_core::field::FieldGrid;

/// Tracks every file a command writes; serialized as run-manifest.json.
#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.files.push(rel.to_string_lossy().into_owned());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("run-manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct RasterEntry {
    file: String,
    channel: String,
    lo: f64,
    hi: f64,
}

/// Export each channel of a grid as an 8-bit grayscale PNG; values are
/// scaled by the per-channel range recorded in the returned sidecar entries.
pub struct RasterWriter {
    entries: Vec<RasterEntry>,
}

impl RasterWriter {
    pub fn new() -> Self {
        RasterWriter { entries: Vec::new() }
    }

    pub fn write_grid(
        &mut self,
        dir: &Path,
        stem: &str,
        grid: &FieldGrid,
        manifest: &mut RunManifest,
        out_dir: &Path,
    ) -> Result<Vec<PathBuf>> {
        let (h, w) = (grid.height(), grid.width());
        let mut written = Vec::new();
        for (c, spec) in grid.channels().iter().enumerate() {
            let data = grid.channel_data(c);
            let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = (data[y * w + x] - lo) / span;
                    img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0) as u8]));
                }
            }
            let file = format!("{stem}_{}.png", spec.name);
            let path = dir.join(&file);
            img.save(&path)
                .with_context(|| format!("cannot write {}", path.display()))?;
            manifest.add(out_dir, &path);
            self.entries.push(RasterEntry {
                file: path
                    .strip_prefix(out_dir)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned(),
                channel: spec.name.clone(),
                lo,
                hi,
            });
            written.push(path);
        }
        Ok(written)
    }

    /// Write the sidecar recording every raster's value range.
    pub fn write_sidecar(&self, dir: &Path, manifest: &mut RunManifest, out_dir: &Path) -> Result<()> {
        let path = dir.join("rasters.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.entries)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        manifest.add(out_dir, &path);
        Ok(())
    }
}

/// Directory-name-safe version of an observation time key.
pub fn sanitize_time_key(time: &str) -> String {
    time.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}
