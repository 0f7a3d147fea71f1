//! Grid state representation: channels, per-channel value transforms, and
//! normalization statistics shared by every other module.
//!
//! All diffusion, guidance, and metric computations operate on grids in
//! transformed + normalized space; conversion back to physical units happens
//! only at export and when building observation values for scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};

/// Per-channel value transform applied before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Values pass through unchanged (winds).
    Identity,
    /// v -> ln(v + shift); used for precipitation with shift = 1e-4.
    LogShift { shift: f64 },
}

/// Precipitation shift fixed by the channel convention: ln(P + 1e-4).
pub const PRECIP_SHIFT: f64 = 1e-4;

/// One physical channel of a grid: name, transform, units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub transform: Transform,
    pub units: String,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, transform: Transform, units: impl Into<String>) -> Result<Self> {
        if let Transform::LogShift { shift } = transform {
            if !(shift > 0.0) {
                return Err(SdaError::config(format!("log_shift requires shift > 0, got {shift}")));
            }
        }
        Ok(ChannelSpec {
            name: name.into(),
            transform,
            units: units.into(),
        })
    }

    /// An identity-transform channel (e.g. "u10", "v10").
    pub fn identity(name: impl Into<String>, units: impl Into<String>) -> Self {
        ChannelSpec {
            name: name.into(),
            transform: Transform::Identity,
            units: units.into(),
        }
    }

    /// A log-shift channel with the precipitation convention ln(v + 1e-4).
    pub fn precip(name: impl Into<String>, units: impl Into<String>) -> Self {
        ChannelSpec {
            name: name.into(),
            transform: Transform::LogShift { shift: PRECIP_SHIFT },
            units: units.into(),
        }
    }

    /// Physical -> transformed value.
    pub fn transform_value(&self, v: f64) -> Result<f64> {
        match self.transform {
            Transform::Identity => Ok(v),
            Transform::LogShift { shift } => {
                if v < 0.0 {
                    return Err(SdaError::domain(format!(
                        "negative input {v} to log_shift channel '{}'",
                        self.name
                    )));
                }
                Ok((v + shift).ln())
            }
        }
    }

    /// Transformed -> physical value.
    pub fn inverse_transform_value(&self, v: f64) -> f64 {
        match self.transform {
            Transform::Identity => v,
            Transform::LogShift { shift } => v.exp() - shift,
        }
    }
}

/// Physical -> transformed, applied to a slice of values of one channel.
pub fn transform_physical_to_model(values: &[f64], spec: &ChannelSpec) -> Result<Vec<f64>> {
    values.iter().map(|&v| spec.transform_value(v)).collect()
}

/// Transformed -> physical, inverse of [`transform_physical_to_model`].
pub fn transform_model_to_physical(values: &[f64], spec: &ChannelSpec) -> Vec<f64> {
    values.iter().map(|&v| spec.inverse_transform_value(v)).collect()
}

/// Per-channel mean/std used for normalization. Computed from the training
/// split and stored with the model checkpoint, never recomputed at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(SdaError::shape(format!(
                "norm stats mean/std lengths differ: {} vs {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
            return Err(SdaError::config(format!("norm std must be > 0, got {s}")));
        }
        Ok(NormStats { mean, std })
    }

    /// Unit stats (mean 0, std 1) for `n` channels.
    pub fn unit(n: usize) -> Self {
        NormStats {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A C x H x W array of channel values on a regular grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    channels: Vec<ChannelSpec>,
    height: usize,
    width: usize,
    data: Vec<f64>,
    norm: NormStats,
}

impl FieldGrid {
    /// Build a grid, validating shapes, finiteness, and channel-name uniqueness.
    pub fn new(
        channels: Vec<ChannelSpec>,
        height: usize,
        width: usize,
        data: Vec<f64>,
        norm: NormStats,
    ) -> Result<Self> {
        if channels.is_empty() || height == 0 || width == 0 {
            return Err(SdaError::config("grid dimensions must be positive".to_string()));
        }
        for (i, a) in channels.iter().enumerate() {
            if channels[..i].iter().any(|b| b.name == a.name) {
                return Err(SdaError::config(format!("duplicate channel name '{}'", a.name)));
            }
        }
        let expect = channels.len() * height * width;
        if data.len() != expect {
            return Err(SdaError::shape(format!(
                "data length {} != C*H*W = {}",
                data.len(),
                expect
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SdaError::numerical(format!(
                "non-finite grid value at flat index {pos}"
            )));
        }
        if norm.channels() != channels.len() {
            return Err(SdaError::shape(format!(
                "norm stats for {} channels, grid has {}",
                norm.channels(),
                channels.len()
            )));
        }
        Ok(FieldGrid {
            channels,
            height,
            width,
            data,
            norm,
        })
    }

    /// All-zero grid with the given layout.
    pub fn zeros(channels: Vec<ChannelSpec>, height: usize, width: usize, norm: NormStats) -> Result<Self> {
        let n = channels.len() * height * width;
        FieldGrid::new(channels, height, width, vec![0.0; n], norm)
    }

    /// Same layout as `self`, zero-filled data.
    pub fn zeros_like(&self) -> Self {
        FieldGrid {
            channels: self.channels.clone(),
            height: self.height,
            width: self.width,
            data: vec![0.0; self.data.len()],
            norm: self.norm.clone(),
        }
    }

    /// Same layout as `self`, with the given flat data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        FieldGrid::new(
            self.channels.clone(),
            self.height,
            self.width,
            data,
            self.norm.clone(),
        )
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    /// Total number of scalar entries, C*H*W.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index of (channel, row, col).
    #[inline]
    pub fn flat_index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.flat_index(channel, row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        let i = self.flat_index(channel, row, col);
        self.data[i] = v;
    }

    /// One channel's H*W slice.
    pub fn channel_data(&self, channel: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[channel * hw..(channel + 1) * hw]
    }

    /// Index of a channel by name.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// True if `other` has identical channels and dimensions.
    pub fn same_layout(&self, other: &FieldGrid) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Per channel, v -> (v - mean)/std.
pub fn normalize(grid: &FieldGrid, stats: &NormStats) -> Result<FieldGrid> {
    if stats.channels() != grid.channel_count() {
        return Err(SdaError::shape(format!(
            "norm stats for {} channels, grid has {}",
            stats.channels(),
            grid.channel_count()
        )));
    }
    let hw = grid.height() * grid.width();
    let mut data = grid.data().to_vec();
    for c in 0..grid.channel_count() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
    FieldGrid::new(
        grid.channels().to_vec(),
        grid.height(),
        grid.width(),
        data,
        stats.clone(),
    )
}

/// Inverse of [`normalize`]: v -> v*std + mean.
pub fn denormalize(grid: &FieldGrid, stats: &NormStats) -> Result<FieldGrid> {
    if stats.channels() != grid.channel_count() {
        return Err(SdaError::shape(format!(
            "norm stats for {} channels, grid has {}",
            stats.channels(),
            grid.channel_count()
        )));
    }
    let hw = grid.height() * grid.width();
    let mut data = grid.data().to_vec();
    for c in 0..grid.channel_count() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = *v * s + m;
        }
    }
    FieldGrid::new(
        grid.channels().to_vec(),
        grid.height(),
        grid.width(),
        data,
        stats.clone(),
    )
}

/// Transformed+normalized grid -> physical units (denormalize, then invert
/// the per-channel transform). Used at export only.
pub fn to_physical(grid: &FieldGrid) -> Result<FieldGrid> {
    let denorm = denormalize(grid, &grid.norm().clone())?;
    let hw = grid.height() * grid.width();
    let mut data = denorm.data().to_vec();
    for (c, spec) in grid.channels().iter().enumerate() {
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = spec.inverse_transform_value(*v);
        }
    }
    denorm.with_data(data)
}

/// A set of shape-identical grids with the per-member seeds that produced them.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<FieldGrid>,
    seeds: Vec<u64>,
}

impl Ensemble {
    pub fn new(members: Vec<FieldGrid>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(SdaError::config("ensemble must have at least one member".to_string()));
        }
        if members.len() != seeds.len() {
            return Err(SdaError::shape(format!(
                "{} members but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        let first = &members[0];
        if members.iter().any(|m| !m.same_layout(first)) {
            return Err(SdaError::shape("ensemble members differ in layout".to_string()));
        }
        Ok(Ensemble { members, seeds })
    }

    pub fn members(&self) -> &[FieldGrid] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Pointwise ensemble mean.
    pub fn mean(&self) -> FieldGrid {
        let mut acc = self.members[0].zeros_like();
        for m in &self.members {
            for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / self.members.len() as f64;
        for a in acc.data_mut() {
            *a *= inv;
        }
        acc
    }

    /// Pointwise ensemble standard deviation (ddof = 1; zero for a single member).
    pub fn std(&self) -> FieldGrid {
        let mean = self.mean();
        let mut acc = self.members[0].zeros_like();
        if self.members.len() < 2 {
            return acc;
        }
        for m in &self.members {
            for ((a, v), mu) in acc.data_mut().iter_mut().zip(m.data()).zip(mean.data()) {
                let d = v - mu;
                *a += d * d;
            }
        }
        let inv = 1.0 / (self.members.len() - 1) as f64;
        for a in acc.data_mut() {
            *a = (*a * inv).sqrt();
        }
        acc
    }
}
