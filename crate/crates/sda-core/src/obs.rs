//! Observation sets and observation operators.
//!
//! An operator H is a pure selection of scalar grid entries (station points,
//! regular strides, whole channels); its adjoint scatters observation-space
//! vectors back onto the grid for guidance gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};
use crate::field::FieldGrid;

/// Grid layout an operator is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn of(grid: &FieldGrid) -> Self {
        GridShape {
            channels: grid.channel_count(),
            height: grid.height(),
            width: grid.width(),
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat_index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    /// Inverse of [`Self::flat_index`].
    #[inline]
    pub fn unflatten(&self, flat: usize) -> (usize, usize, usize) {
        let hw = self.height * self.width;
        (flat / hw, (flat % hw) / self.width, flat % self.width)
    }
}

/// One scalar observation in transformed/normalized (model) space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
    /// Noise std in model space; must be positive.
    pub sigma: f64,
}

/// A collection of point observations of one grid layout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    observations: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        for (i, o) in observations.iter().enumerate() {
            if !(o.sigma > 0.0) {
                return Err(SdaError::config(format!(
                    "observation {i} has non-positive sigma {}",
                    o.sigma
                )));
            }
            if !o.value.is_finite() {
                return Err(SdaError::numerical(format!(
                    "observation {i} has non-finite value"
                )));
            }
        }
        Ok(ObservationSet { observations })
    }

    pub fn empty() -> Self {
        ObservationSet::default()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.value).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.sigma * o.sigma).collect()
    }

    /// The selection operator picking exactly these observation locations,
    /// bound to `shape`.
    pub fn operator(&self, shape: GridShape) -> Result<ObsOperator> {
        ObsOperator::point_set(
            shape,
            &self
                .observations
                .iter()
                .map(|o| (o.channel, o.row, o.col))
                .collect::<Vec<_>>(),
        )
    }
}

/// How an operator was constructed; retained for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsOperatorKind {
    PointSet,
    RegularStride(usize),
    ChannelMask(Vec<usize>),
    Composition,
}

/// Selection operator: grid -> vector of selected entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsOperator {
    shape: GridShape,
    kind: ObsOperatorKind,
    indices: Vec<usize>,
}

impl ObsOperator {
    /// Select the given (channel, row, col) points, in order.
    pub fn point_set(shape: GridShape, points: &[(usize, usize, usize)]) -> Result<Self> {
        let mut indices = Vec::with_capacity(points.len());
        let mut seen = vec![false; shape.len()];
        for &(c, r, col) in points {
            if c >= shape.channels || r >= shape.height || col >= shape.width {
                return Err(SdaError::config(format!(
                    "observation point (ch {c}, row {r}, col {col}) out of bounds for \
                     {}x{}x{} grid",
                    shape.channels, shape.height, shape.width
                )));
            }
            let i = shape.flat_index(c, r, col);
            if seen[i] {
                return Err(SdaError::config(format!(
                    "duplicate observation point (ch {c}, row {r}, col {col})"
                )));
            }
            seen[i] = true;
            indices.push(i);
        }
        Ok(ObsOperator {
            shape,
            kind: ObsOperatorKind::PointSet,
            indices,
        })
    }

    /// Every channel at rows/cols 0, s, 2s, ...; remainder cells at the far
    /// edges are not observed.
    pub fn regular_stride(shape: GridShape, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(SdaError::config("stride must be positive".to_string()));
        }
        let mut indices = Vec::new();
        for c in 0..shape.channels {
            for r in (0..shape.height).step_by(stride) {
                for col in (0..shape.width).step_by(stride) {
                    indices.push(shape.flat_index(c, r, col));
                }
            }
        }
        Ok(ObsOperator {
            shape,
            kind: ObsOperatorKind::RegularStride(stride),
            indices,
        })
    }

    /// Dense observations of the kept channels only.
    pub fn channel_mask(shape: GridShape, kept: &[usize]) -> Result<Self> {
        if kept.is_empty() {
            return Err(SdaError::config("channel mask must keep at least one channel".to_string()));
        }
        let mut kept_sorted = kept.to_vec();
        kept_sorted.sort_unstable();
        kept_sorted.dedup();
        if kept_sorted.len() != kept.len() {
            return Err(SdaError::config("channel mask has duplicate channels".to_string()));
        }
        if let Some(&c) = kept_sorted.iter().find(|&&c| c >= shape.channels) {
            return Err(SdaError::config(format!(
                "channel {c} out of bounds for {}-channel grid",
                shape.channels
            )));
        }
        let hw = shape.height * shape.width;
        let mut indices = Vec::with_capacity(kept_sorted.len() * hw);
        for &c in &kept_sorted {
            indices.extend(c * hw..(c + 1) * hw);
        }
        Ok(ObsOperator {
            shape,
            kind: ObsOperatorKind::ChannelMask(kept_sorted),
            indices,
        })
    }

    /// Intersection of two selections over the same grid (e.g. a channel
    /// mask restricted to strided locations). Output order is ascending.
    pub fn compose(&self, other: &ObsOperator) -> Result<Self> {
        if self.shape != other.shape {
            return Err(SdaError::shape("composed operators bound to different grids".to_string()));
        }
        let mut in_other = vec![false; self.shape.len()];
        for &i in &other.indices {
            in_other[i] = true;
        }
        let mut indices: Vec<usize> = self
            .indices
            .iter()
            .copied()
            .filter(|&i| in_other[i])
            .collect();
        indices.sort_unstable();
        Ok(ObsOperator {
            shape: self.shape,
            kind: ObsOperatorKind::Composition,
            indices,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn kind(&self) -> &ObsOperatorKind {
        &self.kind
    }

    /// Number of selected scalar entries.
    pub fn output_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn check_grid(&self, grid: &FieldGrid) -> Result<()> {
        if GridShape::of(grid) != self.shape {
            return Err(SdaError::shape(format!(
                "operator bound to {}x{}x{}, grid is {}x{}x{}",
                self.shape.channels,
                self.shape.height,
                self.shape.width,
                grid.channel_count(),
                grid.height(),
                grid.width()
            )));
        }
        Ok(())
    }

    /// Gather the selected entries.
    pub fn apply(&self, grid: &FieldGrid) -> Result<Vec<f64>> {
        self.check_grid(grid)?;
        let data = grid.data();
        Ok(self.indices.iter().map(|&i| data[i]).collect())
    }

    /// Scatter an observation-space vector back onto a zero grid (the
    /// transpose of [`Self::apply`] as a linear map).
    pub fn adjoint(&self, v: &[f64], template: &FieldGrid) -> Result<FieldGrid> {
        self.check_grid(template)?;
        if v.len() != self.indices.len() {
            return Err(SdaError::shape(format!(
                "adjoint input has {} entries, operator selects {}",
                v.len(),
                self.indices.len()
            )));
        }
        let mut out = template.zeros_like();
        let data = out.data_mut();
        for (&i, &x) in self.indices.iter().zip(v) {
            data[i] = x;
        }
        Ok(out)
    }

    /// Scatter into a plain flat buffer (no grid bookkeeping).
    pub(crate) fn adjoint_into(&self, v: &[f64], out: &mut [f64]) {
        for (&i, &x) in self.indices.iter().zip(v) {
            out[i] += x;
        }
    }
}

/// Sample y = H(grid) + eta with eta ~ N(0, diag(sigma_c^2)) in model space;
/// per-observation sigma is looked up by channel.
pub fn simulate_pseudo_obs(
    grid: &FieldGrid,
    op: &ObsOperator,
    noise_std_per_channel: &[f64],
    rng: &mut impl Rng,
) -> Result<ObservationSet> {
    if noise_std_per_channel.len() != grid.channel_count() {
        return Err(SdaError::shape(format!(
            "{} noise entries for {} channels",
            noise_std_per_channel.len(),
            grid.channel_count()
        )));
    }
    if let Some(s) = noise_std_per_channel.iter().find(|&&s| !(s > 0.0)) {
        return Err(SdaError::config(format!("noise std must be > 0, got {s}")));
    }
    let shape = GridShape::of(grid);
    let clean = op.apply(grid)?;
    let mut observations = Vec::with_capacity(clean.len());
    for (&flat, &v) in op.indices().iter().zip(&clean) {
        let (c, r, col) = shape.unflatten(flat);
        let sigma = noise_std_per_channel[c];
        observations.push(Observation {
            channel: c,
            row: r,
            col,
            value: v + sigma * rng.sample::<f64, _>(StandardNormal),
            sigma,
        });
    }
    ObservationSet::new(observations)
}
