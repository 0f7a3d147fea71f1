//! Trainable convolutional denoiser.
//!
//! A small encoder-decoder with skip connections over three resolution
//! levels, conditioned on the noise level through a constant ln(sigma)/4
//! input plane, wrapped in the standard preconditioning
//!
//! ```text
//! D(x; sigma) = c_skip * x + c_out * F(c_in * x, c_noise)
//! c_skip = sd^2/(sigma^2 + sd^2)   c_out = sigma*sd/sqrt(sigma^2 + sd^2)
//! c_in   = 1/sqrt(sigma^2 + sd^2)  c_noise = ln(sigma)/4
//! ```
//!
//! with sd = sigma_data = 1 for normalized fields. Forward and reverse
//! passes are written out by hand (im2col + GEMM); the reverse pass serves
//! both the vjp contract and weight-gradient computation for training.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::Denoiser;
use crate::error::{Result, SdaError};
use crate::field::{ChannelSpec, FieldGrid, NormStats};

/// Architecture hyperparameters stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvArch {
    /// Field channels in and out.
    pub field_channels: usize,
    /// Base width; levels use base, 2*base, 4*base.
    pub base: usize,
    /// Data standard deviation used by the preconditioner.
    pub sigma_data: f64,
}

#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

/// 3x3 same-padding convolution; weights kept as a (c_out x 9*c_in) matrix.
#[derive(Debug, Clone)]
pub(crate) struct Conv3x3 {
    pub(crate) name: &'static str,
    c_in: usize,
    c_out: usize,
    w: DMatrix<f64>,
    b: Vec<f64>,
}

impl Conv3x3 {
    fn init(name: &'static str, c_in: usize, c_out: usize, rng: &mut impl Rng, zero: bool) -> Self {
        let fan_in = (c_in * 9) as f64;
        let scale = if zero { 0.0 } else { (2.0 / fan_in).sqrt() };
        let w = DMatrix::from_fn(c_out, c_in * 9, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Conv3x3 {
            name,
            c_in,
            c_out,
            w,
            b: vec![0.0; c_out],
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Gather 3x3 zero-padded patches; column-major (9*c_in) x (h*w).
fn im2col(t: &Tensor) -> DMatrix<f64> {
    let (c, h, w) = (t.c, t.h, t.w);
    let rows = c * 9;
    let mut out = DMatrix::zeros(rows, h * w);
    for ci in 0..c {
        let plane = &t.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[(row, y * w + x)] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add the patch-gradient matrix back onto an input-shaped tensor.
fn col2im(dp: &DMatrix<f64>, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out.data[(ci * h + sy as usize) * w + sx as usize] += dp[(row, y * w + x)];
                    }
                }
            }
        }
    }
    out
}

fn conv_forward(layer: &Conv3x3, input: &Tensor) -> (Tensor, DMatrix<f64>) {
    debug_assert_eq!(input.c, layer.c_in);
    let patches = im2col(input);
    let out_mat = &layer.w * &patches;
    let (h, w) = (input.h, input.w);
    let mut out = Tensor::zeros(layer.c_out, h, w);
    for co in 0..layer.c_out {
        let bias = layer.b[co];
        for p in 0..h * w {
            out.data[co * h * w + p] = out_mat[(co, p)] + bias;
        }
    }
    (out, patches)
}

/// dOut (tensor-shaped) -> (dInput, dW, db).
fn conv_backward(
    layer: &Conv3x3,
    patches: &DMatrix<f64>,
    d_out: &Tensor,
) -> (Tensor, DMatrix<f64>, Vec<f64>) {
    let (h, w) = (d_out.h, d_out.w);
    let hw = h * w;
    let mut d_out_mat = DMatrix::zeros(layer.c_out, hw);
    for co in 0..layer.c_out {
        for p in 0..hw {
            d_out_mat[(co, p)] = d_out.data[co * hw + p];
        }
    }
    let d_w = &d_out_mat * patches.transpose();
    let mut d_b = vec![0.0; layer.c_out];
    for co in 0..layer.c_out {
        d_b[co] = d_out_mat.row(co).sum();
    }
    let d_patches = layer.w.transpose() * d_out_mat;
    let d_input = col2im(&d_patches, layer.c_in, h, w);
    (d_input, d_w, d_b)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(t: &Tensor) -> Tensor {
    Tensor {
        c: t.c,
        h: t.h,
        w: t.w,
        data: t.data.iter().map(|&x| x * sigmoid(x)).collect(),
    }
}

/// dL/dx given the pre-activation z and dL/dy for y = silu(z).
fn silu_backward(z: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        c: z.c,
        h: z.h,
        w: z.w,
        data: z
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &g)| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .collect(),
    }
}

fn avg_pool2(t: &Tensor) -> Tensor {
    let (h2, w2) = (t.h / 2, t.w / 2);
    let mut out = Tensor::zeros(t.c, h2, w2);
    for c in 0..t.c {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += t.data[(c * t.h + 2 * y + dy) * t.w + 2 * x + dx];
                    }
                }
                out.data[(c * h2 + y) * w2 + x] = acc * 0.25;
            }
        }
    }
    out
}

fn avg_pool2_backward(d_out: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(d_out.c, h, w);
    for c in 0..d_out.c {
        for y in 0..d_out.h {
            for x in 0..d_out.w {
                let g = d_out.data[(c * d_out.h + y) * d_out.w + x] * 0.25;
                for dy in 0..2 {
                    for dx in 0..2 {
                        out.data[(c * h + 2 * y + dy) * w + 2 * x + dx] = g;
                    }
                }
            }
        }
    }
    out
}

fn upsample2(t: &Tensor) -> Tensor {
    let (h2, w2) = (t.h * 2, t.w * 2);
    let mut out = Tensor::zeros(t.c, h2, w2);
    for c in 0..t.c {
        for y in 0..h2 {
            for x in 0..w2 {
                out.data[(c * h2 + y) * w2 + x] = t.data[(c * t.h + y / 2) * t.w + x / 2];
            }
        }
    }
    out
}

fn upsample2_backward(d_out: &Tensor) -> Tensor {
    let (h, w) = (d_out.h / 2, d_out.w / 2);
    let mut out = Tensor::zeros(d_out.c, h, w);
    for c in 0..d_out.c {
        for y in 0..d_out.h {
            for x in 0..d_out.w {
                out.data[(c * h + y / 2) * w + x / 2] += d_out.data[(c * d_out.h + y) * d_out.w + x];
            }
        }
    }
    out
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split(d: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let hw = d.h * d.w;
    let first = Tensor {
        c: c_first,
        h: d.h,
        w: d.w,
        data: d.data[..c_first * hw].to_vec(),
    };
    let second = Tensor {
        c: d.c - c_first,
        h: d.h,
        w: d.w,
        data: d.data[c_first * hw..].to_vec(),
    };
    (first, second)
}

/// Layer indices into `ConvDenoiser::layers`.
const L_STEM: usize = 0;
const L_ENC0: usize = 1;
const L_DOWN1: usize = 2;
const L_ENC1: usize = 3;
const L_DOWN2: usize = 4;
const L_MID1: usize = 5;
const L_MID2: usize = 6;
const L_UP1A: usize = 7;
const L_UP1B: usize = 8;
const L_UP0A: usize = 9;
const L_UP0B: usize = 10;
const L_HEAD: usize = 11;
pub(crate) const LAYER_COUNT: usize = 12;

/// Everything the reverse pass needs from a forward pass.
pub(crate) struct ForwardCache {
    sigma: f64,
    patches: Vec<DMatrix<f64>>,
    pre_act: Vec<Tensor>,
    d_out: Vec<f64>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &[f64] {
        &self.d_out
    }
}

/// Per-layer weight/bias gradients produced by the training reverse pass.
pub(crate) struct ParamGrads {
    pub(crate) d_w: Vec<DMatrix<f64>>,
    pub(crate) d_b: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub(crate) fn zeros_like(model: &ConvDenoiser) -> Self {
        ParamGrads {
            d_w: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            d_b: model.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub(crate) fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += b;
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Convolutional denoiser backend. Immutable during inference; training
/// mutates weights through [`crate::denoiser::train`].
pub struct ConvDenoiser {
    channels: Vec<ChannelSpec>,
    norm: NormStats,
    height: usize,
    width: usize,
    arch: ConvArch,
    layers: Vec<Conv3x3>,
}

impl ConvDenoiser {
    /// Fresh network with seeded initialization. `height`/`width` set the
    /// native sampling resolution and must be divisible by 4.
    pub fn new(
        channels: Vec<ChannelSpec>,
        norm: NormStats,
        height: usize,
        width: usize,
        base: usize,
        seed: u64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(SdaError::config("at least one channel required".to_string()));
        }
        if norm.channels() != channels.len() {
            return Err(SdaError::shape("norm stats / channel count mismatch".to_string()));
        }
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(SdaError::config(format!(
                "grid dims must be positive multiples of 4, got {height}x{width}"
            )));
        }
        if base == 0 {
            return Err(SdaError::config("base width must be positive".to_string()));
        }
        let arch = ConvArch {
            field_channels: channels.len(),
            base,
            sigma_data: 1.0,
        };
        let layers = Self::build_layers(&arch, seed);
        Ok(ConvDenoiser {
            channels,
            norm,
            height,
            width,
            arch,
            layers,
        })
    }

    fn build_layers(arch: &ConvArch, seed: u64) -> Vec<Conv3x3> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, b) = (arch.field_channels, arch.base);
        vec![
            Conv3x3::init("stem", c + 1, b, &mut rng, false),
            Conv3x3::init("enc0", b, b, &mut rng, false),
            Conv3x3::init("down1", b, 2 * b, &mut rng, false),
            Conv3x3::init("enc1", 2 * b, 2 * b, &mut rng, false),
            Conv3x3::init("down2", 2 * b, 4 * b, &mut rng, false),
            Conv3x3::init("mid1", 4 * b, 4 * b, &mut rng, false),
            Conv3x3::init("mid2", 4 * b, 4 * b, &mut rng, false),
            Conv3x3::init("up1a", 6 * b, 2 * b, &mut rng, false),
            Conv3x3::init("up1b", 2 * b, 2 * b, &mut rng, false),
            Conv3x3::init("up0a", 3 * b, b, &mut rng, false),
            Conv3x3::init("up0b", b, b, &mut rng, false),
            // Zero-init head: the network starts as D = c_skip * x.
            Conv3x3::init("head", b, c, &mut rng, true),
        ]
    }

    pub fn arch(&self) -> &ConvArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv3x3::param_count).sum()
    }

    /// Named weight sections for checkpointing: (name, weights column-major,
    /// biases). Weight matrix shape is (c_out, 9*c_in).
    pub fn sections(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| (l.name.to_string(), l.w.as_slice().to_vec(), l.b.clone()))
            .collect()
    }

    /// Rebuild from checkpoint sections (inverse of [`Self::sections`]).
    pub fn from_sections(
        channels: Vec<ChannelSpec>,
        norm: NormStats,
        height: usize,
        width: usize,
        arch: ConvArch,
        sections: &[(String, Vec<f64>, Vec<f64>)],
    ) -> Result<Self> {
        let mut model = ConvDenoiser::new(channels, norm, height, width, arch.base, 0)?;
        model.arch.sigma_data = arch.sigma_data;
        if sections.len() != model.layers.len() {
            return Err(SdaError::Format(format!(
                "checkpoint has {} weight sections, expected {}",
                sections.len(),
                model.layers.len()
            )));
        }
        for (layer, (name, w, b)) in model.layers.iter_mut().zip(sections) {
            if layer.name != name {
                return Err(SdaError::Format(format!(
                    "checkpoint section '{name}' does not match layer '{}'",
                    layer.name
                )));
            }
            if w.len() != layer.w.len() || b.len() != layer.b.len() {
                return Err(SdaError::Format(format!(
                    "checkpoint section '{name}' has wrong size"
                )));
            }
            layer.w = DMatrix::from_column_slice(layer.w.nrows(), layer.w.ncols(), w);
            layer.b = b.clone();
        }
        Ok(model)
    }

    fn preconditioning(&self, sigma: f64) -> (f64, f64, f64, f64) {
        let sd2 = self.arch.sigma_data * self.arch.sigma_data;
        let s2 = sigma * sigma;
        let c_skip = sd2 / (s2 + sd2);
        let c_out = sigma * self.arch.sigma_data / (s2 + sd2).sqrt();
        let c_in = 1.0 / (s2 + sd2).sqrt();
        let c_noise = sigma.ln() / 4.0;
        (c_skip, c_out, c_in, c_noise)
    }

    fn check_input(&self, x: &FieldGrid) -> Result<()> {
        if x.channel_count() != self.arch.field_channels {
            return Err(SdaError::shape(format!(
                "grid has {} channels, denoiser expects {}",
                x.channel_count(),
                self.arch.field_channels
            )));
        }
        if x.height() % 4 != 0 || x.width() % 4 != 0 {
            return Err(SdaError::shape(format!(
                "grid dims must be multiples of 4, got {}x{}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Forward pass retaining everything the reverse pass needs.
    pub(crate) fn forward_cached(&self, x: &[f64], h: usize, w: usize, sigma: f64) -> ForwardCache {
        let (c_skip, c_out, c_in, c_noise) = self.preconditioning(sigma);
        let c = self.arch.field_channels;
        let mut input = Tensor::zeros(c + 1, h, w);
        for (o, v) in input.data[..c * h * w].iter_mut().zip(x) {
            *o = c_in * v;
        }
        for o in &mut input.data[c * h * w..] {
            *o = c_noise;
        }

        let mut patches = Vec::with_capacity(LAYER_COUNT);
        let mut pre_act = Vec::with_capacity(LAYER_COUNT);
        let conv = |idx: usize,
                        inp: &Tensor,
                        patches: &mut Vec<DMatrix<f64>>,
                        pre_act: &mut Vec<Tensor>|
         -> Tensor {
            let (z, p) = conv_forward(&self.layers[idx], inp);
            patches.push(p);
            pre_act.push(z.clone());
            z
        };

        let t0 = silu(&conv(L_STEM, &input, &mut patches, &mut pre_act));
        let s0 = silu(&conv(L_ENC0, &t0, &mut patches, &mut pre_act));
        let p1 = avg_pool2(&s0);
        let t1 = silu(&conv(L_DOWN1, &p1, &mut patches, &mut pre_act));
        let s1 = silu(&conv(L_ENC1, &t1, &mut patches, &mut pre_act));
        let p2 = avg_pool2(&s1);
        let t2 = silu(&conv(L_DOWN2, &p2, &mut patches, &mut pre_act));
        let m1 = silu(&conv(L_MID1, &t2, &mut patches, &mut pre_act));
        let m2 = silu(&conv(L_MID2, &m1, &mut patches, &mut pre_act));
        let u1 = upsample2(&m2);
        let c1 = concat(&u1, &s1);
        let v1 = silu(&conv(L_UP1A, &c1, &mut patches, &mut pre_act));
        let v1b = silu(&conv(L_UP1B, &v1, &mut patches, &mut pre_act));
        let u0 = upsample2(&v1b);
        let c0 = concat(&u0, &s0);
        let v0 = silu(&conv(L_UP0A, &c0, &mut patches, &mut pre_act));
        let v0b = silu(&conv(L_UP0B, &v0, &mut patches, &mut pre_act));
        let (f, p_head) = conv_forward(&self.layers[L_HEAD], &v0b);
        patches.push(p_head);
        pre_act.push(f.clone());

        let d_out: Vec<f64> = x
            .iter()
            .zip(&f.data)
            .map(|(xi, fi)| c_skip * xi + c_out * fi)
            .collect();
        ForwardCache {
            sigma,
            patches,
            pre_act,
            d_out,
        }
    }

    /// Reverse pass. `d_d` is dL/dD. Returns dL/dx and, when requested,
    /// per-layer weight gradients.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_d: &[f64],
        want_params: bool,
    ) -> (Vec<f64>, Option<ParamGrads>) {
        let (c_skip, c_out, c_in, _) = self.preconditioning(cache.sigma);
        let c = self.arch.field_channels;
        let hw = d_d.len() / c;
        let (h, w) = {
            // Recover spatial dims from the head pre-activation.
            let f = &cache.pre_act[L_HEAD];
            (f.h, f.w)
        };
        debug_assert_eq!(h * w, hw);

        let mut grads = want_params.then(|| ParamGrads {
            d_w: Vec::with_capacity(LAYER_COUNT),
            d_b: Vec::with_capacity(LAYER_COUNT),
        });
        // Gradients are produced head-first and reversed at the end.
        let mut rev_w: Vec<DMatrix<f64>> = Vec::new();
        let mut rev_b: Vec<Vec<f64>> = Vec::new();

        let conv_back = |idx: usize,
                             d_out: &Tensor,
                             rev_w: &mut Vec<DMatrix<f64>>,
                             rev_b: &mut Vec<Vec<f64>>,
                             want: bool|
         -> Tensor {
            let (d_in, d_w, d_b) = conv_backward(&self.layers[idx], &cache.patches[idx], d_out);
            if want {
                rev_w.push(d_w);
                rev_b.push(d_b);
            }
            d_in
        };
        let want = want_params;

        // d F = c_out * dD
        let d_f = Tensor {
            c,
            h,
            w,
            data: d_d.iter().map(|g| c_out * g).collect(),
        };
        let d_v0b_post = conv_back(L_HEAD, &d_f, &mut rev_w, &mut rev_b, want);
        let d_v0b = silu_backward(&cache.pre_act[L_UP0B], &d_v0b_post);
        let d_v0_post = conv_back(L_UP0B, &d_v0b, &mut rev_w, &mut rev_b, want);
        let d_v0 = silu_backward(&cache.pre_act[L_UP0A], &d_v0_post);
        let d_c0 = conv_back(L_UP0A, &d_v0, &mut rev_w, &mut rev_b, want);
        let (d_u0, d_s0_a) = split(&d_c0, 2 * self.arch.base);
        let d_v1b_up = upsample2_backward(&d_u0);
        let d_v1b = silu_backward(&cache.pre_act[L_UP1B], &d_v1b_up);
        let d_v1_post = conv_back(L_UP1B, &d_v1b, &mut rev_w, &mut rev_b, want);
        let d_v1 = silu_backward(&cache.pre_act[L_UP1A], &d_v1_post);
        let d_c1 = conv_back(L_UP1A, &d_v1, &mut rev_w, &mut rev_b, want);
        let (d_u1, d_s1_a) = split(&d_c1, 4 * self.arch.base);
        let d_m2_up = upsample2_backward(&d_u1);
        let d_m2 = silu_backward(&cache.pre_act[L_MID2], &d_m2_up);
        let d_m1_post = conv_back(L_MID2, &d_m2, &mut rev_w, &mut rev_b, want);
        let d_m1 = silu_backward(&cache.pre_act[L_MID1], &d_m1_post);
        let d_t2_post = conv_back(L_MID1, &d_m1, &mut rev_w, &mut rev_b, want);
        let d_t2 = silu_backward(&cache.pre_act[L_DOWN2], &d_t2_post);
        let d_p2 = conv_back(L_DOWN2, &d_t2, &mut rev_w, &mut rev_b, want);
        let d_s1_pool = avg_pool2_backward(&d_p2, h / 2, w / 2);
        // Skip connection joins here: total gradient on s1.
        let d_s1_total = Tensor {
            c: d_s1_pool.c,
            h: d_s1_pool.h,
            w: d_s1_pool.w,
            data: d_s1_pool
                .data
                .iter()
                .zip(&d_s1_a.data)
                .map(|(a, b)| a + b)
                .collect(),
        };
        let d_s1 = silu_backward(&cache.pre_act[L_ENC1], &d_s1_total);
        let d_t1_post = conv_back(L_ENC1, &d_s1, &mut rev_w, &mut rev_b, want);
        let d_t1 = silu_backward(&cache.pre_act[L_DOWN1], &d_t1_post);
        let d_p1 = conv_back(L_DOWN1, &d_t1, &mut rev_w, &mut rev_b, want);
        let d_s0_pool = avg_pool2_backward(&d_p1, h, w);
        let d_s0_total = Tensor {
            c: d_s0_pool.c,
            h: d_s0_pool.h,
            w: d_s0_pool.w,
            data: d_s0_pool
                .data
                .iter()
                .zip(&d_s0_a.data)
                .map(|(a, b)| a + b)
                .collect(),
        };
        let d_s0 = silu_backward(&cache.pre_act[L_ENC0], &d_s0_total);
        let d_t0_post = conv_back(L_ENC0, &d_s0, &mut rev_w, &mut rev_b, want);
        let d_t0 = silu_backward(&cache.pre_act[L_STEM], &d_t0_post);
        let d_input = conv_back(L_STEM, &d_t0, &mut rev_w, &mut rev_b, want);

        // dD/dx has the extra c_skip identity path; the field channels of the
        // network input carry a c_in factor.
        let d_x: Vec<f64> = d_input.data[..c * hw]
            .iter()
            .zip(d_d)
            .map(|(g_net, g_direct)| c_in * g_net + c_skip * g_direct)
            .collect();

        if let Some(g) = grads.as_mut() {
            rev_w.reverse();
            rev_b.reverse();
            g.d_w = rev_w;
            g.d_b = rev_b;
        }
        (d_x, grads)
    }

    pub(crate) fn apply_update(&mut self, layer: usize, d_w: &DMatrix<f64>, d_b: &[f64]) {
        self.layers[layer].w += d_w;
        for (b, d) in self.layers[layer].b.iter_mut().zip(d_b) {
            *b += d;
        }
    }
}

impl Denoiser for ConvDenoiser {
    fn evaluate(&self, x: &FieldGrid, sigma: f64) -> Result<FieldGrid> {
        if sigma < 0.0 {
            return Err(SdaError::domain(format!("sigma must be >= 0, got {sigma}")));
        }
        self.check_input(x)?;
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let cache = self.forward_cached(x.data(), x.height(), x.width(), sigma);
        if cache.d_out.iter().any(|v| !v.is_finite()) {
            return Err(SdaError::numerical(format!(
                "conv denoiser produced non-finite output at sigma = {sigma}"
            )));
        }
        x.with_data(cache.d_out.clone())
    }

    fn vjp(&self, x: &FieldGrid, sigma: f64, cotangent: &FieldGrid) -> Result<FieldGrid> {
        if sigma < 0.0 {
            return Err(SdaError::domain(format!("sigma must be >= 0, got {sigma}")));
        }
        self.check_input(x)?;
        if !x.same_layout(cotangent) {
            return Err(SdaError::shape("cotangent layout mismatch".to_string()));
        }
        if sigma == 0.0 {
            return Ok(cotangent.clone());
        }
        let cache = self.forward_cached(x.data(), x.height(), x.width(), sigma);
        let (d_x, _) = self.backward(&cache, cotangent.data(), false);
        cotangent.with_data(d_x)
    }

    fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn norm(&self) -> &NormStats {
        &self.norm
    }
}
