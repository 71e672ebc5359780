//! A small two-branch convolutional network that regresses the relative
//! twist between a render at the previous pose and the current observation.
//!
//! Topology: two non-shared convolutional encoders (stride-2 3×3 blocks with
//! ReLU), flattened and concatenated features, and two independent heads
//! (FC → ReLU → FC) emitting the translation and rotation parts separately.
//! Everything is generic over the scalar so gradients can be checked in f64
//! and training can run in f32.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::image::RgbdImage;
use crate::rng::stream_rng;
use crate::tracker::{Estimate, EstimatorContext, ResidualEstimator, TrackError};
use crate::{Real, Twist, Vec3};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SE3TNETW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Depth offsets are divided by this before clamping to `[-1, 1]`, meters.
pub const DEPTH_NORMALIZATION: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("weights do not match the network spec: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub channels_in: usize,
    /// Output channels of each stride-2 conv block.
    pub encoder_channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Width of the hidden layer of each head.
    pub hidden: usize,
    pub shared_encoders: bool,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_size: 44,
            channels_in: 4,
            encoder_channels: vec![8, 16, 32],
            kernel_size: 3,
            stride: 2,
            padding: 1,
            hidden: 64,
            shared_encoders: false,
            activation: Activation::Relu,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if self.input_size == 0 || self.channels_in == 0 || self.hidden == 0 {
            return bad("input_size, channels_in and hidden must be positive");
        }
        if self.kernel_size == 0 || self.stride == 0 {
            return bad("kernel_size and stride must be positive");
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder channel counts must be positive");
        }
        let mut n = self.input_size;
        for _ in &self.encoder_channels {
            if n + 2 * self.padding < self.kernel_size {
                return bad("input too small for the encoder");
            }
            n = self.conv_out(n);
        }
        Ok(())
    }

    fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel_size) / self.stride + 1
    }

    /// Spatial side of each encoder activation, input first.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size];
        for _ in &self.encoder_channels {
            let n = *sizes.last().unwrap_or(&0);
            sizes.push(self.conv_out(n));
        }
        sizes
    }

    /// Channels of each encoder activation, input first.
    fn channel_counts(&self) -> Vec<usize> {
        std::iter::once(self.channels_in).chain(self.encoder_channels.iter().copied()).collect()
    }

    /// Flattened feature length of one encoder.
    pub fn branch_features(&self) -> usize {
        let n = *self.spatial_sizes().last().unwrap_or(&0);
        self.channel_counts().last().unwrap_or(&0) * n * n
    }

    pub fn input_len(&self) -> usize {
        self.channels_in * self.input_size * self.input_size
    }

    fn encoder_count(&self) -> usize {
        if self.shared_encoders {
            1
        } else {
            2
        }
    }

    /// Ordered parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let ch = self.channel_counts();
        let mut out = Vec::new();
        for enc in ["enc_a", "enc_b"].iter().take(self.encoder_count()) {
            for i in 0..self.encoder_channels.len() {
                out.push((format!("{enc}.conv{i}.weight"), vec![ch[i + 1], ch[i], k, k]));
                out.push((format!("{enc}.conv{i}.bias"), vec![ch[i + 1]]));
            }
        }
        let features = 2 * self.branch_features();
        for head in ["head_t", "head_w"] {
            out.push((format!("{head}.fc0.weight"), vec![self.hidden, features]));
            out.push((format!("{head}.fc0.bias"), vec![self.hidden]));
            out.push((format!("{head}.fc1.weight"), vec![3, self.hidden]));
            out.push((format!("{head}.fc1.bias"), vec![3]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_data(shape: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::ShapeMismatch(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
}

/// Parameter indices of one conv block or FC layer: `(weight, bias)`.
type LayerIdx = (usize, usize);

impl<T: Real> Network<T> {
    /// All weights and biases zero.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let (names, params) = spec.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).unzip();
        Ok(Self { spec: spec.clone(), names, params })
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        let mut rng = stream_rng(seed, 0);
        for p in net.params.iter_mut().filter(|p| p.shape.len() > 1) {
            let fan_in: usize = p.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p.data.iter_mut() {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Tensor { shape: p.shape.clone(), data: p.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() })
                .collect(),
        }
    }

    fn conv_layer(&self, branch: usize, i: usize) -> LayerIdx {
        let enc = if self.spec.shared_encoders { 0 } else { branch };
        let base = enc * 2 * self.spec.encoder_channels.len() + 2 * i;
        (base, base + 1)
    }

    fn fc_layer(&self, head: usize, i: usize) -> LayerIdx {
        let base = self.spec.encoder_count() * 2 * self.spec.encoder_channels.len() + head * 4 + 2 * i;
        (base, base + 1)
    }

    /// Index of the parameter tensor called `name`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_input(&self, x: &NetInput<T>) -> Result<(), NnError> {
        let n = self.spec.input_len();
        if x.prev.len() != n || x.cur.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "inputs have {} and {} values, network expects {n}",
                x.prev.len(),
                x.cur.len()
            )));
        }
        Ok(())
    }

    /// Forward pass of one sample, keeping every activation for backprop.
    pub fn forward_cached(&self, x: &NetInput<T>) -> Result<Cache<T>, NnError> {
        self.check_input(x)?;
        let sizes = self.spec.spatial_sizes();
        let ch = self.spec.channel_counts();
        let relu = self.spec.activation == Activation::Relu;
        let mut branches: [Vec<Vec<T>>; 2] = [vec![x.prev.clone()], vec![x.cur.clone()]];
        for (b, acts) in branches.iter_mut().enumerate() {
            for i in 0..self.spec.encoder_channels.len() {
                let (wi, bi) = self.conv_layer(b, i);
                let geom = ConvGeom {
                    c_in: ch[i],
                    c_out: ch[i + 1],
                    n_in: sizes[i],
                    n_out: sizes[i + 1],
                    k: self.spec.kernel_size,
                    stride: self.spec.stride,
                    pad: self.spec.padding,
                };
                let mut out = conv_forward(&geom, &acts[i], &self.params[wi].data, &self.params[bi].data);
                if relu {
                    out.iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
                acts.push(out);
            }
        }
        let mut features = Vec::with_capacity(2 * self.spec.branch_features());
        features.extend_from_slice(branches[0].last().map(Vec::as_slice).unwrap_or(&[]));
        features.extend_from_slice(branches[1].last().map(Vec::as_slice).unwrap_or(&[]));

        let mut hidden: [Vec<T>; 2] = [Vec::new(), Vec::new()];
        let mut out = [[T::zero(); 3]; 2];
        for h in 0..2 {
            let (w0, b0) = self.fc_layer(h, 0);
            let (w1, b1) = self.fc_layer(h, 1);
            let mut hv = fc_forward(&self.params[w0].data, &self.params[b0].data, &features);
            if relu {
                hv.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            let y = fc_forward(&self.params[w1].data, &self.params[b1].data, &hv);
            out[h] = [y[0], y[1], y[2]];
            hidden[h] = hv;
        }
        Ok(Cache { branches, features, hidden, out })
    }

    /// Predicted `(t, w)`.
    pub fn forward(&self, x: &NetInput<T>) -> Result<([T; 3], [T; 3]), NnError> {
        let c = self.forward_cached(x)?;
        Ok((c.out[0], c.out[1]))
    }

    /// Predictions for every input, in order.
    pub fn forward_batch(&self, xs: &[NetInput<T>]) -> Result<Vec<([T; 3], [T; 3])>, NnError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Accumulates `scale * dL/dθ` for one sample into `grads`, given the
    /// cached forward pass and the output gradients `dy = (dL/dt, dL/dw)`.
    fn backward_into(&self, cache: &Cache<T>, dy: &[[T; 3]; 2], grads: &mut [Tensor<T>]) {
        let relu = self.spec.activation == Activation::Relu;
        let mut dfeat = vec![T::zero(); cache.features.len()];
        for h in 0..2 {
            let (w0, b0) = self.fc_layer(h, 0);
            let (w1, b1) = self.fc_layer(h, 1);
            let hv = &cache.hidden[h];
            let nh = hv.len();
            let mut dh = vec![T::zero(); nh];
            for i in 0..3 {
                let g = dy[h][i];
                grads[b1].data[i] += g;
                let row = &self.params[w1].data[i * nh..(i + 1) * nh];
                axpy(g, hv, &mut grads[w1].data[i * nh..(i + 1) * nh]);
                axpy(g, row, &mut dh);
            }
            let nf = cache.features.len();
            for j in 0..nh {
                if relu && hv[j] <= T::zero() {
                    continue;
                }
                let g = dh[j];
                if g == T::zero() {
                    continue;
                }
                grads[b0].data[j] += g;
                axpy(g, &cache.features, &mut grads[w0].data[j * nf..(j + 1) * nf]);
                axpy(g, &self.params[w0].data[j * nf..(j + 1) * nf], &mut dfeat);
            }
        }

        let sizes = self.spec.spatial_sizes();
        let ch = self.spec.channel_counts();
        let nb = self.spec.branch_features();
        for b in 0..2 {
            let acts = &cache.branches[b];
            let mut g = dfeat[b * nb..(b + 1) * nb].to_vec();
            for i in (0..self.spec.encoder_channels.len()).rev() {
                if relu {
                    for (gv, a) in g.iter_mut().zip(&acts[i + 1]) {
                        if *a <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                }
                let (wi, bi) = self.conv_layer(b, i);
                let geom = ConvGeom {
                    c_in: ch[i],
                    c_out: ch[i + 1],
                    n_in: sizes[i],
                    n_out: sizes[i + 1],
                    k: self.spec.kernel_size,
                    stride: self.spec.stride,
                    pad: self.spec.padding,
                };
                let (gw, gb) = two_mut(grads, wi, bi);
                let need_input = i > 0;
                g = conv_backward(&geom, &acts[i], &self.params[wi].data, &g, &mut gw.data, &mut gb.data, need_input);
            }
        }
    }

    /// Mean batch loss and its exact gradient with respect to every weight.
    pub fn loss_and_gradients(&self, batch: &[Sample<T>], weights: &LossWeights) -> Result<(T, Vec<Tensor<T>>), NnError> {
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let n = T::lit(batch.len().max(1) as f64);
        let mut total = T::zero();
        for s in batch {
            let cache = self.forward_cached(&s.input)?;
            let (t, w) = (cache.out[0], cache.out[1]);
            total += loss(&t, &w, &s.target_t, &s.target_w, weights);
            let two = T::lit(2.0);
            let lt = T::lit(weights.lambda2);
            let lw = T::lit(weights.lambda1);
            let dy = [
                std::array::from_fn(|i| two * lt * (t[i] - s.target_t[i]) / n),
                std::array::from_fn(|i| two * lw * (w[i] - s.target_w[i]) / n),
            ];
            self.backward_into(&cache, &dy, &mut grads);
        }
        Ok((total / n, grads))
    }

    /// Mean batch loss.
    pub fn batch_loss(&self, batch: &[Sample<T>], weights: &LossWeights) -> Result<T, NnError> {
        let mut total = T::zero();
        for s in batch {
            let (t, w) = self.forward(&s.input)?;
            total += loss(&t, &w, &s.target_t, &s.target_w, weights);
        }
        Ok(total / T::lit(batch.len().max(1) as f64))
    }

    /// ReLU on/off pattern of every activation for one sample.
    fn activation_pattern(&self, x: &NetInput<T>) -> Result<Vec<bool>, NnError> {
        let c = self.forward_cached(x)?;
        let mut bits = Vec::new();
        if self.spec.activation == Activation::Identity {
            return Ok(bits);
        }
        for acts in &c.branches {
            for a in &acts[1..] {
                bits.extend(a.iter().map(|v| *v > T::zero()));
            }
        }
        for h in &c.hidden {
            bits.extend(h.iter().map(|v| *v > T::zero()));
        }
        Ok(bits)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Activations kept by the forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    /// Per branch: input followed by every conv block output.
    pub branches: [Vec<Vec<T>>; 2],
    pub features: Vec<T>,
    pub hidden: [Vec<T>; 2],
    /// `[t, w]` predictions.
    pub out: [[T; 3]; 2],
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    n_in: usize,
    n_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output index range whose input tap `o * stride + kk - pad` is in bounds.
    #[inline]
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let reach = self.n_in + self.pad;
        let hi = if reach <= kk { 0 } else { ((reach - kk - 1) / self.stride + 1).min(self.n_out) };
        (lo, hi.max(lo))
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, input: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (ni, no, k) = (g.n_in, g.n_out, g.k);
    let mut out = vec![T::zero(); g.c_out * no * no];
    for o in 0..g.c_out {
        let plane = &mut out[o * no * no..(o + 1) * no * no];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.c_in {
            let src = &input[c * ni * ni..(c + 1) * ni * ni];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(kx);
                    let wv = w[((o * g.c_in + c) * k + ky) * k + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * ni..(iy + 1) * ni];
                        let dst = &mut plane[oy * no..(oy + 1) * no];
                        for ox in x0..x1 {
                            dst[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input`, else an empty vector.
fn conv_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    w: &[T],
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Vec<T> {
    let (ni, no, k) = (g.n_in, g.n_out, g.k);
    let mut gin = if need_input { vec![T::zero(); g.c_in * ni * ni] } else { Vec::new() };
    for o in 0..g.c_out {
        let gplane = &gout[o * no * no..(o + 1) * no * no];
        gb[o] += gplane.iter().fold(T::zero(), |a, &v| a + v);
        for c in 0..g.c_in {
            let src = &input[c * ni * ni..(c + 1) * ni * ni];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(kx);
                    let wi = ((o * g.c_in + c) * k + ky) * k + kx;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * no..(oy + 1) * no];
                        let row = &src[iy * ni..(iy + 1) * ni];
                        for ox in x0..x1 {
                            acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                        }
                        if need_input {
                            let dst = &mut gin[c * ni * ni + iy * ni..c * ni * ni + (iy + 1) * ni];
                            for ox in x0..x1 {
                                dst[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    gin
}

/// Dot product with independent partial sums so it vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |x, &y| x + y);
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn fc_forward<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n = x.len();
    b.iter().enumerate().map(|(j, &bj)| bj + dot(&w[j * n..(j + 1) * n], x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the rotation term.
    pub lambda1: f64,
    /// Weight of the translation term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

/// `lambda1 |w - w_gt|² + lambda2 |t - t_gt|²`.
pub fn loss<T: Real>(t: &[T; 3], w: &[T; 3], t_gt: &[T; 3], w_gt: &[T; 3], weights: &LossWeights) -> T {
    let sq = |a: &[T; 3], b: &[T; 3]| (0..3).fold(T::zero(), |s, i| s + (a[i] - b[i]) * (a[i] - b[i]));
    T::lit(weights.lambda1) * sq(w, w_gt) + T::lit(weights.lambda2) * sq(t, t_gt)
}

/// Preprocessed network input for one image pair, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub prev: Vec<T>,
    pub cur: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: NetInput<T>,
    pub target_t: [T; 3],
    pub target_w: [T; 3],
}

impl<T: Real> Sample<T> {
    pub fn new(input: NetInput<T>, twist: &Twist) -> Self {
        Self {
            input,
            target_t: twist.t.to_array().map(T::lit),
            target_w: twist.w.to_array().map(T::lit),
        }
    }
}

/// `(d - z_ref) / 0.1` clamped to `[-1, 1]`; invalid depth maps to 0.
pub fn normalize_depth(d: f64, z_ref: f64) -> f64 {
    if d > 0.0 {
        ((d - z_ref) / DEPTH_NORMALIZATION).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Inverse of [`normalize_depth`] for unclamped valid depths.
pub fn denormalize_depth(x: f64, z_ref: f64) -> f64 {
    z_ref + x * DEPTH_NORMALIZATION
}

/// Median valid depth of the rendered previous image, the reference distance
/// for depth normalization.
pub fn reference_depth(rendered_prev: &RgbdImage) -> Option<f64> {
    let mut v: Vec<f64> = rendered_prev.depth.data.iter().copied().filter(|d| *d > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Area weights of source pixels covering output pixel `i` when resampling
/// `n_src` pixels down (or up) to `n_dst`.
fn area_taps(n_src: usize, n_dst: usize, i: usize) -> Vec<(usize, f64)> {
    let scale = n_src as f64 / n_dst as f64;
    let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
    let mut taps = Vec::new();
    let mut s = a.floor() as usize;
    while (s as f64) < b && s < n_src {
        let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
        if overlap > 0.0 {
            taps.push((s, overlap / scale));
        }
        s += 1;
    }
    taps
}

/// Resizes an RGB-D crop to `size × size` by area averaging (invalid depth is
/// excluded from the depth average) and packs it as `[r, g, b, depth]`
/// channels with normalized depth.
pub fn preprocess<T: Real>(img: &RgbdImage, z_ref: Option<f64>, size: usize) -> Vec<T> {
    let (w, h) = (img.width(), img.height());
    let plane = size * size;
    let mut out = vec![T::zero(); 4 * plane];
    let tx: Vec<Vec<(usize, f64)>> = (0..size).map(|i| area_taps(w, size, i)).collect();
    let ty: Vec<Vec<(usize, f64)>> = (0..size).map(|i| area_taps(h, size, i)).collect();
    for (oy, ytaps) in ty.iter().enumerate() {
        for (ox, xtaps) in tx.iter().enumerate() {
            let mut rgb = [0.0; 3];
            let (mut dsum, mut dw) = (0.0, 0.0);
            for &(sy, wy) in ytaps {
                for &(sx, wx) in xtaps {
                    let wgt = wy * wx;
                    let c = img.rgb.get(sx, sy);
                    for ch in 0..3 {
                        rgb[ch] += wgt * c[ch];
                    }
                    let d = img.depth.get(sx, sy);
                    if d > 0.0 {
                        dsum += wgt * d;
                        dw += wgt;
                    }
                }
            }
            let idx = oy * size + ox;
            for ch in 0..3 {
                out[ch * plane + idx] = T::lit(rgb[ch]);
            }
            let d = if dw > 0.0 { dsum / dw } else { 0.0 };
            out[3 * plane + idx] = T::lit(z_ref.map_or(0.0, |z| normalize_depth(d, z)));
        }
    }
    out
}

/// Network input for a rendered-previous / observed-current crop pair.
pub fn prepare_input<T: Real>(rendered_prev: &RgbdImage, observed_cur: &RgbdImage, spec: &NetworkSpec) -> NetInput<T> {
    let z_ref = reference_depth(rendered_prev);
    NetInput {
        prev: preprocess(rendered_prev, z_ref, spec.input_size),
        cur: preprocess(observed_cur, z_ref, spec.input_size),
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Epochs at which the learning rate is multiplied by 0.1.
    pub lr_milestones: Vec<usize>,
    /// Parameters whose name starts with any of these prefixes are not updated.
    pub frozen: Vec<String>,
    /// Stop early once an epoch's mean loss falls below this (0 disables).
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossWeights::default(),
            lr: 1e-3,
            epochs: 300,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            lr_milestones: vec![100, 200],
            frozen: Vec::new(),
            target_loss: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(NnError::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(NnError::InvalidConfig("adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Running minimum of `loss_history`.
    pub best_loss: Vec<f64>,
    pub epochs_run: usize,
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(net: &Network<T>) -> Self {
        Self {
            m: net.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: net.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut Network<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig, trainable: &[bool]) {
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps) = (T::one(), T::lit(cfg.eps));
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::lit(lr);
        let tiny = T::min_positive_value();
        for (i, p) in net.params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (theta, &g)) in p.data.iter_mut().zip(&grads[i].data).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                // moments of idle weights decay into subnormals, which are slow
                if m[j].abs() < tiny {
                    m[j] = T::zero();
                }
                if v[j] < tiny {
                    v[j] = T::zero();
                }
                *theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Adam training with per-epoch shuffles drawn from `(seed, epoch)` streams.
pub fn train<T: Real>(net: &mut Network<T>, data: &[Sample<T>], cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    train_with_progress(net, data, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean_loss)` after every epoch.
pub fn train_with_progress<T: Real>(
    net: &mut Network<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport, NnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let trainable: Vec<bool> = net.names.iter().map(|n| !cfg.frozen.iter().any(|f| n.starts_with(f.as_str()))).collect();
    let mut adam = Adam::new(net);
    let mut report = TrainReport { loss_history: Vec::new(), best_loss: Vec::new(), epochs_run: 0 };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        if cfg.lr_milestones.contains(&epoch) {
            lr *= 0.1;
        }
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64 + 1));
        let mut epoch_loss = 0.0;
        let mut batch_buf = Vec::with_capacity(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_buf.clear();
            batch_buf.extend(chunk.iter().map(|&i| data[i].clone()));
            let (l, grads) = net.loss_and_gradients(&batch_buf, &cfg.loss)?;
            let l = l.to_f64_lossy();
            if !l.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += l * chunk.len() as f64;
            adam.update(net, &grads, lr, cfg, &trainable);
        }
        let mean = epoch_loss / data.len() as f64;
        let best = report.best_loss.last().map_or(mean, |b: &f64| b.min(mean));
        report.loss_history.push(mean);
        report.best_loss.push(best);
        report.epochs_run = epoch + 1;
        progress(epoch, mean);
        if mean < cfg.target_loss {
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    /// Largest relative error over the checked weights.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Weights skipped because a ±epsilon perturbation flips a ReLU.
    pub excluded_kinks: usize,
}

/// Compares backprop gradients against central finite differences for every
/// weight. Relative error is `|ga - gn| / max(|ga|, |gn|, 1e-8)`.
pub fn grad_check(
    net: &Network<f64>,
    batch: &[Sample<f64>],
    weights: &LossWeights,
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    let (_, grads) = net.loss_and_gradients(batch, weights)?;
    let base: Vec<Vec<bool>> = batch.iter().map(|s| net.activation_pattern(&s.input)).collect::<Result<_, _>>()?;
    let mut probe = net.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, excluded_kinks: 0 };
    for p in 0..net.params.len() {
        for j in 0..net.params[p].data.len() {
            let theta = net.params[p].data[j];
            let mut eval = |v: f64| -> Result<(f64, bool), NnError> {
                probe.params[p].data[j] = v;
                let l = probe.batch_loss(batch, weights)?;
                let mut same = true;
                for (s, b) in batch.iter().zip(&base) {
                    same &= probe.activation_pattern(&s.input)? == *b;
                }
                Ok((l, same))
            };
            let (lp, same_p) = eval(theta + epsilon)?;
            let (lm, same_m) = eval(theta - epsilon)?;
            probe.params[p].data[j] = theta;
            if !(same_p && same_m) {
                report.excluded_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * epsilon);
            let analytic = grads[p].data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

impl<T: Real> Network<T> {
    /// Serialized weights: magic, version, layer count, then per layer the
    /// name, rank, dims and little-endian f32 data; CRC32 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.names.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.shape.len() as u8);
            for d in &p.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses weights and checks them against `spec`.
    pub fn from_bytes(bytes: &[u8], spec: &NetworkSpec) -> Result<Self, NnError> {
        if bytes.len() < 8 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(NnError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(NnError::Corrupt("file truncated in header".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().map_err(|_| NnError::Corrupt("bad trailer".into()))?);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(NnError::UnsupportedVersion(version));
        }
        if crc32fast::hash(body) != stored {
            return Err(NnError::Corrupt("checksum mismatch".into()));
        }
        let count = r.u32()? as usize;
        let expected = spec.param_shapes();
        if count != expected.len() {
            return Err(NnError::SpecMismatch(format!("file has {count} layers, spec needs {}", expected.len())));
        }
        let mut net = Self::zeros(spec)?;
        for (i, (ename, eshape)) in expected.iter().enumerate() {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| NnError::Corrupt("layer name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            if name != ename || &shape != eshape {
                return Err(NnError::SpecMismatch(format!("layer {i} is {name} {shape:?}, spec needs {ename} {eshape:?}")));
            }
            for v in net.params[i].data.iter_mut() {
                let b = r.take(4)?;
                *v = T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
        }
        if r.pos != body.len() {
            return Err(NnError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, spec: &NetworkSpec) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?, spec)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Corrupt(format!("file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Learned residual estimator.
pub struct NetEstimator {
    pub net: Network<f32>,
}

impl NetEstimator {
    pub fn predict(&self, rendered_prev: &RgbdImage, observed_cur: &RgbdImage) -> Result<Twist, NnError> {
        let input = prepare_input::<f32>(rendered_prev, observed_cur, &self.net.spec);
        let (t, w) = self.net.forward(&input)?;
        let v = |a: [f32; 3]| Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64);
        Ok(Twist::new(v(t), v(w)))
    }
}

impl ResidualEstimator for NetEstimator {
    fn estimate(&self, rendered_prev: &RgbdImage, observed_cur: &RgbdImage, _: &EstimatorContext<'_>) -> Result<Estimate, TrackError> {
        self.predict(rendered_prev, observed_cur)
            .map(Estimate::from_twist)
            .map_err(|e| TrackError::Estimator(e.to_string()))
    }
}
