//! Part attention: channel-weighted saliency maps, attention pooling and the
//! compactness / diversity penalties that shape the maps.
//!
//! Spatial grids are stored row-major as `[height, width]`; a cell's
//! coordinates are integer `(row, col)` indices starting at 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, RpcError};
use crate::nn::{global_avg_pool, global_avg_pool_backward, sigmoid, Linear, Params};
use crate::scalar::{argmax, lit, Scalar};
use crate::tensor::Tensor;

/// Guard for the normalization denominator.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Convolutional features `[C, H, W]` from the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures<T> {
    grid: Tensor<T>,
}

impl<T: Scalar> BackboneFeatures<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.shape().len() != 3 || grid.is_empty() {
            return Err(contract(format!(
                "feature grid must be [C, H, W], got {:?}",
                grid.shape()
            )));
        }
        if !grid.is_finite() {
            return Err(RpcError::Numeric("backbone features".into()));
        }
        Ok(Self { grid })
    }

    /// Builds features from per-cell channel vectors laid out `[H, W, C]`.
    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[T]) -> Result<Self> {
        if hwc.len() != height * width * channels {
            return Err(contract("feature buffer length does not match H*W*C"));
        }
        let mut grid = Tensor::zeros(&[channels, height, width]);
        for s in 0..height * width {
            for c in 0..channels {
                grid.data_mut()[c * height * width + s] = hwc[s * channels + c];
            }
        }
        Self::new(grid)
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }
    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }
    pub fn grid(&self) -> &Tensor<T> {
        &self.grid
    }
    pub fn into_grid(self) -> Tensor<T> {
        self.grid
    }
}

/// `M` non-negative maps over an `H x W` grid, each summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps<T> {
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn new(parts: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != parts * height * width {
            return Err(contract(format!(
                "attention buffer holds {} values, expected {}x{}x{}",
                data.len(),
                parts,
                height,
                width
            )));
        }
        Ok(Self {
            parts,
            height,
            width,
            data,
        })
    }

    pub fn zeros(parts: usize, height: usize, width: usize) -> Self {
        Self {
            parts,
            height,
            width,
            data: vec![T::zero(); parts * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn map(&self, m: usize) -> &[T] {
        let s = self.cells();
        &self.data[m * s..(m + 1) * s]
    }

    pub fn map_mut(&mut self, m: usize) -> &mut [T] {
        let s = self.cells();
        &mut self.data[m * s..(m + 1) * s]
    }

    /// Row-major peak cell of map `m` as `(row, col)`.
    pub fn peak(&self, m: usize) -> (usize, usize) {
        let idx = argmax(self.map(m)).unwrap_or(0);
        (idx / self.width, idx % self.width)
    }

    /// Mean Euclidean distance between the peaks of every pair of maps.
    pub fn mean_peak_separation(&self) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..self.parts {
            for b in a + 1..self.parts {
                let (ra, ca) = self.peak(a);
                let (rb, cb) = self.peak(b);
                let dr = ra as f64 - rb as f64;
                let dc = ca as f64 - cb as f64;
                total += (dr * dr + dc * dc).sqrt();
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

/// Pooled part features `z`, `M x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartFeatures<T> {
    pub parts: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PartFeatures<T> {
    pub fn new(parts: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != parts * channels {
            return Err(contract(format!(
                "part features hold {} values, expected {parts}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            parts,
            channels,
            data,
        })
    }

    pub fn zeros(parts: usize, channels: usize) -> Self {
        Self {
            parts,
            channels,
            data: vec![T::zero(); parts * channels],
        }
    }

    pub fn part(&self, m: usize) -> &[T] {
        &self.data[m * self.channels..(m + 1) * self.channels]
    }

    pub fn part_mut(&mut self, m: usize) -> &mut [T] {
        &mut self.data[m * self.channels..(m + 1) * self.channels]
    }
}

fn attention_logits<T: Scalar>(features: &BackboneFeatures<T>, weights: &Tensor<T>) -> Vec<T> {
    let (m, c, s) = (weights.shape()[0], features.channels(), features.cells());
    let mut logits = vec![T::zero(); m * s];
    T::gemm(
        m,
        c,
        s,
        T::one(),
        weights.data(),
        c as isize,
        1,
        features.grid().data(),
        s as isize,
        1,
        T::zero(),
        &mut logits,
        s as isize,
        1,
    );
    logits
}

/// `ln sigmoid(x)` without underflow.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_weights<T: Scalar>(features: &BackboneFeatures<T>, weights: &Tensor<T>) -> Result<()> {
    if weights.shape().len() != 2 || weights.shape()[1] != features.channels() {
        return Err(contract(format!(
            "channel weights {:?} do not match {} feature channels",
            weights.shape(),
            features.channels()
        )));
    }
    if !weights.is_finite() {
        return Err(RpcError::Numeric("attention channel weights".into()));
    }
    Ok(())
}

/// `A_m = normalize(sigmoid(Σ_c w[m,c] E_c))` for every part `m`.
///
/// `channel_weights` is `[M, C]`. Normalization divides each map by its sum,
/// floored at [`NORMALIZE_EPS`]. Sigmoids are rescaled by the map's largest
/// one first (in log space), so maps whose sigmoids all underflow still sum
/// to one.
pub fn compute_attention_maps<T: Scalar>(
    features: &BackboneFeatures<T>,
    channel_weights: &Tensor<T>,
) -> Result<AttentionMaps<T>> {
    check_weights(features, channel_weights)?;
    let parts = channel_weights.shape()[0];
    let s = features.cells();
    let mut data = attention_logits(features, channel_weights);
    let eps = lit::<T>(NORMALIZE_EPS);
    for m in 0..parts {
        let row = &mut data[m * s..(m + 1) * s];
        row.iter_mut().for_each(|v| *v = log_sigmoid(*v));
        let top = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - top).exp());
        let denom = row.iter().copied().sum::<T>().max(eps);
        row.iter_mut().for_each(|v| *v = *v / denom);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(RpcError::Numeric("attention maps".into()));
    }
    AttentionMaps::new(parts, features.height(), features.width(), data)
}

/// Backward of [`compute_attention_maps`]: returns `(dL/dweights, dL/dE)`.
pub fn attention_maps_backward<T: Scalar>(
    features: &BackboneFeatures<T>,
    channel_weights: &Tensor<T>,
    maps: &AttentionMaps<T>,
    grad_maps: &AttentionMaps<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (parts, c, s) = (maps.parts, features.channels(), features.cells());
    let logits = attention_logits(features, channel_weights);
    let mut g_logits = vec![T::zero(); parts * s];
    for m in 0..parts {
        let a = maps.map(m);
        let ga = grad_maps.map(m);
        let dot: T = a.iter().zip(ga).map(|(&x, &y)| x * y).sum();
        // sig' / sum = a (1 - sig)
        for i in 0..s {
            let sig = sigmoid(logits[m * s + i]);
            g_logits[m * s + i] = (ga[i] - dot) * a[i] * (T::one() - sig);
        }
    }
    let mut g_weights = Tensor::zeros(&[parts, c]);
    // gW = g_logits [M,S] · Eᵀ [S,C]
    T::gemm(
        parts,
        s,
        c,
        T::one(),
        &g_logits,
        s as isize,
        1,
        features.grid().data(),
        1,
        s as isize,
        T::zero(),
        g_weights.data_mut(),
        c as isize,
        1,
    );
    let mut g_features = features.grid().zeros_like();
    // gE = Wᵀ [C,M] · g_logits [M,S]
    T::gemm(
        c,
        parts,
        s,
        T::one(),
        channel_weights.data(),
        1,
        c as isize,
        &g_logits,
        s as isize,
        1,
        T::zero(),
        g_features.data_mut(),
        s as isize,
        1,
    );
    (g_weights, g_features)
}

/// `z[m,c] = Σ_{cells} A_m · E_c`.
pub fn pool_part_features<T: Scalar>(
    features: &BackboneFeatures<T>,
    maps: &AttentionMaps<T>,
) -> Result<PartFeatures<T>> {
    if maps.height != features.height() || maps.width != features.width() {
        return Err(contract(format!(
            "attention grid {}x{} does not match feature grid {}x{}",
            maps.height,
            maps.width,
            features.height(),
            features.width()
        )));
    }
    let (m, c, s) = (maps.parts, features.channels(), features.cells());
    let mut z = vec![T::zero(); m * c];
    T::gemm(
        m,
        s,
        c,
        T::one(),
        &maps.data,
        s as isize,
        1,
        features.grid().data(),
        1,
        s as isize,
        T::zero(),
        &mut z,
        c as isize,
        1,
    );
    PartFeatures::new(m, c, z)
}

/// Backward of [`pool_part_features`]: returns `(dL/dA, dL/dE)`.
pub fn pool_part_features_backward<T: Scalar>(
    features: &BackboneFeatures<T>,
    maps: &AttentionMaps<T>,
    grad_z: &PartFeatures<T>,
) -> (AttentionMaps<T>, Tensor<T>) {
    let (m, c, s) = (maps.parts, features.channels(), features.cells());
    let mut g_maps = AttentionMaps::zeros(m, maps.height, maps.width);
    T::gemm(
        m,
        c,
        s,
        T::one(),
        &grad_z.data,
        c as isize,
        1,
        features.grid().data(),
        s as isize,
        1,
        T::zero(),
        &mut g_maps.data,
        s as isize,
        1,
    );
    let mut g_features = features.grid().zeros_like();
    T::gemm(
        c,
        m,
        s,
        T::one(),
        &grad_z.data,
        1,
        c as isize,
        &maps.data,
        s as isize,
        1,
        T::zero(),
        g_features.data_mut(),
        s as isize,
        1,
    );
    (g_maps, g_features)
}

/// Squared distance of every cell from the map's peak (lowest row-major
/// index on ties). This is also the gradient of the compactness loss, with
/// the peak held fixed.
pub fn compactness_weights<T: Scalar>(map: &[T], height: usize, width: usize) -> Vec<T> {
    let peak = argmax(map).unwrap_or(0);
    let (pr, pc) = ((peak / width) as f64, (peak % width) as f64);
    (0..height * width)
        .map(|i| {
            let dr = (i / width) as f64 - pr;
            let dc = (i % width) as f64 - pc;
            lit(dr * dr + dc * dc)
        })
        .collect()
}

/// `Σ A[r,c]·((r − r*)² + (c − c*)²)` around the peak `(r*, c*)`.
pub fn compactness_loss<T: Scalar>(map: &[T], height: usize, width: usize) -> T {
    compactness_weights(map, height, width)
        .into_iter()
        .zip(map)
        .map(|(d, &a)| d * a)
        .sum()
}

/// `Σ A_m · (max_{n≠m} A_n − ζ)`; zero when there is a single part.
pub fn diversity_loss<T: Scalar>(maps: &AttentionMaps<T>, m: usize, margin: T) -> T {
    if maps.parts < 2 {
        return T::zero();
    }
    let a = maps.map(m);
    (0..maps.cells())
        .map(|i| a[i] * (max_other(maps, m, i).1 - margin))
        .sum()
}

/// `(argmax_{n≠m} A_n[i], max_{n≠m} A_n[i])`, lowest part index on ties.
fn max_other<T: Scalar>(maps: &AttentionMaps<T>, m: usize, i: usize) -> (usize, T) {
    let s = maps.cells();
    let mut best = (usize::MAX, T::neg_infinity());
    for n in (0..maps.parts).filter(|&n| n != m) {
        let v = maps.data[n * s + i];
        if best.0 == usize::MAX || v > best.1 {
            best = (n, v);
        }
    }
    best
}

/// `Σ_m L_com(A_m) + λ1 · L_div(A_m)`.
pub fn part_loss<T: Scalar>(maps: &AttentionMaps<T>, lambda1: T, margin: T) -> T {
    (0..maps.parts)
        .map(|m| {
            compactness_loss(maps.map(m), maps.height, maps.width)
                + lambda1 * diversity_loss(maps, m, margin)
        })
        .sum()
}

/// Gradient of [`part_loss`] w.r.t. every map entry. Peaks and the
/// `max_{n≠m}` selections are held at their current values.
pub fn part_loss_grad<T: Scalar>(
    maps: &AttentionMaps<T>,
    lambda1: T,
    margin: T,
) -> AttentionMaps<T> {
    let s = maps.cells();
    let mut g = AttentionMaps::zeros(maps.parts, maps.height, maps.width);
    for m in 0..maps.parts {
        let w = compactness_weights(maps.map(m), maps.height, maps.width);
        for (gv, wv) in g.map_mut(m).iter_mut().zip(w) {
            *gv += wv;
        }
        if maps.parts < 2 {
            continue;
        }
        for i in 0..s {
            let (n, mx) = max_other(maps, m, i);
            g.data[m * s + i] += lambda1 * (mx - margin);
            g.data[n * s + i] += lambda1 * maps.data[m * s + i];
        }
    }
    g
}

/// The channel-weight generator: global average pooling of the feature grid
/// followed by one fully connected layer producing `M x C` weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAttention<T> {
    pub parts: usize,
    pub channels: usize,
    pub fc: Linear<T>,
}

impl<T: Scalar> PartAttention<T> {
    pub fn new<R: Rng + ?Sized>(parts: usize, channels: usize, rng: &mut R) -> Self {
        let mut fc = Linear::new(channels, parts * channels, rng);
        // Distinct random biases give each part a different starting map.
        fc.bias = Tensor::randn(&[parts * channels], 1.0 / (channels as f64).sqrt(), rng);
        Self {
            parts,
            channels,
            fc,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            parts: self.parts,
            channels: self.channels,
            fc: self.fc.zeros_like(),
        }
    }

    /// Channel weights `[M, C]` for the given features.
    pub fn channel_weights(&self, features: &BackboneFeatures<T>) -> Result<Tensor<T>> {
        if features.channels() != self.channels {
            return Err(contract(format!(
                "attention expects {} channels, features have {}",
                self.channels,
                features.channels()
            )));
        }
        let pooled = global_avg_pool(features.grid());
        Tensor::from_vec(&[self.parts, self.channels], self.fc.forward(&pooled)?)
    }

    /// Backward from `dL/dweights`; accumulates into `grad` and returns the
    /// feature-grid gradient contributed through the pooled input.
    pub fn backward(
        &self,
        features: &BackboneFeatures<T>,
        grad_weights: &Tensor<T>,
        grad: &mut PartAttention<T>,
    ) -> Tensor<T> {
        let pooled = global_avg_pool(features.grid());
        let g_pooled = self.fc.backward(&pooled, grad_weights.data(), &mut grad.fc);
        global_avg_pool_backward(features.grid().shape(), &g_pooled)
    }
}

impl<T: Scalar> Params<T> for PartAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc.visit_mut(&format!("{prefix}.fc"), f);
    }
}
