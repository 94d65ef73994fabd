//! Differentiable building blocks with explicit backward passes.
//!
//! Activations are single-sample tensors. Feature maps are `[channels, height,
//! width]`, vectors are `[len]`. Every `backward` accumulates parameter
//! gradients into a gradient container of the same type as the layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Walks named parameter tensors in a stable order.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs.max(1) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[outputs, inputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// He-initialized variant for layers followed by a rectifier.
    pub fn new_relu<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[outputs, inputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.inputs() {
            return Err(contract(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let mut y = self.bias.data().to_vec();
        let n_in = self.inputs();
        T::gemm(
            self.outputs(),
            n_in,
            1,
            T::one(),
            self.weight.data(),
            n_in as isize,
            1,
            x,
            1,
            1,
            T::one(),
            &mut y,
            1,
            1,
        );
        Ok(y)
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], gy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let (n_out, n_in) = (self.outputs(), self.inputs());
        // gW += gy xᵀ
        T::gemm(
            n_out,
            1,
            n_in,
            T::one(),
            gy,
            1,
            1,
            x,
            n_in as isize,
            1,
            T::one(),
            grad.weight.data_mut(),
            n_in as isize,
            1,
        );
        for (b, &g) in grad.bias.data_mut().iter_mut().zip(gy) {
            *b += g;
        }
        let mut gx = vec![T::zero(); n_in];
        // gx = Wᵀ gy
        T::gemm(
            n_in,
            n_out,
            1,
            T::one(),
            self.weight.data(),
            1,
            n_in as isize,
            gy,
            1,
            1,
            T::zero(),
            &mut gx,
            1,
            1,
        );
        gx
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// Backward of the rectifier given its *output*.
pub fn relu_backward<T: Scalar>(out: &[T], g: &[T]) -> Vec<T> {
    out.iter()
        .zip(g)
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of softmax given its output `p` and upstream gradient `gp`.
pub fn softmax_backward<T: Scalar>(p: &[T], gp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(gp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(gp).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

/// Cross-entropy against a one-hot target; returns `(loss, dL/dlogits)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let p = softmax(logits);
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    let loss = lse - logits[label];
    let mut g = p;
    g[label] -= T::one();
    (loss, g)
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    /// `[out, in * k * k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 3],
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Tensor::randn(&[out_channels, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out_channels]),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            ..*self
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![T::zero(); c * k * k * n];
        let xd = x.data();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], in_shape: [usize; 3], oh: usize, ow: usize) -> Tensor<T> {
        let [c, h, w] = in_shape;
        let k = self.kernel;
        let n = oh * ow;
        let mut gx = Tensor::zeros(&[c, h, w]);
        let gd = gx.data_mut();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                gd[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels {
            return Err(contract(format!(
                "conv expects [{}, H, W] input, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(contract(format!(
                "input {h}x{w} too small for kernel {}",
                self.kernel
            )));
        }
        let (oh, ow) = self.output_hw(h, w);
        let cols = self.im2col(x, oh, ow);
        let n = oh * ow;
        let co = self.out_channels();
        let kk = self.weight.shape()[1];
        let mut out = vec![T::zero(); co * n];
        for (o, &b) in self.bias.data().iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            co,
            kk,
            n,
            T::one(),
            self.weight.data(),
            kk as isize,
            1,
            &cols,
            n as isize,
            1,
            T::one(),
            &mut out,
            n as isize,
            1,
        );
        let cache = ConvCache {
            cols,
            in_shape: [x.shape()[0], h, w],
            out_hw: (oh, ow),
        };
        Ok((Tensor::from_vec(&[co, oh, ow], out)?, cache))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        gy: &Tensor<T>,
        grad: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let co = self.out_channels();
        let kk = self.weight.shape()[1];
        let g = gy.data();
        // gW += gy colsᵀ
        T::gemm(
            co,
            n,
            kk,
            T::one(),
            g,
            n as isize,
            1,
            &cache.cols,
            1,
            n as isize,
            T::one(),
            grad.weight.data_mut(),
            kk as isize,
            1,
        );
        for (o, b) in grad.bias.data_mut().iter_mut().enumerate() {
            *b += g[o * n..(o + 1) * n].iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut gcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            co,
            n,
            T::one(),
            self.weight.data(),
            1,
            kk as isize,
            g,
            n as isize,
            1,
            T::zero(),
            &mut gcols,
            n as isize,
            1,
        );
        Some(self.col2im(&gcols, cache.in_shape, oh, ow))
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 3],
}

impl MaxPool2d {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let oh = (h + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let mut out = vec![T::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        let xd = x.data();
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ci * h + iy as usize) * w + ix as usize;
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            Tensor::from_vec(&[c, oh, ow], out).expect("pool shape"),
            PoolCache {
                argmax,
                in_shape: [c, h, w],
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &PoolCache, gy: &Tensor<T>) -> Tensor<T> {
        let mut gx = Tensor::zeros(&cache.in_shape);
        let gd = gx.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(gy.data()) {
            gd[idx] += g;
        }
        gx
    }
}

/// Mean over the spatial axes of a `[C, H, W]` map.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.shape()[0];
    let s = x.len() / c;
    let inv = T::one() / lit::<T>(s as f64);
    (0..c)
        .map(|ci| x.data()[ci * s..(ci + 1) * s].iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(shape: &[usize], g: &[T]) -> Tensor<T> {
    let c = shape[0];
    let s: usize = shape[1..].iter().product();
    let inv = T::one() / lit::<T>(s as f64);
    let mut out = Tensor::zeros(shape);
    for ci in 0..c {
        let v = g[ci] * inv;
        out.data_mut()[ci * s..(ci + 1) * s]
            .iter_mut()
            .for_each(|x| *x = v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(c: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let (oh, ow) = c.output_hw(h, w);
        let co = c.out_channels();
        let k = c.kernel;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.data()[o];
                    for i in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * c.stride + ki) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kj) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = c.weight.data()[o * ci * k * k + (i * k + ki) * k + kj];
                                acc += wv * x.data()[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 1), (2, 3, 7)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, pad, &mut rng);
            conv.bias = Tensor::randn(&[3], 1.0, &mut rng);
            let x = Tensor::randn(&[2, 9, 8], 1.0, &mut rng);
            let (y, _) = conv.forward(&x).unwrap();
            let expect = naive_conv(&conv, &x);
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(2, 2, 3, 2, 1, &mut rng);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let (y, cache) = conv.forward(&x).unwrap();
        let gy = Tensor::randn(y.shape(), 1.0, &mut rng);
        let mut grad = conv.zeros_like();
        let gx = conv.backward(&cache, &gy, &mut grad, true).unwrap();
        let objective = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = c.forward(x).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight.data_mut()[i] += h;
            let mut cm = conv.clone();
            cm.weight.data_mut()[i] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.weight.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1];
        let gy = [1.0, -2.0, 0.5];
        let mut grad = lin.zeros_like();
        let gx = lin.backward(&x, &gy, &mut grad);
        let obj = |l: &Linear<f64>, x: &[f64]| -> f64 {
            l.forward(x)
                .unwrap()
                .iter()
                .zip(&gy)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            assert!(((obj(&lin, &xp) - obj(&lin, &xm)) / (2.0 * h) - gx[i]).abs() < 1e-8);
        }
        for i in 0..lin.weight.len() {
            let mut lp = lin.clone();
            lp.weight.data_mut()[i] += h;
            let mut lm = lin.clone();
            lm.weight.data_mut()[i] -= h;
            let fd = (obj(&lp, &x) - obj(&lm, &x)) / (2.0 * h);
            assert!((fd - grad.weight.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let pool = MaxPool2d {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.data(), &[4.0]);
        let gx = pool.backward(&cache, &Tensor::from_vec(&[1, 1, 1], vec![1.5]).unwrap());
        assert_eq!(gx.data(), &[0.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let (loss, g) = cross_entropy(&[0.0f64, 0.0], 1);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.5, -0.5]);
    }
}
