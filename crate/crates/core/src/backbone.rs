//! Convolutional feature extractor producing the `[C, H, W]` feature grid.
//!
//! Two families are available: a small plain CNN for desk-scale runs and
//! residual networks with the 18/34-layer basic-block layouts, truncated
//! after the last residual stage. The residual variant carries no batch
//! normalization; the second convolution of each block starts at a reduced
//! scale so the identity path dominates early in training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, RpcError};
use crate::nn::{relu_backward, Conv2d, ConvCache, MaxPool2d, Params, PoolCache};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// 3x3 conv + ReLU stages; every stage but the last halves the resolution.
    SmallCnn {
        widths: Vec<usize>,
    },
    ResNet18,
    ResNet34,
}

impl Default for BackboneKind {
    fn default() -> Self {
        BackboneKind::ResNet34
    }
}

impl BackboneKind {
    pub fn small() -> Self {
        BackboneKind::SmallCnn {
            widths: vec![16, 32, 32],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneKind::SmallCnn { widths } => *widths.last().unwrap_or(&1),
            BackboneKind::ResNet18 | BackboneKind::ResNet34 => 512,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneKind::SmallCnn { widths } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "small:{}", w.join("-"))
            }
            BackboneKind::ResNet18 => write!(f, "resnet18"),
            BackboneKind::ResNet34 => write!(f, "resnet34"),
        }
    }
}

impl FromStr for BackboneKind {
    type Err = RpcError;

    /// Accepts `resnet18`, `resnet34`, `small` or `small:16-32-32`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "resnet18" => Ok(BackboneKind::ResNet18),
            "resnet34" => Ok(BackboneKind::ResNet34),
            "small" => Ok(BackboneKind::small()),
            other => {
                let widths = other
                    .strip_prefix("small:")
                    .ok_or_else(|| RpcError::Config(format!("unknown backbone `{other}`")))?;
                let widths = widths
                    .split('-')
                    .map(|w| w.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| RpcError::Config(format!("bad backbone widths `{other}`: {e}")))?;
                if widths.is_empty() || widths.contains(&0) {
                    return Err(RpcError::Config(format!("bad backbone widths `{other}`")));
                }
                Ok(BackboneKind::SmallCnn { widths })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool(MaxPool2d),
    Block(BasicBlock<T>),
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Conv(ConvCache<T>),
    Relu(Tensor<T>),
    MaxPool(PoolCache),
    Block {
        c1: ConvCache<T>,
        h1: Tensor<T>,
        c2: ConvCache<T>,
        sc: Option<ConvCache<T>>,
        out: Tensor<T>,
    },
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    layers: Vec<LayerCache<T>>,
    input_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone<T> {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(kind: BackboneKind, in_channels: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        match &kind {
            BackboneKind::SmallCnn { widths } => {
                let mut c_in = in_channels;
                for (i, &w) in widths.iter().enumerate() {
                    layers.push(Layer::Conv(Conv2d::new(c_in, w, 3, 1, 1, rng)));
                    layers.push(Layer::Relu);
                    if i + 1 < widths.len() {
                        layers.push(Layer::MaxPool(MaxPool2d {
                            kernel: 2,
                            stride: 2,
                            padding: 0,
                        }));
                    }
                    c_in = w;
                }
            }
            BackboneKind::ResNet18 | BackboneKind::ResNet34 => {
                let blocks: [usize; 4] = if kind == BackboneKind::ResNet18 {
                    [2, 2, 2, 2]
                } else {
                    [3, 4, 6, 3]
                };
                layers.push(Layer::Conv(Conv2d::new(in_channels, 64, 7, 2, 3, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool(MaxPool2d {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }));
                let mut c_in = 64;
                for (stage, &n) in blocks.iter().enumerate() {
                    let width = 64 << stage;
                    for b in 0..n {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let mut conv2 = Conv2d::new(width, width, 3, 1, 1, rng);
                        conv2.weight.scale(lit(0.1));
                        let shortcut = (stride != 1 || c_in != width)
                            .then(|| Conv2d::new(c_in, width, 1, stride, 0, rng));
                        layers.push(Layer::Block(BasicBlock {
                            conv1: Conv2d::new(c_in, width, 3, stride, 1, rng),
                            conv2,
                            shortcut,
                        }));
                        c_in = width;
                    }
                }
            }
        }
        Self {
            kind,
            in_channels,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kind.out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(c.zeros_like()),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool(p) => Layer::MaxPool(*p),
                Layer::Block(b) => Layer::Block(BasicBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                    shortcut: b.shortcut.as_ref().map(|s| s.zeros_like()),
                }),
            })
            .collect();
        Self {
            kind: self.kind.clone(),
            in_channels: self.in_channels,
            layers,
        }
    }

    /// Maps an image `[channels, height, width]` to its feature grid `[C, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        if x.shape().len() != 3 || x.shape()[0] != self.in_channels {
            return Err(contract(format!(
                "backbone expects [{}, H, W] input, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward(&h)?;
                    caches.push(LayerCache::Conv(cache));
                    h = y;
                }
                Layer::Relu => {
                    h.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                    caches.push(LayerCache::Relu(h.clone()));
                }
                Layer::MaxPool(p) => {
                    let (y, cache) = p.forward(&h);
                    caches.push(LayerCache::MaxPool(cache));
                    h = y;
                }
                Layer::Block(b) => {
                    let (mut h1, c1) = b.conv1.forward(&h)?;
                    h1.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                    let (mut out, c2) = b.conv2.forward(&h1)?;
                    let sc = match &b.shortcut {
                        Some(s) => {
                            let (y, cache) = s.forward(&h)?;
                            out.add_assign(&y);
                            Some(cache)
                        }
                        None => {
                            out.add_assign(&h);
                            None
                        }
                    };
                    out.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = v.max(T::zero()));
                    caches.push(LayerCache::Block {
                        c1,
                        h1,
                        c2,
                        sc,
                        out: out.clone(),
                    });
                    h = out;
                }
            }
        }
        Ok((
            h,
            BackboneCache {
                layers: caches,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    /// Backpropagates `g` (gradient w.r.t. the feature grid). Parameter
    /// gradients accumulate into `grad`; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        g: Tensor<T>,
        grad: &mut Backbone<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut g = g;
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let first = i == 0;
            let gl = &mut grad.layers[i];
            g = match (layer, lc, gl) {
                (Layer::Conv(c), LayerCache::Conv(cc), Layer::Conv(gc)) => {
                    match c.backward(cc, &g, gc, need_input_grad || !first) {
                        Some(gx) => gx,
                        None => return None,
                    }
                }
                (Layer::Relu, LayerCache::Relu(out), _) => {
                    let data = relu_backward(out.data(), g.data());
                    Tensor::from_vec(out.shape(), data).expect("relu shape")
                }
                (Layer::MaxPool(p), LayerCache::MaxPool(pc), _) => p.backward(pc, &g),
                (
                    Layer::Block(b),
                    LayerCache::Block {
                        c1,
                        h1,
                        c2,
                        sc,
                        out,
                    },
                    Layer::Block(gb),
                ) => {
                    let g_out = Tensor::from_vec(out.shape(), relu_backward(out.data(), g.data()))
                        .expect("block shape");
                    let g_h1 = b
                        .conv2
                        .backward(c2, &g_out, &mut gb.conv2, true)
                        .expect("grad");
                    let g_h1 = Tensor::from_vec(h1.shape(), relu_backward(h1.data(), g_h1.data()))
                        .expect("block shape");
                    let mut gx = b
                        .conv1
                        .backward(c1, &g_h1, &mut gb.conv1, true)
                        .expect("grad");
                    match (&b.shortcut, sc, gb.shortcut.as_mut()) {
                        (Some(s), Some(scc), Some(gs)) => {
                            gx.add_assign(&s.backward(scc, &g_out, gs, true).expect("grad"));
                        }
                        _ => gx.add_assign(&g_out),
                    }
                    gx
                }
                _ => unreachable!("cache does not match layer"),
            };
        }
        debug_assert_eq!(g.shape(), cache.input_shape.as_slice());
        need_input_grad.then_some(g)
    }
}

impl<T: Scalar> Params<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => c.visit(&format!("{prefix}.{i}"), f),
                Layer::Block(b) => {
                    b.conv1.visit(&format!("{prefix}.{i}.conv1"), f);
                    b.conv2.visit(&format!("{prefix}.{i}.conv2"), f);
                    if let Some(s) = &b.shortcut {
                        s.visit(&format!("{prefix}.{i}.shortcut"), f);
                    }
                }
                Layer::Relu | Layer::MaxPool(_) => {}
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv(c) => c.visit_mut(&format!("{prefix}.{i}"), f),
                Layer::Block(b) => {
                    b.conv1.visit_mut(&format!("{prefix}.{i}.conv1"), f);
                    b.conv2.visit_mut(&format!("{prefix}.{i}.conv2"), f);
                    if let Some(s) = &mut b.shortcut {
                        s.visit_mut(&format!("{prefix}.{i}.shortcut"), f);
                    }
                }
                Layer::Relu | Layer::MaxPool(_) => {}
            }
        }
    }
}
