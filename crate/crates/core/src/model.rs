//! The full network: backbone, part attention, prototype encoder and task
//! head, plus the two ablated baselines used for robustness comparisons.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_maps_backward, compute_attention_maps, part_loss, part_loss_grad, pool_part_features,
    pool_part_features_backward, AttentionMaps, BackboneFeatures, PartAttention, PartFeatures,
};
use crate::backbone::{Backbone, BackboneCache, BackboneKind};
use crate::encoder::{
    autoencoder_terms, encode_parts, encode_parts_backward, PrototypeBank, RpcEncoding,
    TemperatureMode,
};
use crate::error::{contract, Result, RpcError};
use crate::heads::{gzsl_hinge_loss_grad, Mlp, MlpCache};
use crate::nn::{cross_entropy, global_avg_pool, global_avg_pool_backward, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which components the network carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Backbone, part attention, prototype encoder, head on `π`.
    #[default]
    Rpc,
    /// Backbone, global average pooling, head. No attention, no encoder.
    Bs1,
    /// Backbone and part attention; head on concatenated part features.
    Bs2,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Rpc => "rpc",
            Architecture::Bs1 => "bs1",
            Architecture::Bs2 => "bs2",
        })
    }
}

impl FromStr for Architecture {
    type Err = RpcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rpc" => Ok(Architecture::Rpc),
            "bs1" | "bs-1" => Ok(Architecture::Bs1),
            "bs2" | "bs-2" => Ok(Architecture::Bs2),
            o => Err(RpcError::Config(format!("unknown architecture `{o}`"))),
        }
    }
}

/// Shape hyperparameters needed to build a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub backbone: BackboneKind,
    pub in_channels: usize,
    pub parts: usize,
    pub prototypes: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcModel<T> {
    pub spec: ModelSpec,
    pub backbone: Backbone<T>,
    pub attention: Option<PartAttention<T>>,
    pub bank: Option<PrototypeBank<T>>,
    pub head: Mlp<T>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub features: BackboneFeatures<T>,
    backbone_cache: BackboneCache<T>,
    pub channel_weights: Option<Tensor<T>>,
    pub maps: Option<AttentionMaps<T>>,
    pub z: Option<PartFeatures<T>>,
    pub pi: Option<RpcEncoding<T>>,
    head_cache: MlpCache<T>,
    /// Head output: class logits, or the semantic-space embedding for GZSL.
    pub output: Vec<T>,
}

/// Task supervision for one sample.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, T> {
    None,
    Class(usize),
    Semantic {
        label: usize,
        semantics: &'a Tensor<T>,
        margin: T,
    },
}

/// Loss weights and which terms participate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective<T> {
    pub lambda1: T,
    pub zeta: T,
    pub lambda2: T,
    pub lambda3: T,
    pub use_part: bool,
    pub use_ae: bool,
    pub use_task: bool,
}

impl<T: Scalar> Objective<T> {
    pub fn full(lambda1: T, zeta: T, lambda2: T, lambda3: T) -> Self {
        Self {
            lambda1,
            zeta,
            lambda2,
            lambda3,
            use_part: true,
            use_ae: true,
            use_task: true,
        }
    }

    pub fn part_only(self) -> Self {
        Self {
            use_ae: false,
            use_task: false,
            use_part: true,
            ..self
        }
    }

    pub fn task_only(self) -> Self {
        Self {
            use_ae: false,
            use_part: false,
            use_task: true,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub part: f64,
    pub ae: f64,
    pub task: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.part + self.ae + self.task
    }

    pub fn is_finite(&self) -> bool {
        self.part.is_finite() && self.ae.is_finite() && self.task.is_finite()
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.part += o.part;
        self.ae += o.ae;
        self.task += o.task;
    }

    pub fn scale(&mut self, f: f64) {
        self.part *= f;
        self.ae *= f;
        self.task *= f;
    }
}

/// What the backward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardScope {
    /// Propagate into the backbone parameters.
    pub backbone: bool,
    /// Also return the gradient with respect to the input image.
    pub input: bool,
}

impl BackwardScope {
    pub const ALL: BackwardScope = BackwardScope {
        backbone: true,
        input: false,
    };
    pub const ATTENTION_ONLY: BackwardScope = BackwardScope {
        backbone: false,
        input: false,
    };
    pub const INPUT: BackwardScope = BackwardScope {
        backbone: true,
        input: true,
    };
}

impl<T: Scalar> RpcModel<T> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.parts == 0 || spec.outputs == 0 || spec.hidden == 0 {
            return Err(contract("parts, hidden and outputs must be positive"));
        }
        let backbone = Backbone::new(spec.backbone.clone(), spec.in_channels, rng);
        let c = backbone.out_channels();
        let attention = match spec.arch {
            Architecture::Rpc | Architecture::Bs2 => Some(PartAttention::new(spec.parts, c, rng)),
            Architecture::Bs1 => None,
        };
        let bank = match spec.arch {
            Architecture::Rpc => Some(PrototypeBank::new(
                spec.parts,
                spec.prototypes,
                c,
                T::from_f64_lossy(spec.temperature),
                spec.temperature_mode,
                rng,
            )?),
            _ => None,
        };
        let head_in = match spec.arch {
            Architecture::Rpc => spec.parts * spec.prototypes,
            Architecture::Bs1 => c,
            Architecture::Bs2 => spec.parts * c,
        };
        let head = Mlp::new(head_in, spec.hidden, spec.outputs, rng);
        Ok(Self {
            spec,
            backbone,
            attention,
            bank,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            backbone: self.backbone.zeros_like(),
            attention: self.attention.as_ref().map(PartAttention::zeros_like),
            bank: self.bank.as_ref().map(PrototypeBank::zeros_like),
            head: self.head.zeros_like(),
        }
    }

    /// Replaces the task head, e.g. when moving to a new label space.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, outputs: usize, rng: &mut R) {
        self.spec.outputs = outputs;
        self.head = Mlp::new(self.head.inputs(), self.spec.hidden, outputs, rng);
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Forward<T>> {
        let (grid, backbone_cache) = self.backbone.forward(x)?;
        let features = BackboneFeatures::new(grid)?;
        let (channel_weights, maps, z) = match &self.attention {
            Some(att) => {
                let w = att.channel_weights(&features)?;
                let maps = compute_attention_maps(&features, &w)?;
                let z = pool_part_features(&features, &maps)?;
                (Some(w), Some(maps), Some(z))
            }
            None => (None, None, None),
        };
        let pi = match (&self.bank, &z) {
            (Some(bank), Some(z)) => Some(encode_parts(z, bank)?),
            _ => None,
        };
        let head_input: Vec<T> = match self.spec.arch {
            Architecture::Rpc => pi.as_ref().expect("rpc encodes").data.clone(),
            Architecture::Bs2 => z.as_ref().expect("bs2 pools").data.clone(),
            Architecture::Bs1 => global_avg_pool(features.grid()),
        };
        let (output, head_cache) = self.head.forward(&head_input)?;
        if output.iter().any(|v| !v.is_finite()) {
            return Err(RpcError::Numeric("head output".into()));
        }
        Ok(Forward {
            features,
            backbone_cache,
            channel_weights,
            maps,
            z,
            pi,
            head_cache,
            output,
        })
    }

    /// The RPC encoding `π(x)`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<RpcEncoding<T>> {
        if self.spec.arch != Architecture::Rpc {
            return Err(contract(format!(
                "{} models have no RPC encoding",
                self.spec.arch
            )));
        }
        Ok(self.forward(x)?.pi.expect("rpc encodes"))
    }

    /// Head output for an image.
    pub fn predict_scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(x)?.output)
    }

    /// Loss values of a completed forward pass, without gradients.
    pub fn losses(
        &self,
        fwd: &Forward<T>,
        target: Target<'_, T>,
        obj: &Objective<T>,
    ) -> Result<LossTerms> {
        let mut scratch = self.zeros_like();
        let (terms, _) = self.backward_impl(fwd, target, obj, None, &mut scratch, false)?;
        Ok(terms)
    }

    /// Evaluates the objective and accumulates parameter gradients into
    /// `grad`. Returns the loss terms and, if requested, `dJ/dx`.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        target: Target<'_, T>,
        obj: &Objective<T>,
        scope: BackwardScope,
        grad: &mut RpcModel<T>,
    ) -> Result<(LossTerms, Option<Tensor<T>>)> {
        self.backward_impl(fwd, target, obj, Some(scope), grad, true)
    }

    fn backward_impl(
        &self,
        fwd: &Forward<T>,
        target: Target<'_, T>,
        obj: &Objective<T>,
        scope: Option<BackwardScope>,
        grad: &mut RpcModel<T>,
        want_grads: bool,
    ) -> Result<(LossTerms, Option<Tensor<T>>)> {
        let mut terms = LossTerms::default();
        let c = fwd.features.channels();

        // task loss
        let mut g_out = vec![T::zero(); fwd.output.len()];
        if obj.use_task {
            match target {
                Target::None => {}
                Target::Class(label) => {
                    if label >= fwd.output.len() {
                        return Err(contract(format!(
                            "label {label} outside {} classes",
                            fwd.output.len()
                        )));
                    }
                    let (l, g) = cross_entropy(&fwd.output, label);
                    terms.task = l.to_f64_lossy();
                    g_out = g;
                }
                Target::Semantic {
                    label,
                    semantics,
                    margin,
                } => {
                    let (l, g) = gzsl_hinge_loss_grad(&fwd.output, label, semantics, margin)?;
                    terms.task = l.to_f64_lossy();
                    g_out = g;
                }
            }
        }
        let g_head_in = if want_grads {
            self.head.backward(&fwd.head_cache, &g_out, &mut grad.head)
        } else {
            Vec::new()
        };

        let mut g_features: Option<Tensor<T>> = None;

        match self.spec.arch {
            Architecture::Bs1 => {
                if want_grads {
                    add_gf(
                        global_avg_pool_backward(fwd.features.grid().shape(), &g_head_in),
                        &mut g_features,
                    );
                }
            }
            Architecture::Rpc | Architecture::Bs2 => {
                let maps = fwd.maps.as_ref().expect("attention maps");
                let z = fwd.z.as_ref().expect("part features");
                let mut g_z = PartFeatures::zeros(z.parts, c);
                if self.spec.arch == Architecture::Bs2 {
                    if want_grads {
                        g_z.data.copy_from_slice(&g_head_in);
                    }
                } else {
                    let bank = self.bank.as_ref().expect("bank");
                    let pi = fwd.pi.as_ref().expect("encoding");
                    let mut g_pi = if want_grads {
                        g_head_in.clone()
                    } else {
                        vec![T::zero(); pi.data.len()]
                    };
                    let bank_grad = grad.bank.as_mut().expect("bank grad");
                    if obj.use_ae {
                        let ae =
                            autoencoder_terms(z, pi, bank, obj.lambda2, obj.lambda3, bank_grad)?;
                        terms.ae = ae.loss.to_f64_lossy();
                        for (a, &b) in g_pi.iter_mut().zip(&ae.grad_pi) {
                            *a += b;
                        }
                        for (a, &b) in g_z.data.iter_mut().zip(&ae.grad_z.data) {
                            *a += b;
                        }
                    }
                    if want_grads {
                        let gz_enc = encode_parts_backward(z, bank, pi, &g_pi, bank_grad);
                        for (a, &b) in g_z.data.iter_mut().zip(&gz_enc.data) {
                            *a += b;
                        }
                    }
                }
                if obj.use_part {
                    terms.part = part_loss(maps, obj.lambda1, obj.zeta).to_f64_lossy();
                }
                if want_grads {
                    let scope = scope.expect("scope with grads");
                    let (mut g_maps, g_e_pool) =
                        pool_part_features_backward(&fwd.features, maps, &g_z);
                    if scope.backbone {
                        add_gf(g_e_pool, &mut g_features);
                    }
                    if obj.use_part {
                        let gp = part_loss_grad(maps, obj.lambda1, obj.zeta);
                        for (a, &b) in g_maps.data.iter_mut().zip(&gp.data) {
                            *a += b;
                        }
                    }
                    let w = fwd.channel_weights.as_ref().expect("weights");
                    let (g_w, g_e_att) = attention_maps_backward(&fwd.features, w, maps, &g_maps);
                    let att = self.attention.as_ref().expect("attention");
                    let g_e_g = att.backward(
                        &fwd.features,
                        &g_w,
                        grad.attention.as_mut().expect("attention grad"),
                    );
                    if scope.backbone {
                        add_gf(g_e_att, &mut g_features);
                        add_gf(g_e_g, &mut g_features);
                    }
                }
            }
        }
        if !terms.is_finite() {
            return Err(RpcError::Numeric("loss terms".into()));
        }
        let mut input_grad = None;
        if let (true, Some(scope), Some(gf)) = (want_grads, scope, g_features) {
            if scope.backbone {
                input_grad = self.backbone.backward(
                    &fwd.backbone_cache,
                    gf,
                    &mut grad.backbone,
                    scope.input,
                );
            }
        }
        Ok((terms, input_grad))
    }

    /// Gradient of the task loss with respect to the input image.
    pub fn input_gradient(&self, x: &Tensor<T>, target: Target<'_, T>) -> Result<Tensor<T>> {
        let fwd = self.forward(x)?;
        let obj = Objective {
            lambda1: T::zero(),
            zeta: T::zero(),
            lambda2: T::zero(),
            lambda3: T::zero(),
            use_part: false,
            use_ae: false,
            use_task: true,
        };
        let mut grad = self.zeros_like();
        let (_, gx) = self.backward(&fwd, target, &obj, BackwardScope::INPUT, &mut grad)?;
        gx.ok_or_else(|| RpcError::Attack("no input gradient produced".into()))
    }
}

/// Parameter prefixes; the attention generator forms its own group.
pub const ATTENTION_PREFIX: &str = "attention";

impl<T: Scalar> Params<T> for RpcModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.backbone.visit(&p("backbone"), f);
        if let Some(a) = &self.attention {
            a.visit(&p(ATTENTION_PREFIX), f);
        }
        if let Some(b) = &self.bank {
            b.visit(&p("bank"), f);
        }
        self.head.visit(&p("head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.backbone.visit_mut(&p("backbone"), f);
        if let Some(a) = &mut self.attention {
            a.visit_mut(&p(ATTENTION_PREFIX), f);
        }
        if let Some(b) = &mut self.bank {
            b.visit_mut(&p("bank"), f);
        }
        self.head.visit_mut(&p("head"), f);
    }
}

fn add_gf<T: Scalar>(g: Tensor<T>, acc: &mut Option<Tensor<T>>) {
    match acc {
        Some(a) => a.add_assign(&g),
        None => *acc = Some(g),
    }
}
