//! Training configuration as a flat `key = value` text file.
//!
//! Every key has a documented default. Emitted files carry one comment line
//! per key, so a config written by [`TrainConfig::to_kv_string`] is
//! self-describing and parses back to the same value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::datasets::DatasetName;
use crate::encoder::TemperatureMode;
use crate::error::{Result, RpcError};
use crate::model::{Architecture, ModelSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[default]
    Classify,
    DaSource,
    DaJoint,
    Fsl,
    Gzsl,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::DaSource => "da_source",
            Task::DaJoint => "da_joint",
            Task::Fsl => "fsl",
            Task::Gzsl => "gzsl",
        })
    }
}

impl FromStr for Task {
    type Err = RpcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classify" => Ok(Task::Classify),
            "da_source" => Ok(Task::DaSource),
            "da_joint" => Ok(Task::DaJoint),
            "fsl" => Ok(Task::Fsl),
            "gzsl" => Ok(Task::Gzsl),
            o => Err(RpcError::Config(format!(
                "unknown task `{o}`; expected classify, da_source, da_joint, fsl or gzsl"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub arch: Architecture,
    pub dataset: Option<String>,
    pub backbone: BackboneKind,
    pub resolution: usize,
    pub channels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub zeta: f64,
    pub tau: f64,
    pub temperature_mode: TemperatureMode,
    pub eta: f64,
    pub parts: usize,
    pub prototypes: usize,
    pub hidden: usize,
    pub lr_step_a: f64,
    pub lr_step_b: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub normalize_semantics: bool,
}

/// `(key, description)` for every config key, in emission order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("task", "classify | da_source | da_joint | fsl | gzsl"),
    ("arch", "rpc | bs1 (backbone+pooling+MLP) | bs2 (attention, no prototype encoder)"),
    ("dataset", "dataset name used to pick schedules, or `none`"),
    ("backbone", "resnet34 | resnet18 | small | small:W1-W2-..."),
    ("resolution", "square input side in pixels"),
    ("channels", "input channels (1 grayscale, 3 color)"),
    ("lambda1", "weight of the diversity term in the part loss"),
    ("lambda2", "l2 penalty on the projection matrices P"),
    ("lambda3", "l2 penalty on the prototype dictionaries D"),
    ("zeta", "diversity margin"),
    ("tau", "softmax temperature of the prototype encoder"),
    ("temperature_mode", "multiply (logits scaled by tau) | divide (logits divided by tau)"),
    ("eta", "margin of the zero-shot hinge loss"),
    ("parts", "number of parts M"),
    ("prototypes", "prototypes per part K"),
    ("hidden", "hidden units of the task MLP"),
    ("lr_step_a", "learning rate of the attention generator update"),
    ("lr_step_b", "learning rate of the update of all other parameters"),
    ("lr_decay_epochs", "comma-separated epochs at which both rates are multiplied by lr_decay_factor; empty for constant"),
    ("lr_decay_factor", "multiplicative decay applied at each lr_decay_epochs entry"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per step"),
    ("seed", "RNG seed for initialization and shuffling"),
    ("optimizer", "adam (the only supported optimizer)"),
    ("adam_beta1", "first-moment decay"),
    ("adam_beta2", "second-moment decay"),
    ("adam_eps", "denominator guard"),
    ("normalize_semantics", "l2-normalize semantic vectors before the zero-shot dot product"),
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Classify)
    }
}

impl TrainConfig {
    /// Defaults for a task before any dataset-specific schedule.
    pub fn for_task(task: Task) -> Self {
        let (lambda1, resolution) = match task {
            Task::Gzsl => (5.0, 448),
            _ => (2.0, 224),
        };
        let (lr_a, lr_b) = match task {
            Task::DaJoint => (1e-6, 1e-6),
            Task::Fsl => (1e-6, 1e-4),
            _ => (1e-6, 1e-5),
        };
        let epochs = match task {
            Task::DaJoint => 10,
            Task::Fsl => 80,
            Task::Gzsl => 120,
            Task::DaSource => 40,
            Task::Classify => 60,
        };
        Self {
            task,
            arch: Architecture::Rpc,
            dataset: None,
            backbone: BackboneKind::ResNet34,
            resolution,
            channels: 3,
            lambda1,
            lambda2: 1e-3,
            lambda3: 1e-3,
            zeta: 0.02,
            tau: 100.0,
            temperature_mode: TemperatureMode::Multiply,
            eta: 1.0,
            parts: 4,
            prototypes: 16,
            hidden: crate::heads::HIDDEN_UNITS,
            lr_step_a: lr_a,
            lr_step_b: lr_b,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.5,
            epochs,
            batch_size: 32,
            seed: 0,
            optimizer: "adam".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            normalize_semantics: false,
        }
    }

    /// Task defaults plus the published schedule for `dataset`.
    pub fn preset(task: Task, arch: Architecture, dataset: DatasetName) -> Self {
        use DatasetName as D;
        let mut c = Self::for_task(task);
        c.arch = arch;
        c.dataset = Some(dataset.to_string());
        c.channels = dataset.info().channels;
        match (task, dataset) {
            (Task::DaSource, D::Usps) => c.epochs = 20,
            (Task::DaSource, _) => c.epochs = 40,
            (Task::Fsl, D::Omniglot) => c.epochs = 80,
            (Task::Fsl, D::MiniImageNet) => {
                c.epochs = 10;
                c.prototypes = 256;
                c.backbone = BackboneKind::ResNet18;
                c.lr_step_b = 1e-4;
            }
            (Task::Fsl, D::Cub) => {
                c.epochs = 100;
                c.prototypes = 256;
                c.lr_step_b = 5e-4;
            }
            (Task::Gzsl, D::Cub) => c.epochs = 120,
            (Task::Gzsl, D::Awa2) => c.epochs = 100,
            (Task::Gzsl, D::Apy) => c.epochs = 110,
            _ => {}
        }
        if task == Task::Classify {
            let cars = dataset == D::Cars;
            match arch {
                Architecture::Bs1 => {
                    c.lr_step_b = 5e-5;
                    c.epochs = if cars { 110 } else { 100 };
                    c.lr_decay_epochs = if cars { vec![70, 90] } else { vec![60, 80] };
                }
                Architecture::Bs2 => {
                    c.lr_step_b = if cars { 4e-4 } else { 2e-4 };
                    c.epochs = 60;
                    c.lr_decay_epochs = vec![20, 40];
                }
                Architecture::Rpc => {
                    // fine-tuning from a trained BS-2 backbone and attention
                    c.lr_step_b = 2e-5;
                    c.epochs = 5;
                }
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RpcError::Config(m));
        if !(self.lr_step_a > 0.0 && self.lr_step_b > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.parts == 0 || self.hidden == 0 || self.resolution == 0 || self.channels == 0 {
            return bad("parts, hidden, resolution and channels must be >= 1".into());
        }
        if self.prototypes < 2 {
            return bad("prototypes must be >= 2".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0".into());
        }
        if self.optimizer != "adam" {
            return bad(format!("unsupported optimizer `{}`", self.optimizer));
        }
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("zeta", self.zeta),
            ("eta", self.eta),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{k} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Shape of the model this config trains, given the head's output size.
    pub fn model_spec(&self, outputs: usize) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            backbone: self.backbone.clone(),
            in_channels: self.channels,
            parts: self.parts,
            prototypes: self.prototypes,
            hidden: self.hidden,
            outputs,
            temperature: self.tau,
            temperature_mode: self.temperature_mode,
        }
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        let passed = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr_decay_factor.powi(passed as i32)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().collect()
    }

    fn entries(&self) -> Vec<(String, String)> {
        let decay: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let v = [
            self.task.to_string(),
            self.arch.to_string(),
            self.dataset.clone().unwrap_or_else(|| "none".into()),
            self.backbone.to_string(),
            self.resolution.to_string(),
            self.channels.to_string(),
            fmt_f(self.lambda1),
            fmt_f(self.lambda2),
            fmt_f(self.lambda3),
            fmt_f(self.zeta),
            fmt_f(self.tau),
            self.temperature_mode.to_string(),
            fmt_f(self.eta),
            self.parts.to_string(),
            self.prototypes.to_string(),
            self.hidden.to_string(),
            fmt_f(self.lr_step_a),
            fmt_f(self.lr_step_b),
            decay.join(","),
            fmt_f(self.lr_decay_factor),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.optimizer.clone(),
            fmt_f(self.adam_beta1),
            fmt_f(self.adam_beta2),
            fmt_f(self.adam_eps),
            self.normalize_semantics.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| k.to_string())
            .zip(v)
            .collect()
    }

    /// Config file text, one documented key per entry.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for ((key, doc), (_, value)) in CONFIG_KEYS.iter().zip(self.entries()) {
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let err =
            |what: &str| RpcError::Config(format!("invalid value `{value}` for `{key}`: {what}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|e| err(&format!("{e}")))?
            };
        }
        match key.trim() {
            "task" => self.task = value.parse()?,
            "arch" => self.arch = value.parse()?,
            "dataset" => {
                self.dataset = match value {
                    "" | "none" => None,
                    v => Some(v.parse::<DatasetName>()?.to_string()),
                }
            }
            "backbone" => self.backbone = value.parse()?,
            "resolution" => self.resolution = num!(),
            "channels" => self.channels = num!(),
            "lambda1" => self.lambda1 = num!(),
            "lambda2" => self.lambda2 = num!(),
            "lambda3" => self.lambda3 = num!(),
            "zeta" => self.zeta = num!(),
            "tau" => self.tau = num!(),
            "temperature_mode" => self.temperature_mode = value.parse()?,
            "eta" => self.eta = num!(),
            "parts" => self.parts = num!(),
            "prototypes" => self.prototypes = num!(),
            "hidden" => self.hidden = num!(),
            "lr_step_a" => self.lr_step_a = num!(),
            "lr_step_b" => self.lr_step_b = num!(),
            "lr_decay_epochs" => {
                self.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e| err(&format!("{e}"))))
                    .collect::<Result<_>>()?
            }
            "lr_decay_factor" => self.lr_decay_factor = num!(),
            "epochs" => self.epochs = num!(),
            "batch_size" => self.batch_size = num!(),
            "seed" => self.seed = num!(),
            "optimizer" => self.optimizer = value.to_string(),
            "adam_beta1" => self.adam_beta1 = num!(),
            "adam_beta2" => self.adam_beta2 = num!(),
            "adam_eps" => self.adam_eps = num!(),
            "normalize_semantics" => self.normalize_semantics = num!(),
            other => return Err(RpcError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of `base`. `#` starts a comment.
    pub fn parse_onto(mut base: TrainConfig, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                RpcError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            base.apply(k, v)?;
        }
        base.validate()?;
        Ok(base)
    }

    /// Parses a config where a `task` key, if present, selects the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut task = Task::Classify;
        let mut arch = Architecture::Rpc;
        let mut dataset = None;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "task" => task = v.parse()?,
                    "arch" => arch = v.parse()?,
                    "dataset" if !matches!(v.trim(), "" | "none") => {
                        dataset = Some(v.parse::<DatasetName>()?)
                    }
                    _ => {}
                }
            }
        }
        let base = match dataset {
            Some(d) => Self::preset(task, arch, d),
            None => Self {
                arch,
                ..Self::for_task(task)
            },
        };
        Self::parse_onto(base, text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }
}

/// Shortest decimal text that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}
