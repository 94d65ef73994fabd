//! Alternating optimization and the epoch loop.
//!
//! Step A updates only the attention generator on the part loss. Step B
//! freezes it and updates everything else on part + autoencoder + task loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Task, TrainConfig};
use crate::error::{Result, RpcError};
use crate::heads::{gzsl_scores, predict};
use crate::model::{BackwardScope, LossTerms, Objective, RpcModel, Target, ATTENTION_PREFIX};
use crate::nn::Params;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with per-parameter step counts, so the two
/// alternating groups keep independent bias corrections.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (u64, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.adam_beta1, c.adam_beta2, c.adam_eps)
    }

    /// Updates every parameter whose name satisfies `select`.
    pub fn step(
        &mut self,
        model: &mut RpcModel<T>,
        grad: &RpcModel<T>,
        lr: f64,
        select: &dyn Fn(&str) -> bool,
    ) {
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        grad.visit("", &mut |n, t| {
            if select(&n) {
                grads.insert(n, t.clone());
            }
        });
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let eps = lit::<T>(self.eps);
        let one = T::one();
        model.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let (t, m, v) = self
                .state
                .entry(name)
                .or_insert_with(|| (0, vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let step = lit::<T>(lr * c2.sqrt() / c1);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        });
    }
}

/// How labels are turned into per-sample targets.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a, T> {
    Classes,
    /// Labels index rows of `semantics`; hinge loss with margin `eta`.
    Semantic {
        semantics: &'a Tensor<T>,
        eta: T,
    },
}

impl<'a, T: Scalar> Supervision<'a, T> {
    pub fn target(&self, label: usize) -> Target<'a, T> {
        match *self {
            Supervision::Classes => Target::Class(label),
            Supervision::Semantic { semantics, eta } => Target::Semantic {
                label,
                semantics,
                margin: eta,
            },
        }
    }

    /// Predicted label index for a head output.
    pub fn predict(&self, output: &[T]) -> Result<usize> {
        Ok(match self {
            Supervision::Classes => predict(output),
            Supervision::Semantic { semantics, .. } => predict(&gzsl_scores(output, semantics)?),
        })
    }
}

pub type Sample<'a, T> = (&'a Tensor<T>, usize);

/// Mean losses over a batch; gradients (also averaged) accumulate into `grad`.
pub fn batch_gradients<T: Scalar>(
    model: &RpcModel<T>,
    batch: &[Sample<'_, T>],
    sup: Supervision<'_, T>,
    obj: &Objective<T>,
    scope: BackwardScope,
    grad: &mut RpcModel<T>,
) -> Result<LossTerms> {
    let mut total = LossTerms::default();
    for &(x, label) in batch {
        let fwd = model.forward(x)?;
        let (terms, _) = model.backward(&fwd, sup.target(label), obj, scope, grad)?;
        total.add(&terms);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    total.scale(inv);
    let inv_t = lit::<T>(inv);
    grad.visit_mut("", &mut |_, t| t.scale(inv_t));
    Ok(total)
}

/// Mean losses over a batch without gradients.
pub fn evaluate_losses<T: Scalar>(
    model: &RpcModel<T>,
    batch: &[Sample<'_, T>],
    sup: Supervision<'_, T>,
    obj: &Objective<T>,
) -> Result<LossTerms> {
    let mut total = LossTerms::default();
    for &(x, label) in batch {
        let fwd = model.forward(x)?;
        total.add(&model.losses(&fwd, sup.target(label), obj)?);
    }
    total.scale(1.0 / batch.len().max(1) as f64);
    Ok(total)
}

/// Loss values of one alternating step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Part loss seen by step A (before its update).
    pub part_step_a: f64,
    /// Terms seen by step B (after step A, before step B's update).
    pub step_b: LossTerms,
}

pub fn objective_from<T: Scalar>(c: &TrainConfig) -> Objective<T> {
    Objective::full(lit(c.lambda1), lit(c.zeta), lit(c.lambda2), lit(c.lambda3))
}

fn is_attention(name: &str) -> bool {
    name == ATTENTION_PREFIX || name.starts_with(&format!("{ATTENTION_PREFIX}."))
}

fn diverged(step: usize, e: RpcError) -> RpcError {
    match e {
        RpcError::Numeric(what) => RpcError::Diverged { step, what },
        other => other,
    }
}

/// One alternating (A, B) update. On a non-finite loss or parameter the
/// model is left at its last finite state and [`RpcError::Diverged`] is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn alternating_train_step<T: Scalar>(
    model: &mut RpcModel<T>,
    opt: &mut Adam<T>,
    batch: &[Sample<'_, T>],
    sup: Supervision<'_, T>,
    config: &TrainConfig,
    lr_a: f64,
    lr_b: f64,
    step: usize,
) -> Result<StepLosses> {
    let obj = objective_from::<T>(config);
    let before = model.clone();
    let mut out = StepLosses::default();

    if model.attention.is_some() {
        let mut grad = model.zeros_like();
        let terms = batch_gradients(
            model,
            batch,
            sup,
            &obj.part_only(),
            BackwardScope::ATTENTION_ONLY,
            &mut grad,
        )
        .map_err(|e| diverged(step, e))?;
        out.part_step_a = terms.part;
        opt.step(model, &grad, lr_a, &is_attention);
    }

    let mut grad = model.zeros_like();
    let terms = match batch_gradients(model, batch, sup, &obj, BackwardScope::ALL, &mut grad) {
        Ok(t) => t,
        Err(e) => {
            *model = before;
            return Err(diverged(step, e));
        }
    };
    out.step_b = terms;
    opt.step(model, &grad, lr_b, &|n| !is_attention(n));

    let mut finite = true;
    model.visit("", &mut |_, t| finite &= t.is_finite());
    if !finite {
        *model = before;
        return Err(RpcError::Diverged {
            step,
            what: "parameters".into(),
        });
    }
    Ok(out)
}

/// Fraction of samples whose predicted label matches.
pub fn accuracy<T: Scalar>(
    model: &RpcModel<T>,
    samples: &[Sample<'_, T>],
    sup: Supervision<'_, T>,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut right = 0usize;
    for &(x, label) in samples {
        if sup.predict(&model.forward(x)?.output)? == label {
            right += 1;
        }
    }
    Ok(right as f64 / samples.len() as f64)
}

/// Scales each row of a `[classes, dim]` table to unit length (zero rows stay zero).
pub fn normalize_rows<T: Scalar>(table: &mut Tensor<T>) {
    let rows = table.shape()[0];
    for r in 0..rows {
        let row = table.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_part: f64,
    pub loss_ae: f64,
    pub loss_task: f64,
    pub lr: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Training inputs. Labels index `classes` (and the rows of `semantics`
/// for the zero-shot task).
pub struct TrainData<'a, T> {
    pub train: Vec<Sample<'a, T>>,
    pub val: Vec<Sample<'a, T>>,
    pub classes: Vec<String>,
    pub semantics: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `epoch_NNN.ckpt`, `best.ckpt`, `config.cfg` and `train_log.csv` go.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps (the current epoch still ends with a checkpoint).
    pub max_steps: Option<usize>,
}

pub struct TrainOutcome<T> {
    pub last: Checkpoint<T>,
    pub best: Checkpoint<T>,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

/// Runs the epoch loop. `init` continues from an existing model (joint DA
/// stage, fine-tuning from a baseline); otherwise the model is freshly built
/// from the config seed.
pub fn train_task<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_, T>,
    init: Option<RpcModel<T>>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(RpcError::Contract("no training samples".into()));
    }
    let mut semantics = data.semantics.clone();
    if config.task == Task::Gzsl && semantics.is_none() {
        return Err(RpcError::Contract(
            "zero-shot training needs semantic vectors".into(),
        ));
    }
    if config.normalize_semantics {
        if let Some(s) = semantics.as_mut() {
            normalize_rows(s);
        }
    }
    let outputs = match &semantics {
        Some(s) if config.task == Task::Gzsl => s.shape()[1],
        _ => data.classes.len(),
    };
    let sup = match &semantics {
        Some(s) if config.task == Task::Gzsl => Supervision::Semantic {
            semantics: s,
            eta: lit(config.eta),
        },
        _ => Supervision::Classes,
    };
    if let Some(&(_, bad)) = data
        .train
        .iter()
        .chain(&data.val)
        .find(|(_, l)| *l >= data.classes.len())
    {
        return Err(RpcError::Contract(format!(
            "label {bad} outside {} classes",
            data.classes.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match init {
        Some(m) => {
            if m.spec.outputs != outputs {
                return Err(RpcError::Contract(format!(
                    "initial model has {} outputs, task needs {outputs}",
                    m.spec.outputs
                )));
            }
            m
        }
        None => RpcModel::new(config.model_spec(outputs), &mut rng)?,
    };
    let mut opt = Adam::from_config(config);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        config.save(&dir.join("config.cfg"))?;
    }

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<Checkpoint<T>> = None;
    let mut last = None;
    'epochs: for epoch in 0..config.epochs {
        let scale = config.lr_scale(epoch);
        let (lr_a, lr_b) = (config.lr_step_a * scale, config.lr_step_b * scale);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_, T>> = chunk.iter().map(|&i| data.train[i]).collect();
            let losses = alternating_train_step(
                &mut model, &mut opt, &batch, sup, config, lr_a, lr_b, step,
            )?;
            log.push(LogRow {
                step,
                loss_part: losses.step_b.part,
                loss_ae: losses.step_b.ae,
                loss_task: losses.step_b.task,
                lr: lr_b,
            });
            step += 1;
            if opts.max_steps.is_some_and(|m| step >= m) {
                last = Some(finish_epoch(
                    &model, config, epoch, &rng, data, sup, opts, &mut best,
                )?);
                break 'epochs;
            }
        }
        last = Some(finish_epoch(
            &model, config, epoch, &rng, data, sup, opts, &mut best,
        )?);
    }
    let last = last.expect("at least one epoch");
    let best = best.unwrap_or_else(|| last.clone());
    if let Some(dir) = &opts.out_dir {
        best.save(&dir.join("best.ckpt"))?;
        write_log_csv(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainOutcome {
        last,
        best,
        log,
        steps: step,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch<T: Scalar>(
    model: &RpcModel<T>,
    config: &TrainConfig,
    epoch: usize,
    rng: &ChaCha8Rng,
    data: &TrainData<'_, T>,
    sup: Supervision<'_, T>,
    opts: &TrainOptions,
    best: &mut Option<Checkpoint<T>>,
) -> Result<Checkpoint<T>> {
    let metric = if data.val.is_empty() {
        None
    } else {
        Some(accuracy(model, &data.val, sup)?)
    };
    let ck = Checkpoint {
        model: model.clone(),
        config: config.clone(),
        epoch: epoch + 1,
        rng: RngState::capture(rng),
        classes: data.classes.clone(),
        metric,
    };
    if let Some(dir) = &opts.out_dir {
        ck.save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
    }
    // Strictly better only, so ties keep the earlier epoch.
    let improves = match (metric, best.as_ref().and_then(|b| b.metric)) {
        (Some(m), Some(b)) => m > b,
        (Some(_), None) => true,
        (None, _) => false,
    };
    if improves {
        *best = Some(ck.clone());
    }
    Ok(ck)
}
