//! End-to-end task protocols built from the training loop and the heads:
//! two-stage domain adaptation and episodic few-shot evaluation.

use crate::config::{Task, TrainConfig};
use crate::datasets::{sample_episode, EpisodeSpec, LabeledImage};
use crate::error::{contract, Result};
use crate::heads::{class_means, fsl_predict, pseudo_label, PseudoLabeledSet};
use crate::model::RpcModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{train_task, Sample, TrainData, TrainOptions, TrainOutcome};

pub struct DaOutcome<T> {
    pub source: TrainOutcome<T>,
    pub pseudo: PseudoLabeledSet,
    pub joint: TrainOutcome<T>,
}

/// Trains on labelled source images, pseudo-labels every target image once
/// with the source model, then retrains on the union starting from the
/// source checkpoint.
pub fn train_domain_adaptation<T: Scalar>(
    source_config: &TrainConfig,
    joint_config: &TrainConfig,
    source: &[Sample<'_, T>],
    targets: &[(&str, &Tensor<T>)],
    classes: &[String],
    source_opts: &TrainOptions,
    joint_opts: &TrainOptions,
) -> Result<DaOutcome<T>> {
    if source_config.task != Task::DaSource || joint_config.task != Task::DaJoint {
        return Err(contract(
            "domain adaptation needs a da_source and a da_joint config",
        ));
    }
    let data = TrainData {
        train: source.to_vec(),
        val: Vec::new(),
        classes: classes.to_vec(),
        semantics: None,
    };
    let stage1 = train_task(source_config, &data, None, source_opts)?;
    let model = &stage1.best.model;
    let pseudo = pseudo_label(
        targets.iter().map(|&(id, x)| (id, x)),
        |x| model.encode(x),
        &model.head,
    )?;

    let mut joint = source.to_vec();
    joint.extend(
        targets
            .iter()
            .zip(&pseudo.pairs)
            .map(|(&(_, x), &(_, y))| (x, y)),
    );
    let data = TrainData {
        train: joint,
        val: Vec::new(),
        classes: classes.to_vec(),
        semantics: None,
    };
    let stage2 = train_task(
        joint_config,
        &data,
        Some(stage1.best.model.clone()),
        joint_opts,
    )?;
    Ok(DaOutcome {
        source: stage1,
        pseudo,
        joint: stage2,
    })
}

/// Nearest-class-mean accuracy of the frozen encoder on `episodes` episodes
/// drawn from `pool`. Episode `i` is sampled with seed `seed + i`.
pub fn evaluate_fsl<T: Scalar>(
    model: &RpcModel<T>,
    pool: &[&LabeledImage],
    n_way: usize,
    n_shot: usize,
    n_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    // Encode each image at most once across episodes.
    let mut cache: Vec<Option<Vec<T>>> = vec![None; pool.len()];
    let mut encode = |i: usize| -> Result<Vec<T>> {
        if cache[i].is_none() {
            let x = pool[i].pixels.to_tensor::<T>();
            cache[i] = Some(model.encode(&x)?.as_vector().to_vec());
        }
        Ok(cache[i].clone().expect("cached"))
    };
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let spec = EpisodeSpec {
            n_query,
            ..EpisodeSpec::new(n_way, n_shot, seed.wrapping_add(e as u64))
        };
        let ep = sample_episode(&spec, pool)?;
        let support: Vec<(usize, Vec<T>)> = ep
            .support
            .iter()
            .map(|&(i, y)| Ok((y, encode(i)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(usize, &[T])> = support.iter().map(|(y, v)| (*y, v.as_slice())).collect();
        let means = class_means(&refs)?;
        let mut right = 0usize;
        for &(i, y) in &ep.query {
            if fsl_predict(&encode(i)?, &means)? == y {
                right += 1;
            }
        }
        out.push(right as f64 / ep.query.len() as f64);
    }
    Ok(out)
}
