//! Task-specific predictors operating on RPC encodings.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::RpcEncoding;
use crate::error::{contract, Result};
use crate::nn::{relu, relu_backward, Linear, Params};
use crate::scalar::{argmax, argmin, Scalar};
use crate::tensor::Tensor;

pub const HIDDEN_UNITS: usize = 32;

/// Two fully connected layers with a rectifier in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

/// Hidden activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new_relu(inputs, hidden, rng),
            output: Linear::new(hidden, outputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        let h = relu(&self.hidden.forward(x)?);
        let y = self.output.forward(&h)?;
        Ok((
            y,
            MlpCache {
                input: x.to_vec(),
                hidden: h,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<T>, gy: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let gh = self.output.backward(&cache.hidden, gy, &mut grad.output);
        let gh = relu_backward(&cache.hidden, &gh);
        self.hidden.backward(&cache.input, &gh, &mut grad.hidden)
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&format!("{prefix}.fc1"), f);
        self.output.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&format!("{prefix}.fc1"), f);
        self.output.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Class logits `V(π)`.
pub fn classify<T: Scalar>(pi: &RpcEncoding<T>, v: &Mlp<T>) -> Result<Vec<T>> {
    if pi.as_vector().len() != v.inputs() {
        return Err(contract(format!(
            "predictor expects {} inputs, encoding has {}",
            v.inputs(),
            pi.as_vector().len()
        )));
    }
    Ok(v.forward(pi.as_vector())?.0)
}

/// Prediction rule shared by every classifier: lowest index on ties.
pub fn predict<T: Scalar>(scores: &[T]) -> usize {
    argmax(scores).unwrap_or(0)
}

/// Target images paired with the classifier's argmax labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    pub pairs: Vec<(String, usize)>,
}

/// Labels every target with `argmax_y V(π(x))_y`. No confidence filtering.
pub fn pseudo_label<'a, T, I, E>(
    targets: impl IntoIterator<Item = (&'a str, &'a I)>,
    mut encoder: E,
    v: &Mlp<T>,
) -> Result<PseudoLabeledSet>
where
    T: Scalar,
    I: 'a + ?Sized,
    E: FnMut(&I) -> Result<RpcEncoding<T>>,
{
    let mut pairs = Vec::new();
    for (id, image) in targets {
        let pi = encoder(image)?;
        pairs.push((id.to_string(), predict(&classify(&pi, v)?)));
    }
    Ok(PseudoLabeledSet { pairs })
}

/// Mean encoding per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans<T> {
    pub means: BTreeMap<usize, Vec<T>>,
}

/// Averages the support encodings of every class present in `support`.
pub fn class_means<T: Scalar>(support: &[(usize, &[T])]) -> Result<ClassMeans<T>> {
    let classes: BTreeSet<usize> = support.iter().map(|(c, _)| *c).collect();
    class_means_over(&classes.into_iter().collect::<Vec<_>>(), support)
}

/// Like [`class_means`] but requires every class in `classes` to have support.
pub fn class_means_over<T: Scalar>(
    classes: &[usize],
    support: &[(usize, &[T])],
) -> Result<ClassMeans<T>> {
    let dim = support.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut sums: BTreeMap<usize, (Vec<T>, usize)> = BTreeMap::new();
    for &(c, v) in support {
        if v.len() != dim {
            return Err(contract("support encodings differ in length"));
        }
        let entry = sums.entry(c).or_insert_with(|| (vec![T::zero(); dim], 0));
        for (a, &b) in entry.0.iter_mut().zip(v) {
            *a += b;
        }
        entry.1 += 1;
    }
    let mut means = BTreeMap::new();
    for &c in classes {
        let (sum, n) = sums
            .remove(&c)
            .ok_or_else(|| contract(format!("class {c} has no support encodings")))?;
        let inv = T::one() / T::from_usize(n).expect("count");
        means.insert(c, sum.into_iter().map(|v| v * inv).collect());
    }
    Ok(ClassMeans { means })
}

/// Nearest class mean under the Euclidean distance; lowest class id on ties.
pub fn fsl_predict<T: Scalar>(query: &[T], means: &ClassMeans<T>) -> Result<usize> {
    if means.means.is_empty() {
        return Err(contract("no class means to compare against"));
    }
    let ids: Vec<usize> = means.means.keys().copied().collect();
    let dists: Vec<T> = means
        .means
        .values()
        .map(|m| {
            m.iter()
                .zip(query)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
        })
        .collect();
    Ok(ids[argmin(&dists).expect("non-empty")])
}

/// Compatibility scores `σ_yᵀ out` for every row of `semantics` (`[classes, dim]`).
pub fn gzsl_scores<T: Scalar>(output: &[T], semantics: &Tensor<T>) -> Result<Vec<T>> {
    if semantics.shape().len() != 2 || semantics.shape()[1] != output.len() {
        return Err(contract(format!(
            "semantic table {:?} does not match predictor output of length {}",
            semantics.shape(),
            output.len()
        )));
    }
    Ok((0..semantics.shape()[0])
        .map(|y| {
            semantics
                .row(y)
                .iter()
                .zip(output)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect())
}

/// `Σ_{y'≠y} max(η + (σ_{y'} − σ_y)ᵀ out, 0)` and its gradient w.r.t. `out`.
pub fn gzsl_hinge_loss_grad<T: Scalar>(
    output: &[T],
    label: usize,
    semantics: &Tensor<T>,
    margin: T,
) -> Result<(T, Vec<T>)> {
    if label >= semantics.shape().first().copied().unwrap_or(0) {
        return Err(contract(format!("no semantic vector for class {label}")));
    }
    let scores = gzsl_scores(output, semantics)?;
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); output.len()];
    let true_row = semantics.row(label);
    for (y, &s) in scores.iter().enumerate() {
        if y == label {
            continue;
        }
        let slack = margin + s - scores[label];
        if slack > T::zero() {
            loss += slack;
            for ((g, &a), &b) in grad.iter_mut().zip(semantics.row(y)).zip(true_row) {
                *g += a - b;
            }
        }
    }
    Ok((loss, grad))
}

pub fn gzsl_hinge_loss<T: Scalar>(
    output: &[T],
    label: usize,
    semantics: &Tensor<T>,
    margin: T,
) -> Result<T> {
    Ok(gzsl_hinge_loss_grad(output, label, semantics, margin)?.0)
}

/// `argmax_y σ_yᵀ V(π)`.
pub fn gzsl_predict<T: Scalar>(
    pi: &RpcEncoding<T>,
    semantics: &Tensor<T>,
    v: &Mlp<T>,
) -> Result<usize> {
    let out = classify(pi, v)?;
    Ok(predict(&gzsl_scores(&out, semantics)?))
}

/// Subtracts `factor` from the scores of seen classes.
pub fn calibrated_stack<T: Scalar>(scores: &[T], seen: &BTreeSet<usize>, factor: T) -> Vec<T> {
    scores
        .iter()
        .enumerate()
        .map(|(y, &s)| if seen.contains(&y) { s - factor } else { s })
        .collect()
}

/// Unseen, seen and harmonic-mean class-averaged top-1 accuracies, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    pub unseen: f64,
    pub seen: f64,
    pub harmonic: f64,
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Accuracy of each class present in `labels`.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        let e = counts.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect()
}

/// Mean of per-class accuracies over `classes` (those absent from `labels` are skipped).
pub fn class_average_accuracy(
    predictions: &[usize],
    labels: &[usize],
    classes: Option<&BTreeSet<usize>>,
) -> f64 {
    let per = per_class_accuracy(predictions, labels);
    let vals: Vec<f64> = per
        .iter()
        .filter(|(c, _)| classes.is_none_or(|set| set.contains(c)))
        .map(|(_, &a)| a)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    seen: &BTreeSet<usize>,
    unseen: &BTreeSet<usize>,
) -> GzslMetrics {
    let u = class_average_accuracy(predictions, labels, Some(unseen));
    let s = class_average_accuracy(predictions, labels, Some(seen));
    GzslMetrics {
        unseen: u,
        seen: s,
        harmonic: harmonic_mean(u, s),
    }
}

/// Default sweep for the calibration factor.
pub fn default_calibration_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.05).collect()
}

/// Picks the calibration factor from `grid` that maximizes the harmonic mean
/// on a validation set of score vectors. Ties keep the smallest factor.
pub fn select_calibration<T: Scalar>(
    scores: &[Vec<T>],
    labels: &[usize],
    seen: &BTreeSet<usize>,
    unseen: &BTreeSet<usize>,
    grid: &[f64],
) -> (f64, GzslMetrics) {
    let mut best: Option<(f64, GzslMetrics)> = None;
    for &g in grid {
        let preds: Vec<usize> = scores
            .iter()
            .map(|s| predict(&calibrated_stack(s, seen, T::from_f64_lossy(g))))
            .collect();
        let m = compute_metrics(&preds, labels, seen, unseen);
        if best.is_none_or(|(_, b)| m.harmonic > b.harmonic) {
            best = Some((g, m));
        }
    }
    best.unwrap_or((
        0.0,
        GzslMetrics {
            unseen: 0.0,
            seen: 0.0,
            harmonic: 0.0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sem(rows: &[&[f64]]) -> Tensor<f64> {
        let dim = rows[0].len();
        Tensor::from_vec(
            &[rows.len(), dim],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_output_layer_ties_to_class_zero() {
        let mut rng = rand::rng();
        let mut v = Mlp::<f64>::new(4, 32, 3, &mut rng);
        v.output = Linear::zeros(32, 3);
        let pi = RpcEncoding::new(1, 4, vec![0.25; 4]).unwrap();
        let logits = classify(&pi, &v).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert_eq!(predict(&logits), 0);
        assert_eq!(predict(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn one_hidden_unit_forward_by_hand() {
        let v = Mlp {
            hidden: Linear {
                weight: Tensor::from_vec(&[1, 2], vec![2.0, -1.0]).unwrap(),
                bias: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
            },
            output: Linear {
                weight: Tensor::from_vec(&[2, 1], vec![1.0, -3.0]).unwrap(),
                bias: Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(),
            },
        };
        let pi = RpcEncoding::new(1, 2, vec![0.75, 0.25]).unwrap();
        // h = relu(2*0.75 - 0.25 + 0.5) = 1.75
        assert_eq!(classify(&pi, &v).unwrap(), vec![1.75, 1.0 - 5.25]);
        let bad = RpcEncoding::new(1, 3, vec![1.0 / 3.0; 3]).unwrap();
        assert!(classify(&bad, &v).is_err());
    }

    #[test]
    fn class_means_fixtures() {
        let p1 = [0.2, 0.8];
        let p2 = [0.6, 0.4];
        let m = class_means(&[(3, &p1[..]), (3, &p2[..])]).unwrap();
        assert_eq!(m.means[&3], vec![0.4, 0.6000000000000001]);
        assert!(class_means_over(&[3, 4], &[(3, &p1[..])]).is_err());
    }

    #[test]
    fn fsl_predict_fixtures() {
        let m = class_means(&[(0, &[1.0, 0.0][..]), (1, &[0.0, 1.0][..])]).unwrap();
        assert_eq!(fsl_predict(&[0.0, 1.0], &m).unwrap(), 1);
        assert_eq!(fsl_predict(&[0.5, 0.5], &m).unwrap(), 0);
        let empty = ClassMeans::<f64> {
            means: BTreeMap::new(),
        };
        assert!(fsl_predict(&[0.5], &empty).is_err());
    }

    #[test]
    fn hinge_fixtures() {
        let single = sem(&[&[1.0]]);
        assert_eq!(gzsl_hinge_loss(&[3.0], 0, &single, 0.5).unwrap(), 0.0);
        let s = sem(&[&[1.0], &[0.2]]);
        assert_eq!(gzsl_hinge_loss(&[1.0], 0, &s, 0.5).unwrap(), 0.0);
        let s = sem(&[&[1.0], &[0.8]]);
        assert!((gzsl_hinge_loss(&[1.0], 0, &s, 0.5).unwrap() - 0.3).abs() < 1e-12);
        assert!(gzsl_hinge_loss(&[1.0], 2, &s, 0.5).is_err());
    }

    #[test]
    fn calibration_fixtures() {
        let seen: BTreeSet<usize> = [0].into();
        let s = [0.9, 0.7];
        assert_eq!(predict(&calibrated_stack(&s, &seen, 0.0)), 0);
        assert_eq!(predict(&calibrated_stack(&s, &seen, 0.3)), 1);
        assert_eq!(predict(&calibrated_stack(&[100.0, -5.0], &seen, 1e9)), 1);
    }

    #[test]
    fn metrics_are_class_averaged() {
        let seen: BTreeSet<usize> = [0].into();
        let unseen: BTreeSet<usize> = [1, 2].into();
        // class 1: 3 of 3 right, class 2: 0 of 1 right
        let m = compute_metrics(&[1, 1, 1, 0, 0], &[1, 1, 1, 2, 0], &seen, &unseen);
        assert_eq!(m.unseen, 0.5);
        assert_eq!(m.seen, 1.0);
        assert!((m.harmonic - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.4, 0.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean_of_percentages() {
        assert!((harmonic_mean(33.4, 87.5) - 5845.0 / 120.9).abs() < 1e-12);
    }
}
