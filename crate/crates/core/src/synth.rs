//! Synthetic class semantics from a trained encoder, zero-shot splits for
//! datasets without attributes, and an end-to-end zero-shot benchmark.
//!
//! The encoder is trained on seen classes only. Unseen-class images are used
//! solely to average their encodings into attribute vectors; they never reach
//! training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Task, TrainConfig};
use crate::datasets::{LabeledImage, Partition, SemanticTable, SplitSpec};
use crate::error::{contract, Result};
use crate::heads::{
    calibrated_stack, compute_metrics, gzsl_scores, predict, select_calibration, GzslMetrics,
};
use crate::model::RpcModel;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::train::{normalize_rows, train_task, Sample, TrainData, TrainOptions};

/// `σ_y` = mean of the concatenated encodings of class `y`'s images.
pub fn synthesize_class_attributes<T: Scalar>(
    model: &RpcModel<T>,
    classes: &BTreeMap<String, Vec<&Tensor<T>>>,
) -> Result<SemanticTable> {
    let mut vectors = BTreeMap::new();
    for (name, images) in classes {
        if images.is_empty() {
            return Err(contract(format!("class `{name}` has no images")));
        }
        let mut sum: Vec<f64> = Vec::new();
        for x in images {
            let pi = model.encode(x)?;
            if sum.is_empty() {
                sum = vec![0.0; pi.data.len()];
            }
            for (a, &b) in sum.iter_mut().zip(&pi.data) {
                *a += b.to_f64_lossy();
            }
        }
        let n = images.len() as f64;
        vectors.insert(name.clone(), sum.into_iter().map(|v| v / n).collect());
    }
    SemanticTable::new(vectors)
}

/// Groups images by class. With `all_images` false only the given partitions
/// contribute.
pub fn group_by_class<'a>(
    images: &'a [LabeledImage],
    split: &SplitSpec,
    all_images: bool,
    partitions: &[Partition],
) -> BTreeMap<String, Vec<&'a LabeledImage>> {
    let mut out: BTreeMap<String, Vec<&LabeledImage>> = BTreeMap::new();
    for img in images {
        let keep = all_images
            || split
                .per_image_assignment
                .get(&img.id)
                .is_some_and(|p| partitions.contains(p));
        if keep {
            out.entry(img.label.clone()).or_default().push(img);
        }
    }
    out
}

/// Seen/unseen class split with a per-class train fraction for seen classes.
/// `labels` holds `(image_id, class_id)` pairs.
pub fn make_gzsl_split(
    labels: &[(String, String)],
    n_seen: usize,
    n_unseen: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(contract("train fraction must lie strictly between 0 and 1"));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for (id, class) in labels {
        if !ids.insert(id.as_str()) {
            return Err(contract(format!("duplicate image id `{id}`")));
        }
        by_class
            .entry(class.as_str())
            .or_default()
            .push(id.as_str());
    }
    if n_seen + n_unseen != by_class.len() {
        return Err(contract(format!(
            "{n_seen} seen + {n_unseen} unseen != {} classes",
            by_class.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<&str> = by_class.keys().copied().collect();
    classes.shuffle(&mut rng);
    let mut seen: Vec<String> = classes[..n_seen].iter().map(|s| s.to_string()).collect();
    let mut unseen: Vec<String> = classes[n_seen..].iter().map(|s| s.to_string()).collect();
    seen.sort();
    unseen.sort();
    let mut assignment = BTreeMap::new();
    for class in &seen {
        let mut members = by_class[class.as_str()].clone();
        members.sort_unstable();
        members.shuffle(&mut rng);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(contract(format!(
                "fraction {train_fraction} leaves class `{class}` ({} images) with an empty partition",
                members.len()
            )));
        }
        for (i, id) in members.iter().enumerate() {
            let p = if i < n_train {
                Partition::Train
            } else {
                Partition::TestSeen
            };
            assignment.insert(id.to_string(), p);
        }
    }
    for class in &unseen {
        for id in &by_class[class.as_str()] {
            assignment.insert(id.to_string(), Partition::TestUnseen);
        }
    }
    Ok(SplitSpec {
        train_classes: seen,
        val_classes: Vec::new(),
        test_classes: unseen,
        per_image_assignment: assignment,
    })
}

/// Counts `(train, test_seen, test_unseen)` images.
pub fn split_counts(split: &SplitSpec) -> (usize, usize, usize) {
    let c = |p| split.images_in(p).len();
    (
        c(Partition::Train),
        c(Partition::TestSeen),
        c(Partition::TestUnseen),
    )
}

/// What was used to synthesize an attribute table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub checkpoint_sha256: String,
    pub parts: usize,
    pub prototypes: usize,
    pub seed: u64,
    pub all_images: bool,
    pub classes: usize,
    pub dimension: usize,
}

impl SynthProvenance {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Anything that can score a zero-shot split given class semantics.
pub trait GzslEvaluator {
    fn evaluate(&mut self, semantics: &SemanticTable, split: &SplitSpec) -> Result<GzslMetrics>;
}

/// Runs `evaluator` after checking that `semantics` covers the split.
pub fn benchmark_with_synthetic(
    semantics: &SemanticTable,
    split: &SplitSpec,
    evaluator: &mut dyn GzslEvaluator,
) -> Result<GzslMetrics> {
    let missing: Vec<&String> = split
        .train_classes
        .iter()
        .chain(&split.test_classes)
        .filter(|c| !semantics.vectors.contains_key(*c))
        .collect();
    if !missing.is_empty() {
        return Err(contract(format!("semantics lack classes {missing:?}")));
    }
    evaluator.evaluate(semantics, split)
}

/// How the seen-class score offset is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Calibration {
    Fixed(f64),
    /// Best harmonic mean over the grid, measured on the test scores.
    SearchOnTest(Vec<f64>),
}

/// Trains the zero-shot head on the split's seen training images and
/// evaluates on test-seen and test-unseen.
pub struct HeadEvaluator<'a, T> {
    pub images: &'a [LabeledImage],
    pub config: TrainConfig,
    /// Continue from this model instead of a fresh one.
    pub init: Option<RpcModel<T>>,
    pub calibration: Calibration,
    /// Calibration factor actually used by the last evaluation.
    pub chosen_calibration: Option<f64>,
    pub trained: Option<RpcModel<T>>,
}

impl<'a, T: Scalar> HeadEvaluator<'a, T> {
    pub fn new(images: &'a [LabeledImage], config: TrainConfig) -> Self {
        Self {
            images,
            config,
            init: None,
            calibration: Calibration::Fixed(0.0),
            chosen_calibration: None,
            trained: None,
        }
    }
}

impl<T: Scalar> GzslEvaluator for HeadEvaluator<'_, T> {
    fn evaluate(&mut self, semantics: &SemanticTable, split: &SplitSpec) -> Result<GzslMetrics> {
        let seen_names = &split.train_classes;
        let all_names: Vec<String> = seen_names
            .iter()
            .chain(&split.test_classes)
            .cloned()
            .collect();
        let index: BTreeMap<&str, usize> = all_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut all_sem: Tensor<T> = semantics.to_matrix(&all_names)?;
        if self.config.normalize_semantics {
            normalize_rows(&mut all_sem);
        }
        let dim = semantics.dimension;
        if let Some(m) = &self.init {
            if m.spec.outputs != dim {
                return Err(contract(format!(
                    "head output has {} entries, semantics have {dim}",
                    m.spec.outputs
                )));
            }
        }
        let seen_sem = Tensor::from_vec(
            &[seen_names.len(), dim],
            all_sem.data()[..seen_names.len() * dim].to_vec(),
        )?;

        let tensors: Vec<(Tensor<T>, usize, Option<Partition>)> = self
            .images
            .iter()
            .filter_map(|img| {
                let &label = index.get(img.label.as_str())?;
                Some((
                    img.pixels.to_tensor(),
                    label,
                    split.per_image_assignment.get(&img.id).copied(),
                ))
            })
            .collect();
        let train: Vec<Sample<'_, T>> = tensors
            .iter()
            .filter(|(_, l, p)| *p == Some(Partition::Train) && *l < seen_names.len())
            .map(|(x, l, _)| (x, *l))
            .collect();
        let mut config = self.config.clone();
        config.task = Task::Gzsl;
        // rows are already normalized above when requested
        config.normalize_semantics = false;
        let data = TrainData {
            train,
            val: Vec::new(),
            classes: seen_names.clone(),
            semantics: Some(seen_sem),
        };
        let model = train_task(&config, &data, self.init.clone(), &TrainOptions::default())?
            .last
            .model;

        let seen: BTreeSet<usize> = (0..seen_names.len()).collect();
        let unseen: BTreeSet<usize> = (seen_names.len()..all_names.len()).collect();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (x, l, p) in &tensors {
            if matches!(p, Some(Partition::TestSeen | Partition::TestUnseen)) {
                scores.push(gzsl_scores(&model.forward(x)?.output, &all_sem)?);
                labels.push(*l);
            }
        }
        let (gamma, metrics) = match &self.calibration {
            Calibration::Fixed(g) => {
                let preds: Vec<usize> = scores
                    .iter()
                    .map(|s| predict(&calibrated_stack(s, &seen, lit::<T>(*g))))
                    .collect();
                (*g, compute_metrics(&preds, &labels, &seen, &unseen))
            }
            Calibration::SearchOnTest(grid) => {
                select_calibration(&scores, &labels, &seen, &unseen, grid)
            }
        };
        self.chosen_calibration = Some(gamma);
        self.trained = Some(model);
        Ok(metrics)
    }
}
