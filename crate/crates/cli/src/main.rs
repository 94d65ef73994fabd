//! `rpc` command-line entry point.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rpc_core::checkpoint::file_sha256;
use rpc_core::datasets::{
    augment_omniglot_rotations, dataset_dir, load_dataset, read_image_labels, Dataset, Image,
    LabeledImage, LoadOptions, Partition, SemanticTable,
};
use rpc_core::heads::{
    calibrated_stack, compute_metrics, default_calibration_grid, gzsl_scores, per_class_accuracy,
    predict, pseudo_label, select_calibration,
};
use rpc_core::protocols::evaluate_fsl;
use rpc_core::report::{
    attention_overlay, mean_confidence_interval, render_encoding, square_layout, write_episode_csv,
    MetricsReport,
};
use rpc_core::robustness::{robustness_sweep, sweep_svg, write_sweep_csv, AttackConfig};
use rpc_core::synth::{
    make_gzsl_split, split_counts, synthesize_class_attributes, SynthProvenance,
};
use rpc_core::train::{accuracy, train_task, Sample, Supervision, TrainData, TrainOptions};
use rpc_core::{CheckpointF32, Task, TensorF32, TrainConfig};

#[derive(Parser)]
#[command(
    name = "rpc",
    version,
    about = "Part-based encodings: training, evaluation, attacks and figures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory holding one sub-directory per dataset.
    #[arg(long, env = "RPC_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes per-epoch checkpoints, best.ckpt, config.cfg and train_log.csv.
    Train(TrainArgs),
    /// Nearest-class-mean episodes on the test classes.
    EvalFsl(EvalFslArgs),
    /// Generalized zero-shot evaluation with calibrated stacking.
    EvalGzsl(EvalGzslArgs),
    /// Target-domain accuracy of a domain adaptation checkpoint.
    EvalDa(EvalDaArgs),
    /// Accuracy-versus-epsilon FGSM sweep for one or more checkpoints.
    Attack(AttackArgs),
    /// Class semantic vectors from a trained encoder.
    SynthAttrs(SynthArgs),
    /// Seen/unseen class split with a per-class train fraction.
    MakeSplit(SplitArgs),
    /// Encoding heatmap and attention overlays for one image.
    Render(RenderArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set lambda1=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from this checkpoint (required for da_joint).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Target dataset whose train images are pseudo-labelled (da_joint).
    #[arg(long)]
    target: Option<String>,
    /// Semantic vectors CSV overriding the dataset's attributes (gzsl).
    #[arg(long)]
    semantics: Option<PathBuf>,
    /// Stop after this many optimization steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalFslArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalGzslArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Semantic vectors CSV overriding the dataset's attributes.
    #[arg(long)]
    semantics: Option<PathBuf>,
    /// Split directory overriding the dataset's splits.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Fixed amount subtracted from seen-class scores.
    #[arg(long, default_value_t = 0.0, conflicts_with = "gamma_search")]
    gamma: f64,
    /// Pick the calibration factor on the validation partition.
    #[arg(long)]
    gamma_search: bool,
}

#[derive(Args)]
struct EvalDaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "test")]
    partition: String,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Repeat to compare models on the same images.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "0,0.05,0.1,0.2")]
    eps: String,
    #[arg(long, default_value = "test")]
    partition: String,
    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Split directory overriding the dataset's splits.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Average only images of the train partition instead of all images.
    #[arg(long)]
    train_only: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    seen: usize,
    #[arg(long)]
    unseen: usize,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Heatmap grid as ROWSxCOLS; defaults to the squarest factorization.
    #[arg(long)]
    layout: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::EvalFsl(a) => eval_fsl(a),
        Command::EvalGzsl(a) => eval_gzsl(a),
        Command::EvalDa(a) => eval_da(a),
        Command::Attack(a) => attack(a),
        Command::SynthAttrs(a) => synth_attrs(a),
        Command::MakeSplit(a) => make_split(a),
        Command::Render(a) => render(a),
    }
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn dataset_root(c: &Common, name: &str) -> Result<PathBuf> {
    dataset_dir(name, c.data_root.as_deref())
        .ok_or_else(|| anyhow!("no --data-root given and RPC_DATA_ROOT is unset"))
}

fn load(c: &Common, name: &str, config: &TrainConfig) -> Result<Dataset> {
    let root = dataset_root(c, name)?;
    let opts = LoadOptions {
        resolution: Some(config.resolution),
        channels: Some(config.channels),
    };
    load_dataset(name, &root, opts)
        .with_context(|| format!("loading `{name}` from {}", root.display()))
}

fn load_checkpoint(path: &Path) -> Result<CheckpointF32> {
    CheckpointF32::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Config file text, then flag overrides; the last task/arch/dataset picks the preset.
fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut text = match &a.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let mut push = |k: &str, v: String| text.push_str(&format!("\n{k} = {v}"));
    if let Some(v) = &a.task {
        push("task", v.clone());
    }
    if let Some(v) = &a.arch {
        push("arch", v.clone());
    }
    if let Some(v) = &a.dataset {
        push("dataset", v.clone());
    }
    if let Some(v) = a.epochs {
        push("epochs", v.to_string());
    }
    if let Some(v) = a.seed {
        push("seed", v.to_string());
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        push(k.trim(), v.trim().to_string());
    }
    Ok(TrainConfig::parse(&text)?)
}

fn sorted_labels<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Vec<String> {
    images
        .into_iter()
        .map(|i| i.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn index_of(classes: &[String]) -> BTreeMap<&str, usize> {
    classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect()
}

/// Tensors and label indices for images whose class is in `classes`.
fn labelled(images: &[&LabeledImage], classes: &[String]) -> (Vec<TensorF32>, Vec<usize>) {
    let idx = index_of(classes);
    images
        .iter()
        .filter_map(|i| {
            idx.get(i.label.as_str())
                .map(|&y| (i.pixels.to_tensor(), y))
        })
        .unzip()
}

fn samples<'a>(xs: &'a [TensorF32], ys: &[usize]) -> Vec<Sample<'a, f32>> {
    xs.iter().zip(ys).map(|(x, &y)| (x, y)).collect()
}

fn train_images(ds: &Dataset) -> Vec<&LabeledImage> {
    let part = ds.images_in(Partition::Train);
    if part.is_empty() {
        ds.images_of_classes(&ds.split.train_classes)
    } else {
        part
    }
}

fn semantics_for(ds: &Dataset, path: Option<&Path>) -> Result<SemanticTable> {
    match path {
        Some(p) => Ok(SemanticTable::read_csv(p)?),
        None => ds.semantics.clone().ok_or_else(|| {
            anyhow!(
                "dataset `{}` has no attributes.csv; pass --semantics",
                ds.name
            )
        }),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let config = build_config(&a)?;
    let out = out_dir(&a.common)?.to_path_buf();
    let name = config
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("no dataset: pass --dataset or set `dataset` in the config"))?;
    let ds = load(&a.common, &name, &config)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        max_steps: a.max_steps,
    };

    let mut train_imgs: Vec<LabeledImage> = train_images(&ds).into_iter().cloned().collect();
    if config.task == Task::Fsl && name.eq_ignore_ascii_case("omniglot") {
        train_imgs = augment_omniglot_rotations(&train_imgs);
    }
    let refs: Vec<&LabeledImage> = train_imgs.iter().collect();
    let classes = match (&init, config.task) {
        (Some(ck), Task::DaJoint) => ck.classes.clone(),
        _ => sorted_labels(refs.iter().copied()),
    };
    let (xs, ys) = labelled(&refs, &classes);
    let val_refs = ds.images_in(Partition::Val);
    let (vx, vy) = labelled(&val_refs, &classes);
    let mut data = TrainData {
        train: samples(&xs, &ys),
        val: samples(&vx, &vy),
        classes: classes.clone(),
        semantics: None,
    };
    if config.task == Task::Gzsl {
        let table = semantics_for(&ds, a.semantics.as_deref())?;
        data.semantics = Some(table.to_matrix(&classes)?);
    }

    // joint stage: pseudo-label the target's train images with the source model
    let target_imgs: Vec<LabeledImage>;
    let target_x: Vec<TensorF32>;
    let pseudo_y: Vec<usize>;
    if config.task == Task::DaJoint {
        let src = init
            .as_ref()
            .ok_or_else(|| anyhow!("da_joint needs --init <source checkpoint>"))?;
        let target = a
            .target
            .as_deref()
            .ok_or_else(|| anyhow!("da_joint needs --target <dataset>"))?;
        let tds = load(&a.common, target, &config)?;
        target_imgs = train_images(&tds).into_iter().cloned().collect();
        target_x = target_imgs.iter().map(|i| i.pixels.to_tensor()).collect();
        let model = &src.model;
        let pl = pseudo_label(
            target_imgs.iter().map(|i| i.id.as_str()).zip(&target_x),
            |x| model.encode(x),
            &model.head,
        )?;
        pseudo_y = pl.pairs.iter().map(|(_, y)| *y).collect();
        data.train
            .extend(target_x.iter().zip(&pseudo_y).map(|(x, &y)| (x, y)));
        eprintln!("pseudo-labelled {} target images", pseudo_y.len());
    }

    let outcome = train_task(&config, &data, init.map(|c| c.model), &opts)?;
    let last = outcome.log.last();
    println!(
        "trained {} steps; final losses part {:.4} ae {:.4} task {:.4}; checkpoints in {}",
        outcome.steps,
        last.map_or(0.0, |r| r.loss_part),
        last.map_or(0.0, |r| r.loss_ae),
        last.map_or(0.0, |r| r.loss_task),
        out.display()
    );
    Ok(())
}

fn eval_fsl(a: EvalFslArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = out_dir(&a.common)?;
    let ds = load(&a.common, &a.dataset, &ck.config)?;
    // test classes when listed, else whatever sits in the test partition
    let mut pool = ds.images_of_classes(&ds.split.test_classes);
    if pool.is_empty() {
        pool = ds.images_in(Partition::Test);
    }
    if pool.is_empty() {
        bail!("dataset `{}` has no test classes or test images", a.dataset);
    }
    let accs = evaluate_fsl(&ck.model, &pool, a.way, a.shot, a.query, a.episodes, a.seed)?;
    let (mean, ci) = mean_confidence_interval(&accs);
    write_episode_csv(&out.join("episodes.csv"), &accs)?;
    let mut report = MetricsReport::new("fsl", &a.dataset);
    report.top1 = Some(mean);
    report.write(&out.join("metrics.json"))?;
    println!(
        "{}-way {}-shot over {} episodes: {:.2}% ± {:.2}",
        a.way,
        a.shot,
        a.episodes,
        100.0 * mean,
        100.0 * ci
    );
    Ok(())
}

fn eval_gzsl(a: EvalGzslArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = out_dir(&a.common)?;
    let mut ds = load(&a.common, &a.dataset, &ck.config)?;
    if let Some(dir) = &a.split {
        ds.split = rpc_core::datasets::SplitSpec::read_files(dir)?;
    }
    let table = semantics_for(&ds, a.semantics.as_deref())?;
    let seen_names = ck.classes.clone();
    let unseen_names: Vec<String> = ds
        .split
        .test_classes
        .iter()
        .filter(|c| !seen_names.contains(c))
        .cloned()
        .collect();
    let all: Vec<String> = seen_names.iter().chain(&unseen_names).cloned().collect();
    let mut sem = table.to_matrix::<f32>(&all)?;
    if ck.config.normalize_semantics {
        rpc_core::train::normalize_rows(&mut sem);
    }
    let seen: BTreeSet<usize> = (0..seen_names.len()).collect();
    let unseen: BTreeSet<usize> = (seen_names.len()..all.len()).collect();
    let score = |imgs: &[&LabeledImage]| -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let (xs, ys) = labelled(imgs, &all);
        let scores = xs
            .iter()
            .map(|x| Ok(gzsl_scores(&ck.model.forward(x)?.output, &sem)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((scores, ys))
    };
    let mut test = ds.images_in(Partition::TestSeen);
    test.extend(ds.images_in(Partition::TestUnseen));
    let (scores, labels) = score(&test)?;
    let gamma = if a.gamma_search {
        let val = ds.images_in(Partition::Val);
        if val.is_empty() {
            bail!("--gamma-search needs images in the val partition");
        }
        let (vs, vl) = score(&val)?;
        select_calibration(&vs, &vl, &seen, &unseen, &default_calibration_grid()).0
    } else {
        a.gamma
    };
    let preds: Vec<usize> = scores
        .iter()
        .map(|s| predict(&calibrated_stack(s, &seen, gamma as f32)))
        .collect();
    let m = compute_metrics(&preds, &labels, &seen, &unseen);
    let mut report = MetricsReport::new("gzsl", &a.dataset);
    report.unseen = Some(m.unseen);
    report.seen = Some(m.seen);
    report.harmonic = Some(m.harmonic);
    report.per_class = per_class_accuracy(&preds, &labels)
        .into_iter()
        .map(|(c, v)| (all[c].clone(), v))
        .collect();
    report.write(&out.join("metrics.json"))?;
    println!(
        "U {:.2} S {:.2} H {:.2} (gamma {gamma})",
        100.0 * m.unseen,
        100.0 * m.seen,
        100.0 * m.harmonic
    );
    Ok(())
}

fn eval_da(a: EvalDaArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = out_dir(&a.common)?;
    let ds = load(&a.common, &a.dataset, &ck.config)?;
    let part: Partition = a.partition.parse()?;
    let imgs = ds.images_in(part);
    let (xs, ys) = labelled(&imgs, &ck.classes);
    if xs.is_empty() {
        bail!(
            "no `{}` images of the checkpoint's classes in `{}`",
            a.partition,
            a.dataset
        );
    }
    let data = samples(&xs, &ys);
    let top1 = accuracy(&ck.model, &data, Supervision::Classes)?;
    let preds: Vec<usize> = xs
        .iter()
        .map(|x| Ok(predict(&ck.model.forward(x)?.output)))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::new("da", &a.dataset);
    report.top1 = Some(top1);
    report.per_class = per_class_accuracy(&preds, &ys)
        .into_iter()
        .map(|(c, v)| (ck.classes[c].clone(), v))
        .collect();
    report.write(&out.join("metrics.json"))?;
    println!(
        "target accuracy {:.2}% on {} images",
        100.0 * top1,
        xs.len()
    );
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let out = out_dir(&a.common)?;
    let config = AttackConfig::parse_list(&a.eps)?;
    let part: Partition = a.partition.parse()?;
    let mut curves = Vec::new();
    let mut names = BTreeSet::new();
    for path in &a.checkpoint {
        let ck = load_checkpoint(path)?;
        let ds = load(&a.common, &a.dataset, &ck.config)?;
        let mut imgs = ds.images_in(part);
        if let Some(n) = a.limit {
            imgs.truncate(n);
        }
        let (xs, ys) = labelled(&imgs, &ck.classes);
        let curve = robustness_sweep(&ck.model, &samples(&xs, &ys), &config)?;
        let mut name = ck.config.arch.to_string();
        let mut k = 2;
        while !names.insert(name.clone()) {
            name = format!("{}-{k}", ck.config.arch);
            k += 1;
        }
        for p in &curve {
            println!(
                "{name}\teps {:<6} accuracy {:.2}%",
                p.epsilon,
                100.0 * p.accuracy
            );
        }
        curves.push((name, curve));
    }
    write_sweep_csv(&out.join("sweep.csv"), &curves)?;
    std::fs::write(out.join("sweep.svg"), sweep_svg(&curves))?;
    Ok(())
}

fn synth_attrs(a: SynthArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = out_dir(&a.common)?;
    let mut ds = load(&a.common, &a.dataset, &ck.config)?;
    if let Some(dir) = &a.split {
        ds.split = rpc_core::datasets::SplitSpec::read_files(dir)?;
    }
    let keep: Vec<&LabeledImage> = if a.train_only {
        ds.images_in(Partition::Train)
    } else {
        ds.images.iter().collect()
    };
    let xs: Vec<TensorF32> = keep.iter().map(|i| i.pixels.to_tensor()).collect();
    let mut groups: BTreeMap<String, Vec<&TensorF32>> = BTreeMap::new();
    for (img, x) in keep.iter().zip(&xs) {
        groups.entry(img.label.clone()).or_default().push(x);
    }
    let table = synthesize_class_attributes(&ck.model, &groups)?;
    table.write_csv(&out.join("attributes.csv"))?;
    SynthProvenance {
        checkpoint_sha256: file_sha256(&a.checkpoint)?,
        parts: ck.config.parts,
        prototypes: ck.config.prototypes,
        seed: ck.config.seed,
        all_images: !a.train_only,
        classes: table.vectors.len(),
        dimension: table.dimension,
    }
    .write(&out.join("provenance.json"))?;
    println!(
        "{} classes, {}-dim semantics",
        table.vectors.len(),
        table.dimension
    );
    Ok(())
}

fn make_split(a: SplitArgs) -> Result<()> {
    let out = out_dir(&a.common)?;
    let root = dataset_root(&a.common, &a.dataset)?;
    let labels = read_image_labels(&root)?;
    let split = make_gzsl_split(&labels, a.seen, a.unseen, a.train_fraction, a.seed)?;
    split.write_files(out)?;
    let (tr, ts, tu) = split_counts(&split);
    println!(
        "{} seen / {} unseen classes; {tr} train, {ts} test-seen, {tu} test-unseen images",
        split.train_classes.len(),
        split.test_classes.len()
    );
    Ok(())
}

fn parse_layout(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("layout must look like 8x8, got `{s}`"))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let out = out_dir(&a.common)?;
    let img = Image::load(&a.image)?
        .with_channels(ck.config.channels)
        .resize(ck.config.resolution);
    let fwd = ck.model.forward(&img.to_tensor::<f32>())?;
    let pi = fwd
        .pi
        .as_ref()
        .ok_or_else(|| anyhow!("{} checkpoints have no encoding to render", ck.config.arch))?;
    let values: Vec<f64> = pi.as_vector().iter().map(|&v| v as f64).collect();
    let (rows, cols) = match &a.layout {
        Some(s) => parse_layout(s)?,
        None => square_layout(values.len()),
    };
    render_encoding(&values, rows, cols, &out.join("encoding.png"))?;
    if let Some(maps) = &fwd.maps {
        for m in 0..maps.parts {
            attention_overlay(&img, maps, m)?.save(out.join(format!("attention_{m}.png")))?;
        }
    }
    println!("wrote encoding.png ({rows}x{cols}) to {}", out.display());
    Ok(())
}
