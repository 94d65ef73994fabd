//! Acceptance criteria 1 to 8.
//!
//! Each test prints exactly one `C<n> PASS|FAIL ...` line. Run the suite with
//!
//! ```text
//! cargo test -p rpc-core --test acceptance -- --nocapture --test-threads 1
//! ```
//!
//! A FAIL line does not always fail the test: checks that cannot be evaluated
//! on this machine (datasets absent from `RPC_DATA_ROOT`) or that are known
//! to be unattainable are reported as FAIL and left to dedicated ignored
//! tests. Every check that can be evaluated is also asserted.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpc_core::attention::*;
use rpc_core::backbone::BackboneKind;
use rpc_core::config::{Task, TrainConfig};
use rpc_core::datasets::*;
use rpc_core::encoder::*;
use rpc_core::heads::*;
use rpc_core::model::{Architecture, Objective, RpcModel, Target};
use rpc_core::nn::Params;
use rpc_core::protocols::{evaluate_fsl, train_domain_adaptation};
use rpc_core::report::{mean_confidence_interval, MetricsReport};
use rpc_core::robustness::*;
use rpc_core::synth::*;
use rpc_core::synthetic::*;
use rpc_core::train::*;
use rpc_core::Tensor;

/// Named sub-checks of one criterion.
#[derive(Default)]
struct Checks {
    items: Vec<(String, bool, String)>,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.items.push((name.to_string(), ok, detail.into()));
    }

    fn failed(&self) -> Vec<&(String, bool, String)> {
        self.items.iter().filter(|c| !c.1).collect()
    }

    /// Prints the criterion line and returns whether every check passed.
    fn report(&self, id: &str, title: &str) -> bool {
        let bad = self.failed();
        let verdict = if bad.is_empty() { "PASS" } else { "FAIL" };
        let detail = if bad.is_empty() {
            format!("{} checks", self.items.len())
        } else {
            bad.iter()
                .map(|(n, _, d)| format!("{n}: {d}"))
                .collect::<Vec<_>>()
                .join("; ")
        };
        println!("{id} {verdict} {title} ({detail})");
        bad.is_empty()
    }

    /// Panics listing failures other than the named ones.
    fn assert_except(&self, allowed: &[&str]) {
        let bad: Vec<_> = self
            .failed()
            .into_iter()
            .filter(|c| !allowed.contains(&c.0.as_str()))
            .collect();
        assert!(bad.is_empty(), "failed checks: {bad:?}");
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn rel_close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4)
}

fn desk_config(task: Task, arch: Architecture) -> TrainConfig {
    let mut c = TrainConfig::for_task(task);
    c.arch = arch;
    c.backbone = BackboneKind::small();
    c.channels = 1;
    c.resolution = 28;
    c
}

fn label_index(images: &[LabeledImage], classes: &[String]) -> Vec<usize> {
    let idx: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    images.iter().map(|s| idx[s.label.as_str()]).collect()
}

fn tensors<T: rpc_core::Scalar>(images: &[LabeledImage]) -> Vec<Tensor<T>> {
    images.iter().map(|s| s.pixels.to_tensor()).collect()
}

fn data_root(names: &[&str]) -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("RPC_DATA_ROOT")?);
    names
        .iter()
        .all(|n| root.join(n).join("metadata.csv").exists())
        .then_some(root)
}

// ---------------------------------------------------------------- C1

const PUBLISHED_H_CHECK: &str = "published harmonic mean";

fn property_suite() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // attention simplex, including saturating weights
    let mut simplex_ok = true;
    for scale in [0.0, 1.0, 50.0, 1e4] {
        let f = BackboneFeatures::new(Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng)).unwrap();
        let w = Tensor::randn(&[3, 3], scale, &mut rng);
        let maps = compute_attention_maps(&f, &w).unwrap();
        for m in 0..3 {
            let s: f64 = maps.map(m).iter().sum();
            simplex_ok &= close(s, 1.0, 1e-9) && maps.map(m).iter().all(|&v| v >= 0.0);
        }
    }
    c.check(
        "attention simplex",
        simplex_ok,
        "maps must be non-negative and sum to 1",
    );
    let f = BackboneFeatures::new(Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng)).unwrap();
    let maps = compute_attention_maps(&f, &Tensor::zeros(&[2, 2])).unwrap();
    c.check(
        "zero weights give uniform maps",
        maps.data.iter().all(|&v| close(v, 1.0 / 9.0, 1e-15)),
        "",
    );

    // compactness
    let delta = AttentionMaps::new(1, 2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    c.check(
        "L_com delta",
        compactness_loss(delta.map(0), 2, 2) == 0.0,
        "",
    );
    let uni = compactness_loss(&[0.25f64; 4], 2, 2);
    c.check(
        "L_com uniform 2x2",
        close(uni, 1.0, 1e-12),
        format!("{uni}"),
    );
    let two = compactness_loss(&[0.5f64, 0.5, 0.0, 0.0], 2, 2);
    c.check("L_com two-point", close(two, 0.5, 1e-12), format!("{two}"));

    // diversity
    let disjoint =
        AttentionMaps::new(2, 2, 2, vec![0.5f64, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
    let d = diversity_loss(&disjoint, 0, 0.02);
    c.check("L_div disjoint", close(d, -0.02, 1e-12), format!("{d}"));
    let same = AttentionMaps::new(2, 2, 2, vec![0.25f64; 8]).unwrap();
    let d = diversity_loss(&same, 0, 0.02);
    c.check(
        "L_div identical uniform",
        close(d, 0.23, 1e-12),
        format!("{d}"),
    );
    let one = AttentionMaps::new(1, 2, 2, vec![0.25f64; 4]).unwrap();
    c.check(
        "L_div single part",
        diversity_loss(&one, 0, 0.02) == 0.0,
        "",
    );
    let deltas =
        AttentionMaps::new(2, 2, 2, vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let p = part_loss(&deltas, 2.0, 0.02);
    c.check(
        "part loss on distinct deltas",
        close(p, -0.08, 1e-12),
        format!("{p}"),
    );

    // encoding simplex
    let mut enc_ok = true;
    for tau in [1.0, 100.0, 1e4] {
        let bank = PrototypeBank::from_parts(
            Tensor::<f64>::randn(&[3, 5, 4], 1.0, &mut rng),
            Tensor::randn(&[3, 5, 4], 1.0, &mut rng),
            tau,
            TemperatureMode::Multiply,
        )
        .unwrap();
        let z = PartFeatures::new(3, 4, (0..12).map(|_| rng.random_range(-5.0..5.0)).collect())
            .unwrap();
        let pi = encode_parts(&z, &bank).unwrap();
        for m in 0..3 {
            enc_ok &= close(pi.row(m).iter().sum::<f64>(), 1.0, 1e-6)
                && pi.row(m).iter().all(|&v| v >= 0.0);
        }
    }
    c.check("encoding row simplex", enc_ok, "");

    // hinge
    let sem = Tensor::from_vec(&[2, 1], vec![1.0f64, 0.2]).unwrap();
    let h = gzsl_hinge_loss(&[1.0], 0, &sem, 0.5).unwrap();
    c.check("hinge zero", h == 0.0, format!("{h}"));
    let sem = Tensor::from_vec(&[2, 1], vec![1.0f64, 0.8]).unwrap();
    let h = gzsl_hinge_loss(&[1.0], 0, &sem, 0.5).unwrap();
    c.check("hinge 0.3", close(h, 0.3, 1e-12), format!("{h}"));

    // calibrated stacking identity
    let mut cs_ok = true;
    for _ in 0..200 {
        let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seen: BTreeSet<usize> = (0..6).filter(|_| rng.random_bool(0.5)).collect();
        cs_ok &= predict(&calibrated_stack(&s, &seen, 0.0)) == predict(&s);
    }
    c.check("calibrated stacking at 0", cs_ok, "");

    // FGSM contracts
    let x = Tensor::<f64>::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap();
    let g = Tensor::from_vec(&[3], vec![2.0, -3.0, 0.0]).unwrap();
    let y = fgsm_from_gradient(&x, &g, 0.1, (0.0, 1.0)).unwrap();
    let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    c.check(
        "FGSM sign",
        close(d[0], 0.1, 1e-12) && close(d[1], -0.1, 1e-12) && d[2] == 0.0,
        format!("{d:?}"),
    );
    let edge = Tensor::<f64>::from_vec(&[2], vec![0.97, 0.02]).unwrap();
    let y = fgsm_from_gradient(
        &edge,
        &Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(),
        0.1,
        (0.0, 1.0),
    )
    .unwrap();
    c.check(
        "FGSM clip",
        y.data() == [1.0, 0.0],
        format!("{:?}", y.data()),
    );
    c.check(
        "FGSM eps 0",
        fgsm_from_gradient(&x, &g, 0.0, (0.0, 1.0)).unwrap() == x,
        "",
    );

    // harmonic mean
    c.check(
        "harmonic identity",
        close(harmonic_mean(0.4, 0.4), 0.4, 1e-15),
        "",
    );
    let h = harmonic_mean(33.4, 87.5);
    c.check(
        PUBLISHED_H_CHECK,
        close(h, 48.4, 0.05),
        format!(
            "2*33.4*87.5/120.9 = {h:.4}, |{h:.4} - 48.4| = {:.4} > 0.05",
            (h - 48.4).abs()
        ),
    );
    c
}

#[test]
fn c1_property_suite() {
    let c = property_suite();
    c.report("C1", "property suite");
    c.assert_except(&[PUBLISHED_H_CHECK]);
}

/// The published row is rounded: 2*33.4*87.5/120.9 = 48.346, which is 0.054
/// from 48.4.
#[test]
#[ignore = "unattainable from the rounded published inputs"]
fn c1_published_harmonic_mean_within_tolerance() {
    property_suite().assert_except(&[]);
}

// ---------------------------------------------------------------- C2

fn gradient_checks() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-6;
    let f = BackboneFeatures::new(Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng)).unwrap();
    let w = Tensor::<f64>::randn(&[2, 3], 0.5, &mut rng);
    let zeta = 0.02;

    // L_com alone is part_loss with lambda1 = 0; L_div is the lambda1 slope.
    let com = |w: &Tensor<f64>| {
        let maps = compute_attention_maps(&f, w).unwrap();
        (0..2)
            .map(|m| compactness_loss(maps.map(m), 4, 4))
            .sum::<f64>()
    };
    let div = |w: &Tensor<f64>| {
        let maps = compute_attention_maps(&f, w).unwrap();
        (0..2).map(|m| diversity_loss(&maps, m, zeta)).sum::<f64>()
    };
    let maps = compute_attention_maps(&f, &w).unwrap();
    let g_com_maps = part_loss_grad(&maps, 0.0, zeta);
    let g_both = part_loss_grad(&maps, 1.0, zeta);
    let mut g_div_maps = g_both.clone();
    for (d, s) in g_div_maps.data.iter_mut().zip(&g_com_maps.data) {
        *d -= s;
    }
    let (g_com, _) = attention_maps_backward(&f, &w, &maps, &g_com_maps);
    let (g_div, _) = attention_maps_backward(&f, &w, &maps, &g_div_maps);
    let mut worst = (0.0f64, 0.0f64);
    let (mut ok_com, mut ok_div) = (true, true);
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp.data_mut()[i] += h;
        let mut wm = w.clone();
        wm.data_mut()[i] -= h;
        let fd_com = (com(&wp) - com(&wm)) / (2.0 * h);
        let fd_div = (div(&wp) - div(&wm)) / (2.0 * h);
        ok_com &= rel_close(fd_com, g_com.data()[i]);
        ok_div &= rel_close(fd_div, g_div.data()[i]);
        worst.0 = worst.0.max((fd_com - g_com.data()[i]).abs());
        worst.1 = worst.1.max((fd_div - g_div.data()[i]).abs());
    }
    c.check(
        "L_com wrt channel weights",
        ok_com,
        format!("max abs err {:.2e}", worst.0),
    );
    c.check(
        "L_div wrt channel weights",
        ok_div,
        format!("max abs err {:.2e}", worst.1),
    );

    // autoencoder loss wrt P, D and z
    let bank = PrototypeBank::from_parts(
        Tensor::<f64>::randn(&[2, 3, 4], 0.5, &mut rng),
        Tensor::randn(&[2, 3, 4], 0.5, &mut rng),
        2.0,
        TemperatureMode::Multiply,
    )
    .unwrap();
    let z = PartFeatures::new(2, 4, Tensor::<f64>::randn(&[8], 1.0, &mut rng).into_vec()).unwrap();
    let (l2, l3) = (1e-3, 1e-3);
    let mut gbank = bank.zeros_like();
    let (_, gz) = autoencoder_loss_grad(&z, &bank, l2, l3, &mut gbank).unwrap();
    let mut ae_ok = true;
    let mut grads = Vec::new();
    gbank.visit("", &mut |_, t| grads.push(t.clone()));
    let mut count = 0usize;
    bank.visit("", &mut |_, _| count += 1);
    for p in 0..count {
        for i in 0..grads[p].len() {
            let bump = |delta: f64| {
                let mut b = bank.clone();
                let mut k = 0;
                b.visit_mut("", &mut |_, t| {
                    if k == p {
                        t.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                autoencoder_loss(&z, &b, l2, l3).unwrap()
            };
            ae_ok &= rel_close((bump(h) - bump(-h)) / (2.0 * h), grads[p].data()[i]);
        }
    }
    for i in 0..z.data.len() {
        let mut zp = z.clone();
        zp.data[i] += h;
        let mut zm = z.clone();
        zm.data[i] -= h;
        let fd = (autoencoder_loss(&zp, &bank, l2, l3).unwrap()
            - autoencoder_loss(&zm, &bank, l2, l3).unwrap())
            / (2.0 * h);
        ae_ok &= rel_close(fd, gz.data[i]);
    }
    c.check("autoencoder loss wrt P, D, z", ae_ok, "");

    // FGSM input gradient: cross-entropy of a full RPC model
    let mut cfg = desk_config(Task::Classify, Architecture::Rpc);
    cfg.backbone = BackboneKind::SmallCnn { widths: vec![3, 4] };
    cfg.parts = 2;
    cfg.prototypes = 3;
    cfg.tau = 2.0;
    let model = RpcModel::<f64>::new(cfg.model_spec(3), &mut rng).unwrap();
    let x = Tensor::<f64>::randn(&[1, 8, 8], 0.5, &mut rng);
    let g = input_gradient(&model, &x, 2).unwrap();
    let obj = Objective::full(0.0, 0.0, 0.0, 0.0).task_only();
    let ce = |x: &Tensor<f64>| {
        let f = model.forward(x).unwrap();
        model.losses(&f, Target::Class(2), &obj).unwrap().total()
    };
    let mut in_ok = true;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        in_ok &= rel_close((ce(&xp) - ce(&xm)) / (2.0 * h), g.data()[i]);
    }
    c.check("FGSM input gradient", in_ok, "");
    c
}

#[test]
fn c2_gradient_checks() {
    let c = gradient_checks();
    c.report("C2", "finite-difference gradient checks");
    c.assert_except(&[]);
}

// ---------------------------------------------------------------- C3

fn oracle_checks() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // nearest class mean over 100 random episode fixtures
    let mut fsl_ok = true;
    let mut means_ok = true;
    for _ in 0..100 {
        let (way, shot, dim) = (
            rng.random_range(2..6),
            rng.random_range(1..6),
            rng.random_range(2..10),
        );
        let support: Vec<(usize, Vec<f64>)> = (0..way)
            .flat_map(|y| (0..shot).map(move |_| y))
            .map(|y| (y, (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let refs: Vec<(usize, &[f64])> = support.iter().map(|(y, v)| (*y, v.as_slice())).collect();
        let means = class_means(&refs).unwrap();
        for y in 0..way {
            let members: Vec<&Vec<f64>> = support
                .iter()
                .filter(|(l, _)| *l == y)
                .map(|(_, v)| v)
                .collect();
            for d in 0..dim {
                let oracle = members.iter().map(|v| v[d]).sum::<f64>() / members.len() as f64;
                means_ok &= close(means.means[&y][d], oracle, 1e-12);
            }
        }
        for _ in 0..5 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut best = (f64::INFINITY, 0);
            for y in 0..way {
                let d: f64 = q
                    .iter()
                    .zip(&means.means[&y])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, y);
                }
            }
            fsl_ok &= fsl_predict(&q, &means).unwrap() == best.1;
        }
    }
    c.check(
        "fsl_predict vs distance oracle",
        fsl_ok,
        "100 episodes x 5 queries",
    );
    c.check("class_means vs sum/count", means_ok, "");

    // gzsl_predict vs dot products
    let mut gz_ok = true;
    for _ in 0..50 {
        let (m, k, classes, dim) = (2, 3, rng.random_range(2..8), 4);
        let v = Mlp::<f64>::new(m * k, 5, dim, &mut rng);
        let mut pi = Vec::new();
        for _ in 0..m {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            pi.extend(row.into_iter().map(|r| r / s));
        }
        let pi = RpcEncoding::new(m, k, pi).unwrap();
        let sem = Tensor::<f64>::randn(&[classes, dim], 1.0, &mut rng);
        let out = v.forward(pi.as_vector()).unwrap().0;
        let mut best = (f64::NEG_INFINITY, 0);
        for y in 0..classes {
            let s: f64 = (0..dim).map(|d| sem.data()[y * dim + d] * out[d]).sum();
            if s > best.0 {
                best = (s, y);
            }
        }
        gz_ok &= gzsl_predict(&pi, &sem, &v).unwrap() == best.1;
    }
    c.check("gzsl_predict vs dot-product oracle", gz_ok, "50 fixtures");

    // synthesized attributes and pseudo labels on a tiny model
    let mut cfg = desk_config(Task::Classify, Architecture::Rpc);
    cfg.backbone = BackboneKind::SmallCnn { widths: vec![3, 4] };
    cfg.parts = 2;
    cfg.prototypes = 3;
    cfg.tau = 3.0;
    let model = RpcModel::<f64>::new(cfg.model_spec(3), &mut rng).unwrap();
    let xs: Vec<Tensor<f64>> = (0..8)
        .map(|_| Tensor::randn(&[1, 8, 8], 0.5, &mut rng))
        .collect();
    let mut groups: BTreeMap<String, Vec<&Tensor<f64>>> = BTreeMap::new();
    groups.insert("a".into(), xs[..5].iter().collect());
    groups.insert("b".into(), xs[5..].iter().collect());
    let table = synthesize_class_attributes(&model, &groups).unwrap();
    let mut syn_ok = true;
    for (name, members) in &groups {
        let encs: Vec<Vec<f64>> = members
            .iter()
            .map(|x| model.forward(x).unwrap().pi.unwrap().data)
            .collect();
        for d in 0..6 {
            let oracle = encs.iter().map(|e| e[d]).sum::<f64>() / encs.len() as f64;
            syn_ok &= close(table.vectors[name][d], oracle, 1e-12);
        }
    }
    c.check("synthesize_class_attributes vs sum/count", syn_ok, "");

    let ids: Vec<String> = (0..xs.len()).map(|i| format!("t{i}")).collect();
    let targets: Vec<(&str, &Tensor<f64>)> = ids.iter().map(String::as_str).zip(&xs).collect();
    let labels = pseudo_label(targets.iter().copied(), |x| model.encode(x), &model.head).unwrap();
    let pl_ok = labels.pairs.len() == xs.len()
        && labels
            .pairs
            .iter()
            .zip(&xs)
            .zip(&ids)
            .all(|(((id, y), x), want)| {
                let out = model.forward(x).unwrap().output;
                let mut best = 0;
                for (i, &v) in out.iter().enumerate() {
                    if v > out[best] {
                        best = i;
                    }
                }
                id == want && *y == best
            });
    c.check("pseudo_label vs forward-pass oracle", pl_ok, "");
    c
}

#[test]
fn c3_oracle_equivalence() {
    let c = oracle_checks();
    c.report("C3", "oracle equivalence");
    c.assert_except(&[]);
}

// ---------------------------------------------------------------- C4

/// 20-image two-part toy, full batch, 200 alternating steps.
fn overfit_config(lambda1: f64, seed: u64) -> TrainConfig {
    let mut c = desk_config(Task::Classify, Architecture::Rpc);
    c.tau = 100.0;
    c.lr_step_a = 3e-3;
    c.lr_step_b = 3e-3;
    c.parts = 2;
    c.lambda1 = lambda1;
    c.seed = seed;
    c.batch_size = 20;
    c.epochs = 200;
    c
}

struct OverfitRun {
    accuracy: f64,
    part_before: f64,
    part_after: f64,
    sep_before: f64,
    sep_after: f64,
}

fn mean_separation(model: &RpcModel<f32>, xs: &[Sample<'_, f32>]) -> f64 {
    xs.iter()
        .map(|(x, _)| {
            model
                .forward(x)
                .unwrap()
                .maps
                .unwrap()
                .mean_peak_separation()
        })
        .sum::<f64>()
        / xs.len() as f64
}

fn overfit_run(lambda1: f64, seed: u64) -> OverfitRun {
    let data = two_part_toy(10, 28, seed + 7);
    let classes = vec![class_id(0), class_id(1)];
    let xs = tensors::<f32>(&data);
    let ys = label_index(&data, &classes);
    let train: Vec<Sample<'_, f32>> = xs.iter().zip(&ys).map(|(x, &y)| (x, y)).collect();
    let cfg = overfit_config(lambda1, seed);
    // train_task draws its initial model first from the same seeded stream
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = RpcModel::<f32>::new(cfg.model_spec(2), &mut rng).unwrap();
    let td = TrainData {
        train: train.clone(),
        val: Vec::new(),
        classes,
        semantics: None,
    };
    let out = train_task(&cfg, &td, None, &TrainOptions::default()).unwrap();
    assert_eq!(out.steps, 200);
    let trained = &out.last.model;
    let obj = objective_from::<f32>(&cfg);
    let part = |m: &RpcModel<f32>| {
        evaluate_losses(m, &train, Supervision::Classes, &obj)
            .unwrap()
            .part
    };
    OverfitRun {
        accuracy: accuracy(trained, &train, Supervision::Classes).unwrap(),
        part_before: part(&init),
        part_after: part(trained),
        sep_before: mean_separation(&init, &train),
        sep_after: mean_separation(trained, &train),
    }
}

#[test]
fn c4_overfit_sanity() {
    let seeds: Vec<u64> = (0..8).collect();
    let full: Vec<OverfitRun> = seeds.iter().map(|&s| overfit_run(10.0, s)).collect();
    let no_div: Vec<OverfitRun> = seeds.iter().map(|&s| overfit_run(0.0, s)).collect();
    let mean =
        |v: &[OverfitRun], f: fn(&OverfitRun) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let mut c = Checks::default();
    let accs: Vec<f64> = full.iter().map(|r| r.accuracy).collect();
    c.check(
        "100% training accuracy",
        accs.iter().all(|&a| a == 1.0),
        format!("per-seed {accs:?}"),
    );
    c.check(
        "part loss decreases",
        full.iter().all(|r| r.part_after < r.part_before),
        format!(
            "mean {:.3} -> {:.3}",
            mean(&full, |r| r.part_before),
            mean(&full, |r| r.part_after)
        ),
    );
    let (s0, s1, s_nodiv) = (
        mean(&full, |r| r.sep_before),
        mean(&full, |r| r.sep_after),
        mean(&no_div, |r| r.sep_after),
    );
    c.check(
        "peak separation increases",
        s1 > s0,
        format!("{s0:.3} -> {s1:.3} cells"),
    );
    c.check(
        "diversity term separates peaks",
        s1 > s_nodiv,
        format!("with L_div {s1:.3} vs without {s_nodiv:.3}"),
    );
    c.report("C4", "overfit sanity on the 20-image two-part toy, 8 seeds");
    c.assert_except(&[]);
}

// ---------------------------------------------------------------- C5

fn glyph_samples(images: &[LabeledImage], classes: &[String]) -> (Vec<Tensor<f32>>, Vec<usize>) {
    (tensors(images), label_index(images, classes))
}

fn da_configs(lr: f64, epochs: usize, seed: u64) -> (TrainConfig, TrainConfig) {
    let mk = |task, epochs, lr| {
        let mut c = desk_config(task, Architecture::Rpc);
        c.tau = 100.0;
        c.lr_step_a = lr;
        c.lr_step_b = lr;
        c.batch_size = 20;
        c.epochs = epochs;
        c.seed = seed;
        c
    };
    (
        mk(Task::DaSource, epochs, lr),
        mk(Task::DaJoint, epochs / 2, lr / 3.0),
    )
}

/// Returns `(source-π accuracy, joint-π accuracy)` on the target test set.
fn run_da(
    source: &[Sample<'_, f32>],
    targets: &[(&str, &Tensor<f32>)],
    test: &[Sample<'_, f32>],
    classes: &[String],
    epochs: usize,
) -> (f64, f64) {
    let (src_cfg, joint_cfg) = da_configs(1e-3, epochs, 0);
    let out = train_domain_adaptation(
        &src_cfg,
        &joint_cfg,
        source,
        targets,
        classes,
        &TrainOptions::default(),
        &TrainOptions::default(),
    )
    .unwrap();
    (
        accuracy(&out.source.best.model, test, Supervision::Classes).unwrap(),
        accuracy(&out.joint.best.model, test, Supervision::Classes).unwrap(),
    )
}

fn subsample<'a>(images: Vec<&'a LabeledImage>, fraction: f64, seed: u64) -> Vec<LabeledImage> {
    use rand::seq::SliceRandom;
    let mut v = images;
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((v.len() as f64) * fraction).round() as usize;
    v.into_iter().take(n).cloned().collect()
}

#[test]
fn c5_scaled_domain_adaptation() {
    let mut c = Checks::default();
    match data_root(&["mnist", "usps"]) {
        Some(root) => {
            let opts = LoadOptions {
                resolution: Some(28),
                channels: Some(1),
            };
            let mnist = load_dataset("mnist", &root.join("mnist"), opts).unwrap();
            let usps = load_dataset("usps", &root.join("usps"), opts).unwrap();
            let classes = mnist.classes();
            let src = subsample(mnist.images_in(Partition::Train), 0.1, 1);
            let tgt = subsample(usps.images_in(Partition::Train), 0.1, 2);
            let test = subsample(usps.images_in(Partition::Test), 0.1, 3);
            let (sx, sy) = glyph_samples(&src, &classes);
            let (tx, _) = glyph_samples(&tgt, &classes);
            let (ex, ey) = glyph_samples(&test, &classes);
            let source: Vec<Sample<'_, f32>> = sx.iter().zip(&sy).map(|(x, &y)| (x, y)).collect();
            let targets: Vec<(&str, &Tensor<f32>)> =
                tgt.iter().map(|t| t.id.as_str()).zip(&tx).collect();
            let tst: Vec<Sample<'_, f32>> = ex.iter().zip(&ey).map(|(x, &y)| (x, y)).collect();
            let (s, j) = run_da(&source, &targets, &tst, &classes, 40);
            c.check(
                "source-π target accuracy >= 80%",
                s >= 0.8,
                format!("{:.1}%", 100.0 * s),
            );
            c.check(
                "joint >= source - 0.5 points",
                j >= s - 0.005,
                format!("{:.1}% vs {:.1}%", 100.0 * j, 100.0 * s),
            );
            c.report("C5", "MNIST->USPS on 10% subsets");
            c.assert_except(&[]);
        }
        None => {
            c.check(
                "MNIST->USPS run",
                false,
                "not evaluated: mnist and usps not found under RPC_DATA_ROOT",
            );
            c.report("C5", "scaled domain adaptation");
            desk_domain_adaptation_proxy();
        }
    }
}

/// Clean thin glyphs as source, thick low-resolution glyphs as target.
/// Informational; asserts only that the pipeline learns above chance.
fn desk_domain_adaptation_proxy() {
    let classes: Vec<String> = (0..10).map(class_id).collect();
    let glyphs = random_glyphs(10, 40);
    let src = glyph_dataset(&glyphs, 30, 28, &GlyphStyle::clean(), "src", 1);
    let tgt = glyph_dataset(&glyphs, 30, 28, &GlyphStyle::coarse(), "tgt", 2);
    let test = glyph_dataset(&glyphs, 30, 28, &GlyphStyle::coarse(), "test", 3);
    let (sx, sy) = glyph_samples(&src, &classes);
    let (tx, _) = glyph_samples(&tgt, &classes);
    let (ex, ey) = glyph_samples(&test, &classes);
    let source: Vec<Sample<'_, f32>> = sx.iter().zip(&sy).map(|(x, &y)| (x, y)).collect();
    let targets: Vec<(&str, &Tensor<f32>)> = tgt.iter().map(|t| t.id.as_str()).zip(&tx).collect();
    let tst: Vec<Sample<'_, f32>> = ex.iter().zip(&ey).map(|(x, &y)| (x, y)).collect();
    let (s, j) = run_da(&source, &targets, &tst, &classes, 60);
    println!(
        "C5 proxy glyphs clean->coarse, 10 classes: source-π {:.1}%, joint-π {:.1}% (chance 10%)",
        100.0 * s,
        100.0 * j
    );
    assert!(
        s > 0.2 && j > 0.2,
        "domain adaptation proxy near chance: {s} / {j}"
    );
}

// ---------------------------------------------------------------- C6

fn fsl_config(epochs: usize) -> TrainConfig {
    let mut c = desk_config(Task::Fsl, Architecture::Rpc);
    c.tau = 100.0;
    c.lr_step_a = 1e-3;
    c.lr_step_b = 1e-3;
    c.batch_size = 20;
    c.epochs = epochs;
    c
}

fn train_fsl_encoder(images: &[LabeledImage], epochs: usize) -> RpcModel<f32> {
    let classes: Vec<String> = images
        .iter()
        .map(|i| i.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let xs = tensors::<f32>(images);
    let ys = label_index(images, &classes);
    let td = TrainData {
        train: xs.iter().zip(&ys).map(|(x, &y)| (x, y)).collect(),
        val: Vec::new(),
        classes,
        semantics: None,
    };
    train_task(&fsl_config(epochs), &td, None, &TrainOptions::default())
        .unwrap()
        .last
        .model
}

#[test]
fn c6_scaled_few_shot() {
    let mut c = Checks::default();
    match data_root(&["omniglot"]) {
        Some(root) => {
            let opts = LoadOptions {
                resolution: Some(28),
                channels: Some(1),
            };
            let ds = load_dataset("omniglot", &root.join("omniglot"), opts).unwrap();
            let train: Vec<LabeledImage> = ds
                .images_of_classes(&ds.split.train_classes)
                .into_iter()
                .cloned()
                .collect();
            let model = train_fsl_encoder(&augment_omniglot_rotations(&train), 5);
            let pool = ds.images_of_classes(&ds.split.test_classes);
            let one = evaluate_fsl(&model, &pool, 5, 1, 15, 200, 0).unwrap();
            let five = evaluate_fsl(&model, &pool, 5, 5, 15, 200, 0).unwrap();
            let (a1, ci) = mean_confidence_interval(&one);
            let (a5, _) = mean_confidence_interval(&five);
            c.check(
                "5-way 1-shot >= 88%",
                a1 >= 0.88,
                format!("{:.1}% ± {:.1}", 100.0 * a1, 100.0 * ci),
            );
            c.check(
                "5-shot >= 1-shot",
                a5 >= a1,
                format!("{:.1}% vs {:.1}%", 100.0 * a5, 100.0 * a1),
            );
            c.report("C6", "Omniglot 5-way, 200 episodes");
            c.assert_except(&[]);
        }
        None => {
            c.check(
                "Omniglot run",
                false,
                "not evaluated: omniglot not found under RPC_DATA_ROOT",
            );
            c.report("C6", "scaled few-shot");
            desk_few_shot_proxy();
        }
    }
}

/// Encoder trained on 30 glyph classes, episodes from 15 held-out classes.
fn desk_few_shot_proxy() {
    let glyphs = random_glyphs(45, 9);
    let base = glyph_dataset(&glyphs[..30], 20, 28, &GlyphStyle::clean(), "base", 1);
    let novel_raw = glyph_dataset(&glyphs[30..], 20, 28, &GlyphStyle::clean(), "novel", 2);
    // keep novel class names disjoint from the base ones
    let novel: Vec<LabeledImage> = novel_raw
        .into_iter()
        .map(|mut i| {
            i.label = format!("n{}", i.label);
            i
        })
        .collect();
    let model = train_fsl_encoder(&base, 20);
    let pool: Vec<&LabeledImage> = novel.iter().collect();
    let one = evaluate_fsl(&model, &pool, 5, 1, 15, 200, 0).unwrap();
    let five = evaluate_fsl(&model, &pool, 5, 5, 15, 200, 0).unwrap();
    let (a1, c1) = mean_confidence_interval(&one);
    let (a5, c5) = mean_confidence_interval(&five);
    println!(
        "C6 proxy glyphs 5-way, 200 episodes: 1-shot {:.1}% ± {:.1}, 5-shot {:.1}% ± {:.1} (chance 20%)",
        100.0 * a1,
        100.0 * c1,
        100.0 * a5,
        100.0 * c5
    );
    assert!(a1 > 0.3, "few-shot proxy near chance: {a1}");
    assert!(a5 >= a1, "5-shot {a5} below 1-shot {a1}");
}

// ---------------------------------------------------------------- C7

#[test]
fn c7_robustness_ordering() {
    let classes = vec![class_id(0), class_id(1)];
    let train_imgs = two_part_toy(50, 28, 100);
    let test_imgs = two_part_toy(50, 28, 999);
    let (xs, ys) = (
        tensors::<f32>(&train_imgs),
        label_index(&train_imgs, &classes),
    );
    let (tx, ty) = (
        tensors::<f32>(&test_imgs),
        label_index(&test_imgs, &classes),
    );
    let train: Vec<Sample<'_, f32>> = xs.iter().zip(&ys).map(|(x, &y)| (x, y)).collect();
    let test: Vec<Sample<'_, f32>> = tx.iter().zip(&ty).map(|(x, &y)| (x, y)).collect();
    let attack = AttackConfig::new(vec![0.0, 0.05, 0.1, 0.2]).unwrap();
    let mut curves = Vec::new();
    for arch in [Architecture::Rpc, Architecture::Bs1] {
        let mut cfg = desk_config(Task::Classify, arch);
        cfg.tau = 100.0;
        cfg.lr_step_a = 3e-3;
        cfg.lr_step_b = 3e-3;
        cfg.parts = 2;
        cfg.lambda1 = 10.0;
        cfg.batch_size = 20;
        cfg.epochs = 120;
        let td = TrainData {
            train: train.clone(),
            val: Vec::new(),
            classes: classes.clone(),
            semantics: None,
        };
        let model = train_task(&cfg, &td, None, &TrainOptions::default())
            .unwrap()
            .last
            .model;
        let curve = robustness_sweep(&model, &test, &attack).unwrap();
        let clean = accuracy(&model, &test, Supervision::Classes).unwrap();
        assert_eq!(
            curve[0].accuracy, clean,
            "eps = 0 must equal clean accuracy"
        );
        curves.push((arch.to_string(), curve));
    }
    let last = |i: usize| curves[i].1.last().unwrap().accuracy;
    let fmt = |i: usize| {
        curves[i]
            .1
            .iter()
            .map(|p| format!("{:.2}", p.accuracy))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut c = Checks::default();
    c.check(
        "RPC beats BS-1 by >= 5 points at eps 0.2",
        last(0) - last(1) >= 0.05,
        format!("rpc [{}] bs1 [{}]", fmt(0), fmt(1)),
    );
    c.report("C7", "robustness ordering on the two-part toy");
    println!("C7 curves: rpc [{}] bs1 [{}]", fmt(0), fmt(1));
    c.assert_except(&[]);
}

// ---------------------------------------------------------------- C8

/// Ten classes of part compositions, or ten real CUB classes when present.
fn synthesis_images() -> (Vec<LabeledImage>, &'static str, usize) {
    if let Some(root) = data_root(&["cub"]) {
        let opts = LoadOptions {
            resolution: Some(56),
            channels: Some(3),
        };
        let ds = load_dataset("cub", &root.join("cub"), opts).unwrap();
        let keep: Vec<String> = ds.classes().into_iter().take(10).collect();
        let imgs = ds.images_of_classes(&keep).into_iter().cloned().collect();
        return (imgs, "CUB 10-class subset", 3);
    }
    let comps = random_compositions(10, 5);
    (
        composition_dataset(&comps, 24, 28, 6),
        "composition 10-class proxy",
        1,
    )
}

#[test]
fn c8_attribute_synthesis_pipeline() {
    let mut c = Checks::default();
    let (images, source, channels) = synthesis_images();
    let labels: Vec<(String, String)> = images
        .iter()
        .map(|i| (i.id.clone(), i.label.clone()))
        .collect();
    let split = make_gzsl_split(&labels, 8, 2, 0.75, 1).unwrap();
    split
        .validate(labels.iter().map(|(i, _)| i.as_str()))
        .unwrap();

    // encoder: seen classes, train partition only
    let mut cfg = desk_config(Task::Classify, Architecture::Rpc);
    cfg.channels = channels;
    cfg.resolution = images[0].pixels.width;
    cfg.parts = 3;
    cfg.prototypes = 64;
    cfg.tau = 100.0;
    cfg.lr_step_a = 1e-3;
    cfg.lr_step_b = 1e-3;
    cfg.batch_size = 20;
    cfg.epochs = 15;
    let seen = &split.train_classes;
    let train_imgs: Vec<LabeledImage> = images
        .iter()
        .filter(|i| split.per_image_assignment.get(&i.id) == Some(&Partition::Train))
        .cloned()
        .collect();
    c.check(
        "no unseen image in encoder training",
        train_imgs.iter().all(|i| seen.contains(&i.label)),
        "",
    );
    let xs = tensors::<f32>(&train_imgs);
    let ys = label_index(&train_imgs, seen);
    let td = TrainData {
        train: xs.iter().zip(&ys).map(|(x, &y)| (x, y)).collect(),
        val: Vec::new(),
        classes: seen.clone(),
        semantics: None,
    };
    let encoder = train_task(&cfg, &td, None, &TrainOptions::default())
        .unwrap()
        .last
        .model;

    // synthetic semantics over all images of every class
    let all_x = tensors::<f32>(&images);
    let mut groups: BTreeMap<String, Vec<&Tensor<f32>>> = BTreeMap::new();
    for (img, x) in images.iter().zip(&all_x) {
        groups.entry(img.label.clone()).or_default().push(x);
    }
    let table = synthesize_class_attributes(&encoder, &groups).unwrap();
    c.check(
        "192-dim semantics",
        table.dimension == 192,
        format!("{}", table.dimension),
    );
    let blocks_ok = table.vectors.values().all(|v| {
        v.chunks(64)
            .all(|b| b.iter().all(|&p| p >= 0.0) && close(b.iter().sum::<f64>(), 1.0, 1e-6))
    });
    c.check("every 64-block on the simplex", blocks_ok, "");

    // GZSL head on the synthetic semantics
    let mut head_cfg = cfg.clone();
    head_cfg.task = Task::Gzsl;
    head_cfg.epochs = 10;
    let mut init = encoder.clone();
    init.reset_head(192, &mut ChaCha8Rng::seed_from_u64(8));
    let mut eval = HeadEvaluator::<f32>::new(&images, head_cfg);
    eval.init = Some(init);
    let m = benchmark_with_synthetic(&table, &split, &mut eval).unwrap();
    let valid = [m.unseen, m.seen, m.harmonic]
        .iter()
        .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        && close(m.harmonic, harmonic_mean(m.unseen, m.seen), 1e-12);
    let mut report = MetricsReport::new("gzsl", source);
    report.unseen = Some(m.unseen);
    report.seen = Some(m.seen);
    report.harmonic = Some(m.harmonic);
    let round = MetricsReport::parse(&serde_json::to_string(&report).unwrap()).unwrap() == report;
    c.check(
        "valid (U,S,H) report",
        valid && round,
        format!("U {:.3} S {:.3} H {:.3}", m.unseen, m.seen, m.harmonic),
    );

    // Cars split statistics
    match data_root(&["cars"]) {
        Some(root) => {
            let cars = read_image_labels(&root.join("cars")).unwrap();
            let s = make_gzsl_split(&cars, 131, 65, 0.75, 0).unwrap();
            let (tr, ts, tu) = split_counts(&s);
            let within = |got: usize, want: f64| (got as f64 - want).abs() <= 0.01 * want;
            c.check(
                "Cars 131/65 split totals within 1%",
                s.train_classes.len() == 131
                    && s.test_classes.len() == 65
                    && within(tr, 8100.0)
                    && within(ts, 2637.0)
                    && within(tu, 5448.0),
                format!("{tr} / {ts} / {tu}"),
            );
        }
        None => c.check(
            "Cars split",
            false,
            "not evaluated: cars not found under RPC_DATA_ROOT",
        ),
    }
    c.report("C8", &format!("attribute synthesis on the {source}"));
    println!(
        "C8 synthetic-semantics GZSL: U {:.3} S {:.3} H {:.3}",
        m.unseen, m.seen, m.harmonic
    );
    c.assert_except(&["Cars split"]);
}
