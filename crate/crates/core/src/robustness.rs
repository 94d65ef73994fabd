//! Fast gradient sign attacks and accuracy-versus-epsilon sweeps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Task, TrainConfig};
use crate::datasets::DatasetName;
use crate::error::{contract, Result, RpcError};
use crate::heads::predict;
use crate::model::{Architecture, RpcModel, Target};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::train::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilons: Vec<f64>,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackConfig {
    /// Cross-entropy FGSM with pixels clipped to `[0, 1]`.
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(contract("epsilons must be finite and >= 0"));
        }
        if epsilons.windows(2).any(|w| w[0] > w[1]) {
            return Err(contract("epsilons must be sorted ascending"));
        }
        Ok(Self {
            epsilons,
            clip_min: 0.0,
            clip_max: 1.0,
        })
    }

    /// Parses `"0,0.05,0.1"`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let eps = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| RpcError::Config(format!("epsilon `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(eps)
    }
}

/// The two ablated comparison models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    Bs1,
    Bs2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub variant: Baseline,
}

impl BaselineSpec {
    pub fn architecture(&self) -> Architecture {
        match self.variant {
            Baseline::Bs1 => Architecture::Bs1,
            Baseline::Bs2 => Architecture::Bs2,
        }
    }

    pub fn description(&self) -> &'static str {
        match self.variant {
            Baseline::Bs1 => "backbone, global average pooling, two-layer MLP; cross-entropy",
            Baseline::Bs2 => "backbone, part attention, concatenated part features, two-layer MLP; part loss plus cross-entropy",
        }
    }

    /// Published classification schedule for this baseline.
    pub fn train_config(&self, dataset: DatasetName) -> TrainConfig {
        TrainConfig::preset(Task::Classify, self.architecture(), dataset)
    }
}

/// `clip(x + eps * sign(grad))` with `sign(0) = 0`.
pub fn fgsm_from_gradient<T: Scalar>(
    x: &Tensor<T>,
    grad: &Tensor<T>,
    eps: f64,
    clip: (f64, f64),
) -> Result<Tensor<T>> {
    if x.shape() != grad.shape() {
        return Err(contract(format!(
            "gradient shape {:?} != input {:?}",
            grad.shape(),
            x.shape()
        )));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(contract("epsilon must be finite and >= 0"));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let (e, lo, hi) = (lit::<T>(eps), lit::<T>(clip.0), lit::<T>(clip.1));
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > T::zero() {
                e
            } else if g < T::zero() {
                -e
            } else {
                T::zero()
            };
            (v + s).max(lo).min(hi)
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Gradient of the model's cross-entropy with respect to the input.
pub fn input_gradient<T: Scalar>(
    model: &RpcModel<T>,
    x: &Tensor<T>,
    label: usize,
) -> Result<Tensor<T>> {
    let g = model.input_gradient(x, Target::Class(label))?;
    if !g.is_finite() {
        return Err(RpcError::Attack("non-finite input gradient".into()));
    }
    Ok(g)
}

/// One FGSM step against `model` at intensity `eps`.
pub fn fgsm_perturb<T: Scalar>(
    x: &Tensor<T>,
    label: usize,
    model: &RpcModel<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, label)?;
    fgsm_from_gradient(x, &g, eps, (0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Accuracy under attack for every epsilon of `config`.
pub fn robustness_sweep<T: Scalar>(
    model: &RpcModel<T>,
    test: &[Sample<'_, T>],
    config: &AttackConfig,
) -> Result<Vec<CurvePoint>> {
    let mut right = vec![0usize; config.epsilons.len()];
    let clip = (config.clip_min, config.clip_max);
    for &(x, label) in test {
        // the gradient does not depend on epsilon
        let needs_grad = config.epsilons.iter().any(|&e| e > 0.0);
        let g = if needs_grad {
            Some(input_gradient(model, x, label)?)
        } else {
            None
        };
        for (i, &eps) in config.epsilons.iter().enumerate() {
            let xa = match (&g, eps == 0.0) {
                (_, true) | (None, _) => x.clone(),
                (Some(g), false) => fgsm_from_gradient(x, g, eps, clip)?,
            };
            if predict(&model.forward(&xa)?.output) == label {
                right[i] += 1;
            }
        }
    }
    let n = test.len().max(1) as f64;
    Ok(config
        .epsilons
        .iter()
        .zip(right)
        .map(|(&epsilon, r)| CurvePoint {
            epsilon,
            accuracy: r as f64 / n,
        })
        .collect())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    model: &'a str,
    epsilon: f64,
    accuracy: f64,
}

/// Writes `model,epsilon,accuracy` rows for each named curve.
pub fn write_sweep_csv(path: &Path, curves: &[(String, Vec<CurvePoint>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (name, pts) in curves {
        for p in pts {
            w.serialize(SweepRow {
                model: name,
                epsilon: p.epsilon,
                accuracy: p.accuracy,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

/// Accuracy (percent) against epsilon, one polyline per model, as SVG text.
pub fn sweep_svg(curves: &[(String, Vec<CurvePoint>)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_eps = curves
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.epsilon))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let px = |e: f64| pad + (w - 2.0 * pad) * e / max_eps;
    let py = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {t} L{pad} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            pad - 6.0,
            py(a) + 4.0,
            (a * 100.0) as u32
        );
        let e = max_eps * a;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{e:.3}</text>"#,
            px(e),
            h - pad + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">accuracy (%)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.epsilon), py(p.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        for p in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(p.epsilon),
                py(p.accuracy)
            );
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            w - pad - 60.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_with_zero() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![2.0, -3.0, 0.0]).unwrap();
        let y = fgsm_from_gradient(&x, &g, 0.1, (0.0, 1.0)).unwrap();
        let d: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        assert!((d[0] - 0.1).abs() < 1e-15 && (d[1] + 0.1).abs() < 1e-15 && d[2] == 0.0);
    }

    #[test]
    fn clipping_and_zero_eps() {
        let x = Tensor::<f32>::from_vec(&[2], vec![0.98, 0.01]).unwrap();
        let g = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        assert_eq!(fgsm_from_gradient(&x, &g, 0.0, (0.0, 1.0)).unwrap(), x);
        let y = fgsm_from_gradient(&x, &g, 0.05, (0.0, 1.0)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn attack_config_contract() {
        assert!(AttackConfig::new(vec![0.1, 0.0]).is_err());
        assert!(AttackConfig::new(vec![-0.1]).is_err());
        assert_eq!(
            AttackConfig::parse_list("0, 0.05,0.1,0.2")
                .unwrap()
                .epsilons
                .len(),
            4
        );
    }

    #[test]
    fn svg_lists_every_model() {
        let pts = vec![
            CurvePoint {
                epsilon: 0.0,
                accuracy: 0.9,
            },
            CurvePoint {
                epsilon: 0.1,
                accuracy: 0.4,
            },
        ];
        let svg = sweep_svg(&[("rpc".into(), pts.clone()), ("bs1".into(), pts)]);
        assert!(svg.contains(">rpc</text>") && svg.contains(">bs1</text>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
