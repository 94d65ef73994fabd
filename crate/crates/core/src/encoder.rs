//! Part-type likelihood encoder.
//!
//! Each part feature `z_m` is projected onto `K` part-type logits and squashed
//! by a softmax into a likelihood vector on the `K`-simplex. A per-part
//! dictionary of `K` prototypes maps the likelihoods back to feature space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PartFeatures;
use crate::error::{contract, Result, RpcError};
use crate::nn::{softmax, softmax_backward, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the temperature enters the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureMode {
    /// `softmax(τ · logits)`: larger τ sharpens.
    #[default]
    Multiply,
    /// `softmax(logits / τ)`: larger τ smooths.
    Divide,
}

impl fmt::Display for TemperatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemperatureMode::Multiply => "multiply",
            TemperatureMode::Divide => "divide",
        })
    }
}

impl FromStr for TemperatureMode {
    type Err = RpcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "multiply" | "mul" => Ok(TemperatureMode::Multiply),
            "divide" | "div" => Ok(TemperatureMode::Divide),
            o => Err(RpcError::Config(format!("unknown temperature mode `{o}`"))),
        }
    }
}

/// Projections `P` and dictionaries `D`, both `[M, K, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<T> {
    pub projections: Tensor<T>,
    pub dictionaries: Tensor<T>,
    pub temperature: T,
    pub mode: TemperatureMode,
}

impl<T: Scalar> PrototypeBank<T> {
    /// Gaussian initialization: `D` with standard deviation `1/√C`, `P` with
    /// `1/(s√C)` where `s` is the logit scale, so initial logits are O(1)
    /// whatever the temperature.
    pub fn new<R: Rng + ?Sized>(
        parts: usize,
        prototypes: usize,
        channels: usize,
        temperature: T,
        mode: TemperatureMode,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (channels.max(1) as f64).sqrt();
        let t = temperature.to_f64_lossy();
        let scale = match mode {
            TemperatureMode::Multiply => t,
            TemperatureMode::Divide => 1.0 / t,
        };
        Self::from_parts(
            Tensor::randn(&[parts, prototypes, channels], std / scale, rng),
            Tensor::randn(&[parts, prototypes, channels], std, rng),
            temperature,
            mode,
        )
    }

    pub fn from_parts(
        projections: Tensor<T>,
        dictionaries: Tensor<T>,
        temperature: T,
        mode: TemperatureMode,
    ) -> Result<Self> {
        if projections.shape().len() != 3 || projections.shape() != dictionaries.shape() {
            return Err(contract(format!(
                "projection {:?} and dictionary {:?} must share an [M, K, C] shape",
                projections.shape(),
                dictionaries.shape()
            )));
        }
        if projections.shape()[1] < 2 {
            return Err(contract("a prototype bank needs K >= 2"));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(contract("temperature must be positive and finite"));
        }
        if !projections.is_finite() || !dictionaries.is_finite() {
            return Err(RpcError::Numeric("prototype bank parameters".into()));
        }
        Ok(Self {
            projections,
            dictionaries,
            temperature,
            mode,
        })
    }

    pub fn parts(&self) -> usize {
        self.projections.shape()[0]
    }
    pub fn prototypes(&self) -> usize {
        self.projections.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.projections.shape()[2]
    }

    /// Multiplier applied to the projected logits.
    pub fn logit_scale(&self) -> T {
        match self.mode {
            TemperatureMode::Multiply => self.temperature,
            TemperatureMode::Divide => T::one() / self.temperature,
        }
    }

    /// `P_m` as a `K x C` row-major slice.
    pub fn projection(&self, m: usize) -> &[T] {
        let kc = self.prototypes() * self.channels();
        &self.projections.data()[m * kc..(m + 1) * kc]
    }

    /// `D_m` as a `K x C` row-major slice; row `k` is prototype `k`.
    pub fn dictionary(&self, m: usize) -> &[T] {
        let kc = self.prototypes() * self.channels();
        &self.dictionaries.data()[m * kc..(m + 1) * kc]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            projections: self.projections.zeros_like(),
            dictionaries: self.dictionaries.zeros_like(),
            temperature: self.temperature,
            mode: self.mode,
        }
    }

    fn check_features(&self, z: &PartFeatures<T>) -> Result<()> {
        if z.parts != self.parts() || z.channels != self.channels() {
            return Err(contract(format!(
                "part features {}x{} do not match bank {}x{}",
                z.parts,
                z.channels,
                self.parts(),
                self.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Params<T> for PrototypeBank<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.P"), &self.projections);
        f(format!("{prefix}.D"), &self.dictionaries);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.P"), &mut self.projections);
        f(format!("{prefix}.D"), &mut self.dictionaries);
    }
}

/// `M` rows of `K` part-type likelihoods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcEncoding<T> {
    pub parts: usize,
    pub prototypes: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RpcEncoding<T> {
    /// Wraps a flat `M*K` vector, checking every row lies on the simplex.
    pub fn new(parts: usize, prototypes: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != parts * prototypes {
            return Err(contract(format!(
                "encoding holds {} values, expected {parts}x{prototypes}",
                data.len()
            )));
        }
        let enc = Self {
            parts,
            prototypes,
            data,
        };
        let tol = T::from_f64_lossy(1e-6);
        for m in 0..parts {
            let row = enc.row(m);
            let sum: T = row.iter().copied().sum();
            if row.iter().any(|&v| v < -tol) || (sum - T::one()).abs() > tol {
                return Err(contract(format!("encoding row {m} is not on the simplex")));
            }
        }
        Ok(enc)
    }

    pub fn row(&self, m: usize) -> &[T] {
        &self.data[m * self.prototypes..(m + 1) * self.prototypes]
    }

    /// Concatenation of all rows.
    pub fn as_vector(&self) -> &[T] {
        &self.data
    }
}

/// `π_m = softmax(s · P_m z_m)` with `s` the bank's logit scale.
pub fn encode_parts<T: Scalar>(
    z: &PartFeatures<T>,
    bank: &PrototypeBank<T>,
) -> Result<RpcEncoding<T>> {
    bank.check_features(z)?;
    let (m_parts, k, c) = (bank.parts(), bank.prototypes(), bank.channels());
    let scale = bank.logit_scale();
    let mut data = Vec::with_capacity(m_parts * k);
    for m in 0..m_parts {
        let mut logits = vec![T::zero(); k];
        T::gemm(
            k,
            c,
            1,
            scale,
            bank.projection(m),
            c as isize,
            1,
            z.part(m),
            1,
            1,
            T::zero(),
            &mut logits,
            1,
            1,
        );
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(RpcError::Numeric(format!("part-type logits of part {m}")));
        }
        data.extend(softmax(&logits));
    }
    Ok(RpcEncoding {
        parts: m_parts,
        prototypes: k,
        data,
    })
}

/// Backward of [`encode_parts`]. Accumulates `dL/dP` into `grad` and returns `dL/dz`.
pub fn encode_parts_backward<T: Scalar>(
    z: &PartFeatures<T>,
    bank: &PrototypeBank<T>,
    pi: &RpcEncoding<T>,
    grad_pi: &[T],
    grad: &mut PrototypeBank<T>,
) -> PartFeatures<T> {
    let (m_parts, k, c) = (bank.parts(), bank.prototypes(), bank.channels());
    let scale = bank.logit_scale();
    let mut gz = PartFeatures::zeros(m_parts, c);
    for m in 0..m_parts {
        let gl = softmax_backward(pi.row(m), &grad_pi[m * k..(m + 1) * k]);
        // gP_m += s · gl zᵀ
        let gp = &mut grad.projections.data_mut()[m * k * c..(m + 1) * k * c];
        T::gemm(
            k,
            1,
            c,
            scale,
            &gl,
            1,
            1,
            z.part(m),
            c as isize,
            1,
            T::one(),
            gp,
            c as isize,
            1,
        );
        // gz_m = s · P_mᵀ gl
        T::gemm(
            c,
            k,
            1,
            scale,
            bank.projection(m),
            1,
            c as isize,
            &gl,
            1,
            1,
            T::zero(),
            gz.part_mut(m),
            1,
            1,
        );
    }
    gz
}

/// `ẑ_m = D_mᵀ π_m`, a convex combination of part `m`'s prototypes.
pub fn reconstruct_parts<T: Scalar>(
    pi: &RpcEncoding<T>,
    bank: &PrototypeBank<T>,
) -> Result<PartFeatures<T>> {
    if pi.parts != bank.parts() || pi.prototypes != bank.prototypes() {
        return Err(contract(format!(
            "encoding {}x{} does not match bank {}x{}",
            pi.parts,
            pi.prototypes,
            bank.parts(),
            bank.prototypes()
        )));
    }
    let (m_parts, k, c) = (bank.parts(), bank.prototypes(), bank.channels());
    let mut out = PartFeatures::zeros(m_parts, c);
    for m in 0..m_parts {
        T::gemm(
            c,
            k,
            1,
            T::one(),
            bank.dictionary(m),
            1,
            c as isize,
            pi.row(m),
            1,
            1,
            T::zero(),
            out.part_mut(m),
            1,
            1,
        );
    }
    Ok(out)
}

/// Autoencoder terms evaluated at a fixed encoding.
pub struct AutoencoderTerms<T> {
    pub loss: T,
    /// Direct `dL/dz` (through the residual only).
    pub grad_z: PartFeatures<T>,
    /// `dL/dπ` (through the reconstruction).
    pub grad_pi: Vec<T>,
}

/// Loss and partial gradients of the autoencoder objective given `π`.
/// Accumulates `dL/dD` and the regularizer gradients into `grad`.
pub fn autoencoder_terms<T: Scalar>(
    z: &PartFeatures<T>,
    pi: &RpcEncoding<T>,
    bank: &PrototypeBank<T>,
    lambda2: T,
    lambda3: T,
    grad: &mut PrototypeBank<T>,
) -> Result<AutoencoderTerms<T>> {
    let recon = reconstruct_parts(pi, bank)?;
    let (m_parts, k, c) = (bank.parts(), bank.prototypes(), bank.channels());
    let two = T::one() + T::one();
    let mut loss = lambda2 * bank.projections.sq_norm() + lambda3 * bank.dictionaries.sq_norm();
    let mut grad_z = PartFeatures::zeros(m_parts, c);
    let mut grad_pi = vec![T::zero(); m_parts * k];
    for m in 0..m_parts {
        let r: Vec<T> = z
            .part(m)
            .iter()
            .zip(recon.part(m))
            .map(|(&a, &b)| a - b)
            .collect();
        loss += r.iter().map(|&v| v * v).sum::<T>();
        for (g, &rv) in grad_z.part_mut(m).iter_mut().zip(&r) {
            *g = two * rv;
        }
        let gd = &mut grad.dictionaries.data_mut()[m * k * c..(m + 1) * k * c];
        let d = bank.dictionary(m);
        for kk in 0..k {
            let p = pi.row(m)[kk];
            let mut acc = T::zero();
            for ci in 0..c {
                gd[kk * c + ci] -= two * r[ci] * p;
                acc += r[ci] * d[kk * c + ci];
            }
            grad_pi[m * k + kk] = -two * acc;
        }
    }
    for (g, &p) in grad
        .projections
        .data_mut()
        .iter_mut()
        .zip(bank.projections.data())
    {
        *g += two * lambda2 * p;
    }
    for (g, &d) in grad
        .dictionaries
        .data_mut()
        .iter_mut()
        .zip(bank.dictionaries.data())
    {
        *g += two * lambda3 * d;
    }
    Ok(AutoencoderTerms {
        loss,
        grad_z,
        grad_pi,
    })
}

/// `Σ_m ‖z_m − D_mᵀ softmax(s · P_m z_m)‖² + λ2‖P_m‖² + λ3‖D_m‖²`.
pub fn autoencoder_loss<T: Scalar>(
    z: &PartFeatures<T>,
    bank: &PrototypeBank<T>,
    lambda2: T,
    lambda3: T,
) -> Result<T> {
    let pi = encode_parts(z, bank)?;
    let mut scratch = bank.zeros_like();
    Ok(autoencoder_terms(z, &pi, bank, lambda2, lambda3, &mut scratch)?.loss)
}

/// Full gradient of [`autoencoder_loss`]: accumulates `dL/dP`, `dL/dD` into
/// `grad` and returns `(loss, dL/dz)` including the path through `π`.
pub fn autoencoder_loss_grad<T: Scalar>(
    z: &PartFeatures<T>,
    bank: &PrototypeBank<T>,
    lambda2: T,
    lambda3: T,
    grad: &mut PrototypeBank<T>,
) -> Result<(T, PartFeatures<T>)> {
    let pi = encode_parts(z, bank)?;
    let terms = autoencoder_terms(z, &pi, bank, lambda2, lambda3, grad)?;
    let mut gz = encode_parts_backward(z, bank, &pi, &terms.grad_pi, grad);
    for (a, &b) in gz.data.iter_mut().zip(&terms.grad_z.data) {
        *a += b;
    }
    Ok((terms.loss, gz))
}
