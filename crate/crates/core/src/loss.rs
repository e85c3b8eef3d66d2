//! Loss families, their convex conjugates, and the derivatives the inner
//! Newton solver needs.
//!
//! Conjugates are always written in the solver's dual variable `rho`: the
//! quantity evaluated is `f*(-rho) = sum_i l*(y_i, -rho_i)`. For the logistic
//! loss, `u_i = y_i rho_i` must lie in `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Squared,
    Hinge,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        matches!(self, LossKind::Logistic | LossKind::Hinge)
    }

    /// Whether the conjugate is twice differentiable on its domain.
    pub fn smooth_conjugate(self) -> bool {
        matches!(self, LossKind::Logistic | LossKind::Squared)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Squared => "squared",
            LossKind::Hinge => "hinge",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = MklError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(LossKind::Logistic),
            "squared" => Ok(LossKind::Squared),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(MklError::Config(format!(
                "unknown loss '{other}' (expected logistic, squared or hinge)"
            ))),
        }
    }
}

/// A loss family bound to the training labels.
#[derive(Debug, Clone)]
pub struct LossSpec {
    kind: LossKind,
    labels: DVector<f64>,
}

impl LossSpec {
    pub fn new(kind: LossKind, labels: DVector<f64>) -> Result<Self> {
        if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
            return Err(MklError::Input(format!("label {i} is not finite")));
        }
        if kind.is_classification() {
            if let Some(i) = labels.iter().position(|&v| v != 1.0 && v != -1.0) {
                return Err(MklError::Input(format!(
                    "{kind} loss needs labels in {{-1, +1}}; label {i} is {}",
                    labels[i]
                )));
            }
        }
        Ok(LossSpec { kind, labels })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn smooth_conjugate(&self) -> bool {
        self.kind.smooth_conjugate()
    }
}

/// `f*(-rho)` with gradient and diagonal Hessian with respect to `rho`.
#[derive(Debug, Clone)]
pub struct ConjugateEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian_diag: DVector<f64>,
}

/// `log(1 + exp(t))` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `x log x` with the continuous extension `0 log 0 = 0`.
pub(crate) fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `f_l(z) = sum_i l(y_i, z_i)`.
pub fn loss_value(spec: &LossSpec, z: &DVector<f64>) -> f64 {
    assert_eq!(z.len(), spec.len(), "prediction/label length mismatch");
    spec.labels
        .iter()
        .zip(z.iter())
        .map(|(&y, &f)| match spec.kind {
            LossKind::Hinge => (1.0 - y * f).max(0.0),
            LossKind::Logistic => softplus(-y * f),
            LossKind::Squared => (y - f) * (y - f),
        })
        .sum()
}

/// Gradient of `f_l` with respect to `z`; the hinge loss has none.
pub fn loss_gradient(spec: &LossSpec, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != spec.len() {
        return Err(MklError::Contract(format!(
            "prediction length {} != label length {}",
            z.len(),
            spec.len()
        )));
    }
    let y = &spec.labels;
    match spec.kind {
        LossKind::Logistic => Ok(DVector::from_fn(z.len(), |i, _| {
            -y[i] * sigmoid(-y[i] * z[i])
        })),
        LossKind::Squared => Ok(DVector::from_fn(z.len(), |i, _| -2.0 * (y[i] - z[i]))),
        LossKind::Hinge => Err(MklError::Contract(
            "the hinge loss is not differentiable".into(),
        )),
    }
}

/// Value, gradient and diagonal Hessian of `f*(-rho)` for the smooth losses.
///
/// Logistic: `sum u log u + (1-u) log(1-u)` with `u = y rho`, requiring
/// `0 < u < 1`; violations are reported, never clamped.
/// Squared: `sum -rho y + rho^2 / 4`.
pub fn conjugate_eval(spec: &LossSpec, rho: &DVector<f64>) -> Result<ConjugateEval> {
    if rho.len() != spec.len() {
        return Err(MklError::Contract(format!(
            "dual vector length {} != label length {}",
            rho.len(),
            spec.len()
        )));
    }
    let y = &spec.labels;
    let n = rho.len();
    match spec.kind {
        LossKind::Logistic => {
            let bad: Vec<usize> = (0..n)
                .filter(|&i| {
                    let u = y[i] * rho[i];
                    !(u > 0.0 && u < 1.0)
                })
                .collect();
            if !bad.is_empty() {
                return Err(MklError::Domain { indices: bad });
            }
            let mut value = 0.0;
            let mut gradient = DVector::zeros(n);
            let mut hessian_diag = DVector::zeros(n);
            for i in 0..n {
                let u = y[i] * rho[i];
                value += xlogx(u) + xlogx(1.0 - u);
                gradient[i] = y[i] * (u.ln() - (1.0 - u).ln());
                hessian_diag[i] = 1.0 / (u * (1.0 - u));
            }
            Ok(ConjugateEval {
                value,
                gradient,
                hessian_diag,
            })
        }
        LossKind::Squared => {
            let value = (0..n).map(|i| -rho[i] * y[i] + 0.25 * rho[i] * rho[i]).sum();
            Ok(ConjugateEval {
                value,
                gradient: DVector::from_fn(n, |i, _| -y[i] + 0.5 * rho[i]),
                hessian_diag: DVector::from_element(n, 0.5),
            })
        }
        LossKind::Hinge => Err(MklError::Contract(
            "the hinge conjugate is not smooth; use hinge_conjugate_linear".into(),
        )),
    }
}

/// The linear part `-sum_i y_i rho_i` of the hinge conjugate. The box
/// `0 <= y_i rho_i <= 1` is not enforced here.
pub fn hinge_conjugate_linear(spec: &LossSpec, rho: &DVector<f64>) -> f64 {
    assert_eq!(rho.len(), spec.len(), "dual/label length mismatch");
    -spec.labels.dot(rho)
}
