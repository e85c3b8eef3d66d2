//! Primal and dual objectives and the relative duality gap used as the
//! outer stopping rule.
//!
//! The dual of the MKL problem is
//! `max -f*(-rho)  s.t.  |rho|_{K_m} <= C for all m,  sum_i rho_i = 0`.
//! A solver iterate is mapped to a dual candidate by scaling into the
//! K-norm balls and then removing the mean.

use nalgebra::DVector;

use crate::error::Result;
use crate::kernel::{k_norm, GramStack};
use crate::loss::{conjugate_eval, hinge_conjugate_linear, loss_value, xlogx, LossKind, LossSpec};
use crate::solver::SolverState;

/// Gap between the primal objective at the current iterate and the dual
/// objective at the projected dual point.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub primal: f64,
    pub dual: f64,
    /// `(primal - dual) / |primal|`; the absolute difference when `primal == 0`.
    pub relative_gap: f64,
    pub projected_rho: DVector<f64>,
    pub zero_primal: bool,
    /// Mean-centering pushed some `|rho|_{K_m}` back above `C`.
    pub ball_reviolated: bool,
    /// Mean-centering left the loss domain and a box projection was needed.
    pub box_corrected: bool,
}

/// `f_l(K a + b 1) + C sum_m |a_m|_{K_m}`, recomputed from the coefficient
/// blocks (nonzero blocks only).
pub fn primal_objective(state: &SolverState, stack: &GramStack, loss: &LossSpec, c: f64) -> f64 {
    let n = stack.n_samples();
    let mut z = DVector::from_element(n, state.bias);
    let mut reg = 0.0;
    for (m, block) in state.alpha.iter().enumerate() {
        if let Some(b) = block {
            let kb = stack.get(m).mul_vec(&b.coef);
            reg += b.coef.dot(&kb).max(0.0).sqrt();
            z += kb;
        }
    }
    loss_value(loss, &z) + c * reg
}

/// Result of mapping `rho` to a dual-feasible point.
#[derive(Debug, Clone)]
pub struct Projection {
    pub rho: DVector<f64>,
    pub ball_reviolated: bool,
    pub box_corrected: bool,
}

/// Scale into every K-norm ball, then subtract the mean. For the hinge loss
/// `y_i rho_i` is first clipped into `[0, 1]`.
///
/// If centering leaves the loss domain (`y_i rho_i` outside `[0, 1]`) the
/// point is replaced by its Euclidean projection onto that box intersected
/// with `sum rho = 0`; if it re-enters some ball it is scaled once more.
/// Both corrections preserve `sum rho = 0`, so the output is always
/// feasible.
pub fn dual_projection(rho: &DVector<f64>, stack: &GramStack, c: f64, loss: &LossSpec) -> Result<DVector<f64>> {
    Ok(project(rho, None, stack, c, loss)?.rho)
}

/// As [`dual_projection`], optionally reusing known norms `|rho|_{K_m}`.
///
/// Entries of `rho_norms` that exceed `C` must be exact; the others may be
/// any upper bound. Exact norms are recomputed only for kernels whose bound
/// can exceed `C`, so the result is the same as with all norms exact.
pub fn project(
    rho: &DVector<f64>,
    rho_norms: Option<&[f64]>,
    stack: &GramStack,
    c: f64,
    loss: &LossSpec,
) -> Result<Projection> {
    let y = loss.labels();
    let kind = loss.kind();
    let boxed = matches!(kind, LossKind::Logistic | LossKind::Hinge);

    let mut r = rho.clone();
    let mut bounds = match rho_norms {
        Some(n) => NormBounds::given(n, c),
        None => NormBounds::exact(stack, &r)?,
    };
    if kind == LossKind::Hinge {
        let before = r.clone();
        for i in 0..r.len() {
            r[i] = y[i] * (y[i] * r[i]).clamp(0.0, 1.0);
        }
        bounds.moved(stack, (&r - &before).norm());
    }
    let worst = bounds.worst(stack, &r, c)?;
    let s = (worst / c).max(1.0);
    r /= s;
    bounds.scaled(1.0 / s);
    let mean = r.mean();
    r.add_scalar_mut(-mean);
    bounds.moved(stack, mean.abs() * (r.len() as f64).sqrt());

    let mut box_corrected = false;
    if boxed && (0..r.len()).any(|i| !(0.0..=1.0).contains(&(y[i] * r[i]))) {
        let boxed_r = project_box_hyperplane(&r, y);
        bounds.moved(stack, (&boxed_r - &r).norm());
        r = boxed_r;
        box_corrected = true;
    }
    let worst = bounds.worst(stack, &r, c)?;
    let ball_reviolated = worst > c;
    if ball_reviolated {
        r /= worst / c;
    }
    Ok(Projection {
        rho: r,
        ball_reviolated,
        box_corrected,
    })
}

/// Upper bounds on `|r|_{K_m}` for a point `r` that is being moved around.
struct NormBounds {
    bound: Vec<f64>,
    exact: Vec<bool>,
}

impl NormBounds {
    fn exact(stack: &GramStack, r: &DVector<f64>) -> Result<Self> {
        Ok(NormBounds {
            bound: stack.norms(r)?,
            exact: vec![true; stack.n_kernels()],
        })
    }

    fn given(norms: &[f64], c: f64) -> Self {
        NormBounds {
            bound: norms.to_vec(),
            exact: norms.iter().map(|&n| n > c).collect(),
        }
    }

    fn scaled(&mut self, factor: f64) {
        self.bound.iter_mut().for_each(|b| *b *= factor);
    }

    /// The point moved by `dist` in the Euclidean norm.
    fn moved(&mut self, stack: &GramStack, dist: f64) {
        if dist == 0.0 {
            return;
        }
        for (m, b) in self.bound.iter_mut().enumerate() {
            *b += stack.get(m).spectral_bound().sqrt() * dist;
            self.exact[m] = false;
        }
    }

    /// `max_m |r|_{K_m}`, exact whenever it exceeds `c`.
    fn worst(&mut self, stack: &GramStack, r: &DVector<f64>, c: f64) -> Result<f64> {
        for m in 0..self.bound.len() {
            if !self.exact[m] && self.bound[m] > c {
                self.bound[m] = k_norm(stack.get(m), r)?;
                self.exact[m] = true;
            }
        }
        Ok(self.bound.iter().copied().fold(0.0, f64::max))
    }
}

/// Euclidean projection of `w` onto `{ rho : 0 <= y_i rho_i <= 1, sum rho = 0 }`
/// for labels in `{-1, +1}`. With `u = y rho`, the solution is
/// `u_i = clip(y_i w_i - lambda y_i, 0, 1)` for the root `lambda` of the
/// nonincreasing function `sum_i y_i u_i(lambda)`.
fn project_box_hyperplane(w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = w.len();
    let u_at = |lambda: f64, i: usize| (y[i] * w[i] - lambda * y[i]).clamp(0.0, 1.0);
    let total = |lambda: f64| (0..n).map(|i| y[i] * u_at(lambda, i)).sum::<f64>();
    let bound = w.amax() + 2.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * bound {
            break;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let mut u: Vec<f64> = (0..n).map(|i| u_at(lambda, i)).collect();
    // remove the bisection residual on the free coordinates
    let residual = total(lambda);
    let free: Vec<usize> = (0..n).filter(|&i| u[i] > 0.0 && u[i] < 1.0).collect();
    if !free.is_empty() && residual != 0.0 {
        let shift = residual / free.len() as f64;
        for &i in &free {
            u[i] = (u[i] - y[i] * shift).clamp(0.0, 1.0);
        }
    }
    DVector::from_fn(n, |i, _| y[i] * u[i])
}

/// `-f*(-rho)` at a dual-feasible point. Logistic `u = y rho` is clamped into
/// `[1e-12, 1 - 1e-12]` first; hinge gives `sum y_i rho_i`.
pub fn dual_objective(rho: &DVector<f64>, loss: &LossSpec) -> f64 {
    let y = loss.labels();
    match loss.kind() {
        LossKind::Logistic => -(0..rho.len())
            .map(|i| {
                let u = (y[i] * rho[i]).clamp(1e-12, 1.0 - 1e-12);
                xlogx(u) + xlogx(1.0 - u)
            })
            .sum::<f64>(),
        LossKind::Squared => -conjugate_eval(loss, rho).expect("squared conjugate is total").value,
        LossKind::Hinge => -hinge_conjugate_linear(loss, rho),
    }
}

/// Assembles a [`GapReport`] from a primal value and a (not yet projected)
/// dual point.
pub(crate) fn gap_from_parts(
    primal: f64,
    rho: &DVector<f64>,
    rho_norms: Option<&[f64]>,
    stack: &GramStack,
    c: f64,
    loss: &LossSpec,
) -> Result<GapReport> {
    let proj = project(rho, rho_norms, stack, c, loss)?;
    let dual = dual_objective(&proj.rho, loss);
    let zero_primal = primal == 0.0;
    let relative_gap = if zero_primal {
        primal - dual
    } else {
        (primal - dual) / primal.abs()
    };
    Ok(GapReport {
        primal,
        dual,
        relative_gap,
        projected_rho: proj.rho,
        zero_primal,
        ball_reviolated: proj.ball_reviolated,
        box_corrected: proj.box_corrected,
    })
}

/// Relative duality gap of `state` certified by the dual point `rho`.
pub fn relative_gap(
    state: &SolverState,
    stack: &GramStack,
    loss: &LossSpec,
    c: f64,
    rho: &DVector<f64>,
) -> Result<GapReport> {
    let primal = primal_objective(state, stack, loss, c);
    gap_from_parts(primal, rho, None, stack, c, loss)
}
