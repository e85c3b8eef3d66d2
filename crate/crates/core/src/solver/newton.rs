//! Damped Newton minimization of the AL function with Armijo backtracking.
//!
//! Each iteration computes `K_m d` once for every kernel that the norm
//! bounds cannot rule out on the segment `rho + c d, c in [0, 1]`. During
//! backtracking, `|a_m + g_m (rho + c d)|_{K_m}` is a quadratic in `c` built
//! from cached inner products, and it is evaluated only for kernels active
//! at `rho` or at `rho + d`; by convexity of the norm, no other kernel can
//! be active anywhere on the segment.

use nalgebra::{DMatrix, DVector};

use crate::error::{MklError, Result};
use crate::loss::LossKind;

use super::al::{loss_term_value, provably_inactive, DualIterate, Products};
use super::state::{MklProblem, SolverState};
use super::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStatus {
    Converged,
    MaxIterations,
    Stalled,
}

/// Per-iteration instrumentation of the inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonRecord {
    pub active: usize,
    /// Kernel-block products assembled into the gradient at this iterate.
    pub gradient_blocks: u64,
    /// Kernels whose norm was evaluated during backtracking.
    pub line_search_kernels: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub iterate: DualIterate,
    pub status: InnerStatus,
    pub iterations: usize,
    pub grad_norm: f64,
    pub records: Vec<NewtonRecord>,
}

/// Minimizes `phi` from `rho0` until `|grad|_inf <= inner_tol`.
///
/// Running out of iterations yields [`MklError::InnerConvergence`] with the
/// last iterate; a line search that shrinks below `min_step` is a numerical
/// error.
pub fn newton_inner(
    problem: &MklProblem<'_>,
    state: &SolverState,
    config: &SolverConfig,
    rho0: DVector<f64>,
) -> Result<DualIterate> {
    let out = newton_solve(problem, state, config, rho0)?;
    match out.status {
        InnerStatus::Converged => Ok(out.iterate),
        InnerStatus::MaxIterations => Err(MklError::InnerConvergence {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            rho: Box::new(out.iterate.rho),
        }),
        InnerStatus::Stalled => Err(MklError::numerical(format!(
            "line search stalled after {} Newton steps (|grad|_inf = {:.3e})",
            out.iterations, out.grad_norm
        ))),
    }
}

/// Like [`newton_inner`] but reports non-convergence as a status instead of
/// an error, so that the outer loop can continue from an inexact solution.
pub fn newton_solve(
    problem: &MklProblem<'_>,
    state: &SolverState,
    config: &SolverConfig,
    rho0: DVector<f64>,
) -> Result<InnerOutcome> {
    let it = DualIterate::new(problem, state, rho0)?;
    newton_from(problem, state, config, it)
}

/// Inner loop from a start point whose products may be only partly known.
pub(crate) fn newton_from_products(
    problem: &MklProblem<'_>,
    state: &SolverState,
    config: &SolverConfig,
    rho0: DVector<f64>,
    products: Products,
) -> Result<InnerOutcome> {
    let it = DualIterate::with_products(problem, state, rho0, products);
    newton_from(problem, state, config, it)
}

fn newton_from(
    problem: &MklProblem<'_>,
    state: &SolverState,
    config: &SolverConfig,
    mut it: DualIterate,
) -> Result<InnerOutcome> {
    let mut records = Vec::new();
    let mut iterations = 0;
    loop {
        let before = problem.counters();
        let grad = it.gradient(problem, state)?;
        let grad_blocks = problem.counters().since(&before).gradient_blocks;
        let grad_norm = grad.amax();
        if grad_norm <= config.inner_tol || iterations >= config.max_inner {
            let value = it.objective(problem, state)?;
            records.push(NewtonRecord {
                active: it.active.len(),
                gradient_blocks: grad_blocks,
                line_search_kernels: 0,
                value,
                grad_norm,
                step: 0.0,
            });
            let status = if grad_norm <= config.inner_tol {
                InnerStatus::Converged
            } else {
                InnerStatus::MaxIterations
            };
            return Ok(InnerOutcome {
                iterate: it,
                status,
                iterations,
                grad_norm,
                records,
            });
        }

        let hess = it.hessian(problem, state)?;
        let mut dir = solve_damped(hess, &grad, config.hessian_damping)?;
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) || !slope.is_finite() {
            dir = -&grad;
            slope = -grad.norm_squared();
        }
        let (quads, k_dir) = segment_products(problem, state, &mut it, &dir);
        let segment = Segment {
            rho: &it.rho,
            dir: &dir,
            candidates: quads.iter().map(|q| q.0).collect(),
            quads: quads.iter().map(|q| q.1).collect(),
        };

        let value0 = segment.value(problem, state, 0.0)?;
        // Once the predicted decrease is below the rounding noise of phi,
        // Armijo cannot be decided; a step whose value stays within that
        // noise is accepted instead.
        let noise = 64.0 * f64::EPSILON * (1.0 + value0.abs());
        let flat = -slope <= noise;
        let mut step = 1.0;
        let accepted = loop {
            if step < config.min_step {
                break None;
            }
            match segment.value(problem, state, step) {
                Ok(v) if v <= value0 + config.armijo_c1 * step * slope => break Some(v),
                Ok(v) if flat && v <= value0 + noise => break Some(v),
                Ok(_) | Err(MklError::Domain { .. }) => step *= config.backtrack,
                Err(e) => return Err(e),
            }
        };
        records.push(NewtonRecord {
            active: it.active.len(),
            gradient_blocks: grad_blocks,
            line_search_kernels: segment.candidates.len(),
            value: value0,
            grad_norm,
            step: if accepted.is_some() { step } else { 0.0 },
        });
        let candidates = segment.candidates;
        if accepted.is_none() {
            return Ok(InnerOutcome {
                iterate: it,
                status: InnerStatus::Stalled,
                iterations,
                grad_norm,
                records,
            });
        }
        it = it.advance(problem, state, &dir, &k_dir, step, &candidates);
        iterations += 1;
    }
}

/// Scalar products that make `phi(rho + c d)` cheap to evaluate in `c`.
struct Segment<'a> {
    rho: &'a DVector<f64>,
    dir: &'a DVector<f64>,
    candidates: Vec<usize>,
    /// For each candidate: (|a|^2 + 2g rho'Ka + g^2 rho'K rho, 2g d'Ka + 2g^2 d'K rho, g^2 d'K d)
    quads: Vec<(f64, f64, f64)>,
}

/// `K_m d` for every kernel that may be active somewhere on the segment,
/// and the quadratic coefficients of those active at either end.
#[allow(clippy::type_complexity)]
fn segment_products(
    problem: &MklProblem<'_>,
    state: &SolverState,
    it: &mut DualIterate,
    dir: &DVector<f64>,
) -> (Vec<(usize, (f64, f64, f64))>, Vec<Option<DVector<f64>>>) {
    let bounds = it.products.bounds(&it.rho);
    let reach = dir.norm();
    let mut quads = Vec::new();
    let mut k_dir = vec![None; problem.n_kernels()];
    for m in 0..problem.n_kernels() {
        let radius = problem.stack.get(m).spectral_bound().max(0.0).sqrt();
        if provably_inactive(state, m, bounds[m] + radius * reach, problem.c) {
            continue;
        }
        let g = state.gamma.kernel[m];
        it.ensure_k_rho(problem, m);
        let kr = it.k_rho(m).expect("just computed");
        let rho = &it.rho;
        let (mut a0, mut a1) = (g * g * rho.dot(kr), 2.0 * g * g * dir.dot(kr));
        problem.counters.add_matvecs(1);
        let kd = problem.stack.get(m).mul_vec(dir);
        if let Some(b) = &state.alpha[m] {
            a0 += b.sq_norm + 2.0 * g * rho.dot(&b.k_coef);
            a1 += 2.0 * g * dir.dot(&b.k_coef);
        }
        let a2 = g * g * dir.dot(&kd);
        let thr = g * problem.c;
        let thr2 = thr * thr;
        if a0 > thr2 || a0 + a1 + a2 > thr2 {
            quads.push((m, (a0, a1, a2)));
        }
        k_dir[m] = Some(kd);
    }
    (quads, k_dir)
}

impl Segment<'_> {
    fn value(&self, problem: &MklProblem<'_>, state: &SolverState, step: f64) -> Result<f64> {
        let trial = self.rho + self.dir * step;
        let mut value = loss_term_value(problem, state, &trial)?;
        for (&m, &(a0, a1, a2)) in self.candidates.iter().zip(&self.quads) {
            let g = state.gamma.kernel[m];
            let norm = (a0 + step * (a1 + step * a2)).max(0.0).sqrt();
            let excess = (norm - g * problem.c).max(0.0);
            value += excess * excess / (2.0 * g);
        }
        let r = state.bias + state.gamma.bias * trial.sum();
        Ok(value + r * r / (2.0 * state.gamma.bias))
    }
}

/// Returns `-H^{-1} g`. If `H` fails a Cholesky factorization (or yields a
/// negligible pivot), `lambda I` is added, starting at `damping` (default
/// `1e-8 trace(H)/N`) and growing tenfold up to `1e-2 trace(H)/N`.
pub(crate) fn solve_damped(
    hess: DMatrix<f64>,
    grad: &DVector<f64>,
    damping: Option<f64>,
) -> Result<DVector<f64>> {
    if let Some(dir) = try_cholesky_solve(&hess, grad) {
        return Ok(dir);
    }
    let n = hess.nrows() as f64;
    let unit = (hess.trace() / n).abs().max(f64::MIN_POSITIVE);
    let mut lambda = damping.unwrap_or(1e-8 * unit);
    let cap = (1e-2 * unit).max(lambda);
    while lambda <= cap * (1.0 + 1e-12) {
        let mut damped = hess.clone();
        for i in 0..hess.nrows() {
            damped[(i, i)] += lambda;
        }
        if let Some(dir) = try_cholesky_solve(&damped, grad) {
            return Ok(dir);
        }
        lambda *= 10.0;
    }
    let diag = hess.diagonal();
    Err(MklError::numerical(format!(
        "Hessian factorization failed after damping up to {cap:.3e} \
         (n = {}, trace = {:.3e}, diag min = {:.3e}, diag max = {:.3e}, |grad|_inf = {:.3e})",
        hess.nrows(),
        hess.trace(),
        diag.min(),
        diag.max(),
        grad.amax()
    )))
}

fn try_cholesky_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let diag_max = h.diagonal().amax();
    let chol = h.clone().cholesky()?;
    let l = chol.l_dirty();
    let min_pivot = (0..h.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * diag_max) {
        return None;
    }
    let mut dir = chol.solve(g);
    dir.neg_mut();
    dir.iter().all(|v| v.is_finite()).then_some(dir)
}

/// Starting point for the first inner loop: `y_i rho_i = 1/2` for the
/// logistic loss, zero otherwise.
pub(crate) fn initial_rho(kind: LossKind, labels: &DVector<f64>) -> DVector<f64> {
    match kind {
        LossKind::Logistic => labels * 0.5,
        _ => DVector::zeros(labels.len()),
    }
}

/// Warm start from the previous minimizer; for the logistic loss `y_i rho_i`
/// is pulled into `[1e-6, 1 - 1e-6]`.
pub(crate) fn warm_start(kind: LossKind, labels: &DVector<f64>, rho: &DVector<f64>) -> DVector<f64> {
    match kind {
        LossKind::Logistic => DVector::from_fn(rho.len(), |i, _| {
            labels[i] * (labels[i] * rho[i]).clamp(1e-6, 1.0 - 1e-6)
        }),
        _ => rho.clone(),
    }
}
