//! The augmented-Lagrangian function minimized by the inner Newton loop,
//! together with its gradient and Hessian.
//!
//! With `v_m = a_m + g_m rho` and `M+ = { m : |v_m|_{K_m} > g_m C }`:
//!
//! ```text
//! phi(rho) = f*(-rho) + sum_{m in M+} (|v_m| - g_m C)^2 / (2 g_m) + (b + g_b sum rho)^2 / (2 g_b)
//! grad     = grad f*(-rho) + sum_{m in M+} (1 - q_m) K_m v_m + (b + g_b sum rho) 1
//! hess     = hess f*(-rho) + sum_{m in M+} g_m ((1 - q_m) K_m + q_m K_m vt vt' K_m) + g_b 1 1'
//! ```
//!
//! where `q_m = g_m C / |v_m|` and `vt = v_m / |v_m|`. For the hinge loss the
//! conjugate term is replaced by `-y'rho` plus the two squared-hinge slack
//! penalties.

use nalgebra::{DMatrix, DVector};

use crate::error::{MklError, Result};
use crate::loss::{conjugate_eval, LossKind};

use super::state::{MklProblem, SolverState};

/// A kernel in the active set with its cached `K_m v_m` and `|v_m|_{K_m}`.
#[derive(Debug, Clone)]
pub struct ActiveTerm {
    pub kernel: usize,
    pub v_norm: f64,
    pub kv: DVector<f64>,
}

/// A dual point `rho` with the per-kernel products `K_m rho` it needs and
/// the active set it induces under a fixed solver state.
#[derive(Debug, Clone)]
pub struct DualIterate {
    pub rho: DVector<f64>,
    pub(crate) products: Products,
    pub(crate) active: Vec<ActiveTerm>,
}

/// `K_m rho`, stored only for kernels that needed it. For the others,
/// `|rho|_{K_m}` is bounded from an earlier point `p` where the product was
/// known: `|rho|_K <= |p|_K + sqrt(lambda_max(K)) |rho - p|_2`. A kernel
/// whose bound keeps it below its threshold is provably inactive and costs
/// no matrix product.
#[derive(Debug, Clone)]
pub(crate) struct Products {
    exact: Vec<Option<DVector<f64>>>,
    /// Index into `points` and `|p|_{K_m}` there.
    anchor: Vec<Option<(usize, f64)>>,
    points: Vec<DVector<f64>>,
    radius: Vec<f64>,
}

impl Products {
    /// Nothing known yet; every bound is infinite.
    pub(crate) fn empty(problem: &MklProblem<'_>) -> Self {
        let m = problem.n_kernels();
        Products {
            exact: vec![None; m],
            anchor: vec![None; m],
            points: Vec::new(),
            radius: problem.stack.iter().map(|k| k.spectral_bound().max(0.0).sqrt()).collect(),
        }
    }

    fn full(problem: &MklProblem<'_>, rho: &DVector<f64>) -> Self {
        let mut p = Products::empty(problem);
        p.exact = problem.sweep(rho).into_iter().map(Some).collect();
        p
    }

    /// Upper bounds on `|rho|_{K_m}`, exact where the product is stored.
    pub(crate) fn bounds(&self, rho: &DVector<f64>) -> Vec<f64> {
        let dist: Vec<f64> = self.points.iter().map(|p| (rho - p).norm()).collect();
        (0..self.exact.len())
            .map(|m| match (&self.exact[m], self.anchor[m]) {
                (Some(kr), _) => rho.dot(kr).max(0.0).sqrt(),
                (None, Some((id, norm))) => norm + self.radius[m] * dist[id],
                (None, None) => f64::INFINITY,
            })
            .collect()
    }

    fn ensure(&mut self, problem: &MklProblem<'_>, m: usize, rho: &DVector<f64>) -> &DVector<f64> {
        self.exact[m].get_or_insert_with(|| {
            problem.counters.add_matvecs(1);
            problem.stack.get(m).mul_vec(rho)
        })
    }

    fn get(&self, m: usize) -> Option<&DVector<f64>> {
        self.exact[m].as_ref()
    }

    /// Moves from `old` to `old + step * dir`. Products with a known
    /// `K_m dir` stay exact; the rest are anchored at `old`.
    fn advance(&mut self, old: &DVector<f64>, k_dir: &[Option<DVector<f64>>], step: f64) {
        let mut id = None;
        for (m, kd) in k_dir.iter().enumerate() {
            match (self.exact[m].as_mut(), kd) {
                (Some(kr), Some(kd)) => kr.axpy(step, kd, 1.0),
                (Some(_), None) => self.anchor_at(m, old, &mut id),
                (None, _) => {}
            }
        }
    }

    /// Moves from `old` to an arbitrary point; every product becomes an anchor.
    pub(crate) fn relocate(&mut self, old: &DVector<f64>, new: &DVector<f64>) {
        if old == new {
            return;
        }
        let mut id = None;
        for m in 0..self.exact.len() {
            if self.exact[m].is_some() {
                self.anchor_at(m, old, &mut id);
            }
        }
    }

    fn anchor_at(&mut self, m: usize, old: &DVector<f64>, id: &mut Option<usize>) {
        let kr = self.exact[m].take().expect("anchoring a known product");
        let slot = *id.get_or_insert_with(|| {
            self.points.push(old.clone());
            self.points.len() - 1
        });
        self.anchor[m] = Some((slot, old.dot(&kr).max(0.0).sqrt()));
    }
}

/// Squared norm `|a_m + g rho|^2_{K_m}` from cached products.
fn v_sq_norm(state: &SolverState, m: usize, rho: &DVector<f64>, k_rho: &DVector<f64>) -> f64 {
    let g = state.gamma.kernel[m];
    let rkr = rho.dot(k_rho);
    match &state.alpha[m] {
        Some(b) => b.sq_norm + 2.0 * g * rho.dot(&b.k_coef) + g * g * rkr,
        None => g * g * rkr,
    }
}

/// Kernels whose `|a_m + g rho|` bound stays below `g C` (with a small
/// margin against rounding) are skipped without a product.
pub(crate) fn provably_inactive(state: &SolverState, m: usize, rho_bound: f64, c: f64) -> bool {
    let g = state.gamma.kernel[m];
    let a = state.alpha[m].as_ref().map_or(0.0, |b| b.norm());
    a + g * rho_bound < g * c * (1.0 - 1e-9)
}

fn active_term(
    problem: &MklProblem<'_>,
    state: &SolverState,
    m: usize,
    rho: &DVector<f64>,
    k_rho: &DVector<f64>,
) -> Option<ActiveTerm> {
    let g = state.gamma.kernel[m];
    let norm = v_sq_norm(state, m, rho, k_rho).max(0.0).sqrt();
    // ties at |v| = g C are inactive
    if norm <= g * problem.c {
        return None;
    }
    let kv = match &state.alpha[m] {
        Some(b) => &b.k_coef + k_rho * g,
        None => k_rho * g,
    };
    Some(ActiveTerm {
        kernel: m,
        v_norm: norm,
        kv,
    })
}

impl DualIterate {
    /// Computes `K_m rho` for every kernel and the resulting active set.
    pub fn new(problem: &MklProblem<'_>, state: &SolverState, rho: DVector<f64>) -> Result<Self> {
        check_len(problem, &rho)?;
        let products = Products::full(problem, &rho);
        Ok(Self::with_products(problem, state, rho, products))
    }

    /// Builds the active set at `rho`, computing only the products that the
    /// bounds in `products` cannot rule out.
    pub(crate) fn with_products(
        problem: &MklProblem<'_>,
        state: &SolverState,
        rho: DVector<f64>,
        mut products: Products,
    ) -> Self {
        let bounds = products.bounds(&rho);
        let mut active = Vec::new();
        for (m, &b) in bounds.iter().enumerate() {
            if provably_inactive(state, m, b, problem.c) {
                continue;
            }
            let kr = products.ensure(problem, m, &rho);
            active.extend(active_term(problem, state, m, &rho, kr));
        }
        DualIterate { rho, products, active }
    }

    /// Moves to `rho + step * dir` given `K_m dir` where it was needed. Only
    /// kernels in `candidates` can be active at the new point.
    pub(crate) fn advance(
        mut self,
        problem: &MklProblem<'_>,
        state: &SolverState,
        dir: &DVector<f64>,
        k_dir: &[Option<DVector<f64>>],
        step: f64,
        candidates: &[usize],
    ) -> Self {
        let rho = &self.rho + dir * step;
        self.products.advance(&self.rho, k_dir, step);
        let products = self.products;
        let active = candidates
            .iter()
            .filter_map(|&m| {
                let kr = products.get(m).expect("candidates have exact products");
                active_term(problem, state, m, &rho, kr)
            })
            .collect();
        DualIterate { rho, products, active }
    }

    pub fn active_set(&self) -> Vec<usize> {
        self.active.iter().map(|t| t.kernel).collect()
    }

    pub fn active_terms(&self) -> &[ActiveTerm] {
        &self.active
    }

    /// Cached `K_m rho`, if this kernel needed it.
    pub fn k_rho(&self, m: usize) -> Option<&DVector<f64>> {
        self.products.get(m)
    }

    pub(crate) fn ensure_k_rho(&mut self, problem: &MklProblem<'_>, m: usize) -> &DVector<f64> {
        self.products.ensure(problem, m, &self.rho)
    }

    /// `|rho|_{K_m}` for every kernel: exact wherever it exceeds `C`, an
    /// upper bound elsewhere.
    pub fn rho_norms(&mut self, problem: &MklProblem<'_>) -> Vec<f64> {
        let mut bounds = self.products.bounds(&self.rho);
        for (m, b) in bounds.iter_mut().enumerate() {
            if *b > problem.c && self.products.get(m).is_none() {
                let kr = self.products.ensure(problem, m, &self.rho);
                *b = self.rho.dot(kr).max(0.0).sqrt();
            }
        }
        bounds
    }

    pub(crate) fn into_parts(self) -> (DVector<f64>, Products) {
        (self.rho, self.products)
    }

    pub fn objective(&self, problem: &MklProblem<'_>, state: &SolverState) -> Result<f64> {
        let loss = loss_term_value(problem, state, &self.rho)?;
        let kernels: f64 = self
            .active
            .iter()
            .map(|t| {
                let g = state.gamma.kernel[t.kernel];
                let s = t.v_norm - g * problem.c;
                s * s / (2.0 * g)
            })
            .sum();
        Ok(loss + kernels + bias_value(state, &self.rho))
    }

    pub fn gradient(&self, problem: &MklProblem<'_>, state: &SolverState) -> Result<DVector<f64>> {
        let mut grad = loss_term(problem, state, &self.rho)?.gradient;
        for t in &self.active {
            let q = state.gamma.kernel[t.kernel] * problem.c / t.v_norm;
            grad.axpy(1.0 - q, &t.kv, 1.0);
        }
        problem.counters.add_gradient_blocks(self.active.len());
        grad.add_scalar_mut(bias_residual(state, &self.rho));
        Ok(grad)
    }

    pub fn hessian(&self, problem: &MklProblem<'_>, state: &SolverState) -> Result<DMatrix<f64>> {
        let n = self.rho.len();
        let diag = loss_term(problem, state, &self.rho)?.hessian_diag;
        let mut h = DMatrix::from_diagonal(&diag);
        for t in &self.active {
            let g = state.gamma.kernel[t.kernel];
            let q = g * problem.c / t.v_norm;
            h += problem.stack.get(t.kernel).matrix() * (g * (1.0 - q));
            // g q (K vt)(K vt)' with K vt = K v / |v|
            let scale = g * q / (t.v_norm * t.v_norm);
            h.ger(scale, &t.kv, &t.kv, 1.0);
        }
        problem.counters.add_hessian_blocks(self.active.len());
        h.add_scalar_mut(state.gamma.bias);
        debug_assert_eq!(h.nrows(), n);
        Ok(h)
    }
}

fn check_len(problem: &MklProblem<'_>, rho: &DVector<f64>) -> Result<()> {
    if rho.len() != problem.n_samples() {
        return Err(MklError::Contract(format!(
            "rho has length {}, expected {}",
            rho.len(),
            problem.n_samples()
        )));
    }
    Ok(())
}

fn bias_residual(state: &SolverState, rho: &DVector<f64>) -> f64 {
    state.bias + state.gamma.bias * rho.sum()
}

fn bias_value(state: &SolverState, rho: &DVector<f64>) -> f64 {
    let r = bias_residual(state, rho);
    r * r / (2.0 * state.gamma.bias)
}

pub(crate) struct LossTerm {
    pub gradient: DVector<f64>,
    pub hessian_diag: DVector<f64>,
}

/// Value of the loss part of `phi`: the conjugate for smooth losses, or the
/// linear term plus slack penalties for the hinge loss.
pub(crate) fn loss_term_value(
    problem: &MklProblem<'_>,
    state: &SolverState,
    rho: &DVector<f64>,
) -> Result<f64> {
    match problem.loss.kind() {
        LossKind::Hinge => {
            let slacks = hinge_slacks(state)?;
            let y = problem.loss.labels();
            let (gx, gz) = (state.gamma.xi, state.gamma.zeta);
            let mut value = -y.dot(rho);
            for i in 0..rho.len() {
                let u = y[i] * rho[i];
                let a = (slacks.xi[i] - gx * (1.0 - u)).max(0.0);
                let b = (slacks.zeta[i] - gz * u).max(0.0);
                value += a * a / (2.0 * gx) + b * b / (2.0 * gz);
            }
            Ok(value)
        }
        _ => Ok(conjugate_eval(problem.loss, rho)?.value),
    }
}

pub(crate) fn loss_term(
    problem: &MklProblem<'_>,
    state: &SolverState,
    rho: &DVector<f64>,
) -> Result<LossTerm> {
    match problem.loss.kind() {
        LossKind::Hinge => {
            let slacks = hinge_slacks(state)?;
            let y = problem.loss.labels();
            let (gx, gz) = (state.gamma.xi, state.gamma.zeta);
            let n = rho.len();
            let mut gradient = DVector::zeros(n);
            let mut hessian_diag = DVector::zeros(n);
            for i in 0..n {
                let u = y[i] * rho[i];
                let a = slacks.xi[i] - gx * (1.0 - u);
                let b = slacks.zeta[i] - gz * u;
                gradient[i] = -y[i] + y[i] * a.max(0.0) - y[i] * b.max(0.0);
                if a > 0.0 {
                    hessian_diag[i] += gx;
                }
                if b > 0.0 {
                    hessian_diag[i] += gz;
                }
            }
            Ok(LossTerm {
                gradient,
                hessian_diag,
            })
        }
        _ => {
            let e = conjugate_eval(problem.loss, rho)?;
            Ok(LossTerm {
                gradient: e.gradient,
                hessian_diag: e.hessian_diag,
            })
        }
    }
}

fn hinge_slacks(state: &SolverState) -> Result<&super::state::HingeSlacks> {
    state
        .slacks
        .as_ref()
        .ok_or_else(|| MklError::Contract("hinge loss requires slack variables in the state".into()))
}

/// `phi(rho)` for the given state.
pub fn al_objective(problem: &MklProblem<'_>, state: &SolverState, rho: &DVector<f64>) -> Result<f64> {
    DualIterate::new(problem, state, rho.clone())?.objective(problem, state)
}

/// `grad phi(rho)`; only active kernels contribute.
pub fn al_gradient(
    problem: &MklProblem<'_>,
    state: &SolverState,
    rho: &DVector<f64>,
) -> Result<DVector<f64>> {
    DualIterate::new(problem, state, rho.clone())?.gradient(problem, state)
}

/// `hess phi(rho)` without damping.
pub fn al_hessian(
    problem: &MklProblem<'_>,
    state: &SolverState,
    rho: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    DualIterate::new(problem, state, rho.clone())?.hessian(problem, state)
}
