//! Proximal-minimization MKL solver.
//!
//! Each outer iteration minimizes the augmented-Lagrangian function `phi`
//! in the dual variable `rho` with a damped Newton method, then updates
//! the primal blocks by soft-thresholding:
//! `a_m <- ST_{g_m C}(a_m + g_m rho)`, `b <- b + g_b sum(rho)`.
//! The penalties `g` grow geometrically; iterations stop once the relative
//! duality gap drops below `outer_tol`.

mod al;
mod model;
mod newton;
mod state;

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use self::al::Products;
use crate::duality::gap_from_parts;
use crate::error::{MklError, Result};
use crate::kernel::{k_norm, GramMatrix, GramStack};
use crate::loss::LossSpec;

pub use al::{al_gradient, al_hessian, al_objective, ActiveTerm, DualIterate};
pub use model::{
    c_correspondence, predict, Diagnostics, InnerRecord, MklModel, ModelKernel, TraceRecord,
    BLOCK_DROP_TOL,
};
pub use newton::{newton_inner, newton_solve, InnerOutcome, InnerStatus, NewtonRecord};
pub use state::{AlphaBlock, CounterSnapshot, HingeSlacks, MklProblem, Penalties, SolverState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Regularization constant `C`.
    pub c: f64,
    pub gamma_init: f64,
    pub gamma_growth: f64,
    pub gamma_cap: f64,
    /// Relative duality gap at which training stops.
    pub outer_tol: f64,
    /// Newton stops when `|grad phi|_inf <= inner_tol`.
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Initial Hessian damping; `None` means `1e-8 trace(H)/N`.
    pub hessian_damping: Option<f64>,
    /// Once the penalty is capped, stop if the gap changed by less than
    /// `stagnation_rel` (relative) over `stagnation_window` iterations.
    pub stagnation_window: usize,
    pub stagnation_rel: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            c: 0.05,
            gamma_init: 1.0,
            gamma_growth: 2.0,
            gamma_cap: 1e8,
            outer_tol: 0.01,
            inner_tol: 1e-6,
            max_outer: 200,
            max_inner: 100,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            min_step: 1e-12,
            hessian_damping: None,
            stagnation_window: 5,
            stagnation_rel: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn with_c(c: f64) -> Self {
        SolverConfig {
            c,
            ..SolverConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SolverConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(MklError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("c", self.c)?;
        positive("gamma_init", self.gamma_init)?;
        positive("gamma_cap", self.gamma_cap)?;
        positive("outer_tol", self.outer_tol)?;
        positive("inner_tol", self.inner_tol)?;
        positive("armijo_c1", self.armijo_c1)?;
        positive("min_step", self.min_step)?;
        if !(self.gamma_growth >= 1.0 && self.gamma_growth.is_finite()) {
            return Err(MklError::Config(format!(
                "gamma_growth must be at least 1, got {}",
                self.gamma_growth
            )));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(MklError::Config(format!(
                "backtrack must lie in (0, 1), got {}",
                self.backtrack
            )));
        }
        if let Some(d) = self.hessian_damping {
            positive("hessian_damping", d)?;
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(MklError::Config("max_outer and max_inner must be at least 1".into()));
        }
        Ok(())
    }
}

/// `v max(|v|_K - t, 0) / |v|_K`; zero when `|v|_K <= t` (including `v = 0`).
pub fn soft_threshold(v: &DVector<f64>, k: &GramMatrix, threshold: f64) -> Result<DVector<f64>> {
    if !(threshold >= 0.0) {
        return Err(MklError::Contract(format!("negative threshold {threshold}")));
    }
    let norm = k_norm(k, v)?;
    if norm <= threshold {
        return Ok(DVector::zeros(v.len()));
    }
    Ok(v * ((norm - threshold) / norm))
}

/// One outer step from the inner minimizer `rho*`: soft-threshold every
/// block, move the bias, update the hinge slacks, grow the penalties.
pub fn outer_update(
    problem: &MklProblem<'_>,
    state: &SolverState,
    iterate: &DualIterate,
    config: &SolverConfig,
) -> SolverState {
    let rho = &iterate.rho;
    let g = &state.gamma;
    let mut alpha: Vec<Option<AlphaBlock>> = vec![None; state.alpha.len()];
    // only kernels in the active set survive the threshold
    for t in iterate.active_terms() {
        let m = t.kernel;
        let gm = g.kernel[m];
        let shrink = 1.0 - gm * problem.c / t.v_norm;
        let v = match &state.alpha[m] {
            Some(b) => &b.coef + rho * gm,
            None => rho * gm,
        };
        let coef = v * shrink;
        let k_coef = &t.kv * shrink;
        let sq_norm = coef.dot(&k_coef);
        alpha[m] = Some(AlphaBlock {
            coef,
            k_coef,
            sq_norm,
        });
    }
    let bias = state.bias + g.bias * rho.sum();
    let slacks = state.slacks.as_ref().map(|s| {
        let y = problem.loss.labels();
        let n = rho.len();
        HingeSlacks {
            xi: DVector::from_fn(n, |i, _| (s.xi[i] - g.xi * (1.0 - y[i] * rho[i])).max(0.0)),
            zeta: DVector::from_fn(n, |i, _| (s.zeta[i] - g.zeta * y[i] * rho[i]).max(0.0)),
        }
    });
    let mut gamma = g.clone();
    gamma.grow(config.gamma_growth, config.gamma_cap);
    SolverState {
        alpha,
        bias,
        slacks,
        gamma,
        outer_iter: state.outer_iter + 1,
    }
}

/// Runs the outer loop from `a = 0, b = 0` until the relative duality gap
/// reaches `config.outer_tol`, the iteration limit, or stagnation at the
/// penalty cap. Non-convergence yields a model flagged unconverged.
pub fn train(stack: &GramStack, loss: &LossSpec, config: &SolverConfig) -> Result<MklModel> {
    config.validate()?;
    let problem = MklProblem::new(stack, loss, config.c)?;
    let n = problem.n_samples();
    let kind = loss.kind();
    let labels = loss.labels();

    let mut state = SolverState::zeros(&problem, Penalties::uniform(problem.n_kernels(), config.gamma_init));
    let mut rho = newton::initial_rho(kind, labels);
    let mut products = Products::empty(&problem);
    let mut diag = Diagnostics {
        solver: "spicy".into(),
        final_gap: f64::INFINITY,
        ..Diagnostics::default()
    };
    let start = Instant::now();

    for iter in 1..=config.max_outer {
        let start_rho = if iter == 1 { rho.clone() } else { newton::warm_start(kind, labels, &rho) };
        products.relocate(&rho, &start_rho);
        let mut outcome = newton::newton_from_products(&problem, &state, config, start_rho, products)?;
        if outcome.status != InnerStatus::Converged {
            diag.inexact_inner += 1;
            warn!(
                "outer iteration {iter}: inner solve {:?} after {} steps, |grad|_inf = {:.3e}",
                outcome.status, outcome.iterations, outcome.grad_norm
            );
        }
        diag.inner_iterations += outcome.iterations;
        diag.newton.extend(outcome.records.iter().cloned().map(|record| InnerRecord { outer: iter, record }));

        let next = outer_update(&problem, &state, &outcome.iterate, config);
        let primal = next.primal_objective(&problem);
        let norms = outcome.iterate.rho_norms(&problem);
        let report = gap_from_parts(primal, &outcome.iterate.rho, Some(&norms), stack, config.c, loss)?;
        if report.dual > report.primal + 1e-10 {
            diag.weak_duality_violations += 1;
            warn!("outer iteration {iter}: dual {} exceeds primal {}", report.dual, report.primal);
        }
        diag.ball_reviolations += usize::from(report.ball_reviolated);
        diag.box_corrections += usize::from(report.box_corrected);

        let gamma_used = state.gamma.min();
        (rho, products) = outcome.iterate.into_parts();
        state = next;
        diag.outer_iterations = iter;
        diag.final_gap = report.relative_gap;
        diag.trace.push(TraceRecord {
            iter,
            primal_obj: report.primal,
            dual_obj: report.dual,
            rel_gap: report.relative_gap,
            active_kernels: state.nonzero_blocks(),
            seconds: start.elapsed().as_secs_f64(),
            inner_iterations: outcome.iterations,
            gamma: gamma_used,
        });
        debug!(
            "iter {iter}: primal {:.6e} dual {:.6e} gap {:.3e} active {}",
            report.primal,
            report.dual,
            report.relative_gap,
            state.nonzero_blocks()
        );

        if report.relative_gap <= config.outer_tol {
            diag.converged = true;
            break;
        }
        if stagnated(&diag.trace, &state, config) {
            diag.stagnated = true;
            warn!("gap stagnated at {:.3e} with the penalty at its cap", report.relative_gap);
            break;
        }
    }
    if !diag.converged {
        warn!(
            "stopped after {} outer iterations with relative gap {:.3e}",
            diag.outer_iterations, diag.final_gap
        );
    }
    let counters = problem.counters();
    diag.matvecs = counters.matvecs;
    diag.gradient_blocks = counters.gradient_blocks;
    diag.hessian_blocks = counters.hessian_blocks;
    Ok(MklModel::from_state(&state, kind, config.c, n, diag))
}

fn stagnated(trace: &[TraceRecord], state: &SolverState, config: &SolverConfig) -> bool {
    let w = config.stagnation_window;
    if w == 0 || trace.len() <= w || state.gamma.min() < config.gamma_cap {
        return false;
    }
    let now = trace[trace.len() - 1].rel_gap;
    let then = trace[trace.len() - 1 - w].rel_gap;
    ((now - then) / then.abs().max(f64::MIN_POSITIVE)).abs() < config.stagnation_rel
}
