//! Iterative shrinkage/thresholding baseline for the same MKL problem.
//!
//! Each step linearizes the loss at `z = K a + b 1` and applies the
//! proximal operator of the block penalty in the K-metric:
//! `a_m <- ST_{eta C}(a_m - eta grad_z f)`, `b <- b - eta sum(grad_z f)`.
//! The step `eta` starts at `1/L` and is halved until the usual
//! proximal-gradient majorization holds.

use std::time::Instant;

use log::warn;
use nalgebra::DVector;

use crate::duality::gap_from_parts;
use crate::error::{MklError, Result};
use crate::kernel::GramStack;
use crate::loss::{loss_gradient, loss_value, LossKind, LossSpec};
use crate::solver::{AlphaBlock, Diagnostics, MklModel, Penalties, SolverState, TraceRecord};

#[derive(Debug, Clone)]
pub struct IstState {
    pub blocks: Vec<DVector<f64>>,
    /// Cached `K_m a_m`.
    pub k_blocks: Vec<DVector<f64>>,
    pub bias: f64,
    /// Current step size, shared by every block and the bias.
    pub step: f64,
    pub iter: usize,
    /// Primal objective after each step, starting with the initial point.
    pub objective: Vec<f64>,
}

impl IstState {
    /// `a = 0, b = 0` with initial step `1/L`.
    pub fn zeros(stack: &GramStack, loss: &LossSpec, c: f64) -> Result<Self> {
        check_smooth(loss)?;
        let n = stack.n_samples();
        let m = stack.n_kernels();
        let step = 1.0 / lipschitz_estimate(stack, loss.kind());
        let mut state = IstState {
            blocks: vec![DVector::zeros(n); m],
            k_blocks: vec![DVector::zeros(n); m],
            bias: 0.0,
            step,
            iter: 0,
            objective: Vec::new(),
        };
        state.objective.push(state.primal_objective(loss, c));
        Ok(state)
    }

    pub fn decision_values(&self) -> DVector<f64> {
        let n = self.k_blocks.first().map_or(0, DVector::len);
        let mut z = DVector::from_element(n, self.bias);
        for kb in &self.k_blocks {
            z += kb;
        }
        z
    }

    pub fn primal_objective(&self, loss: &LossSpec, c: f64) -> f64 {
        let reg: f64 = self
            .blocks
            .iter()
            .zip(&self.k_blocks)
            .map(|(a, ka)| a.dot(ka).max(0.0).sqrt())
            .sum();
        loss_value(loss, &self.decision_values()) + c * reg
    }
}

fn check_smooth(loss: &LossSpec) -> Result<()> {
    if loss.kind() == LossKind::Hinge {
        return Err(MklError::Config(
            "the shrinkage/thresholding baseline needs a differentiable loss".into(),
        ));
    }
    Ok(())
}

/// Bound on the curvature of `l(y, .)`.
fn curvature(kind: LossKind) -> f64 {
    match kind {
        LossKind::Logistic => 0.25,
        LossKind::Squared | LossKind::Hinge => 2.0,
    }
}

/// `curvature * lambda_max(sum_m K_m + 1 1' / N)` by power iteration,
/// slightly inflated. This bounds the Lipschitz constant of the loss
/// gradient in the metric `sum_m |d_m|^2_{K_m} + N d_b^2`; weighting the
/// bias by `N` keeps the all-ones direction from dictating the step size.
pub fn lipschitz_estimate(stack: &GramStack, kind: LossKind) -> f64 {
    let n = stack.n_samples();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut w = DVector::from_element(n, v.sum() / n as f64);
        for k in stack.iter() {
            w += k.mul_vec(&v);
        }
        let next = w.norm();
        v = w / next;
        let done = (next - lambda).abs() <= 1e-6 * next;
        lambda = next;
        if done {
            break;
        }
    }
    curvature(kind) * lambda * 1.01
}

/// Partial result of a step given `K_m g` for every kernel.
struct Linearization {
    z: DVector<f64>,
    value: f64,
    grad: DVector<f64>,
    k_grad: Vec<DVector<f64>>,
}

fn linearize(state: &IstState, stack: &GramStack, loss: &LossSpec) -> Result<Linearization> {
    let z = state.decision_values();
    let grad = loss_gradient(loss, &z)?;
    let k_grad = stack.mul_all(&grad);
    Ok(Linearization {
        value: loss_value(loss, &z),
        z,
        grad,
        k_grad,
    })
}

fn step_from(
    state: IstState,
    lin: &Linearization,
    loss: &LossSpec,
    c: f64,
) -> Result<IstState> {
    let n = lin.z.len();
    let gsum = lin.grad.sum();
    let min_step = state.step * 1e-20;
    let mut eta = state.step;
    loop {
        if eta < min_step || eta == 0.0 {
            return Err(MklError::numerical(format!(
                "shrinkage step underflow at iteration {}",
                state.iter
            )));
        }
        let mut blocks = Vec::with_capacity(state.blocks.len());
        let mut k_blocks = Vec::with_capacity(state.blocks.len());
        let mut reg = 0.0;
        let mut dist = 0.0;
        let mut z = DVector::zeros(n);
        for ((a, ka), kg) in state.blocks.iter().zip(&state.k_blocks).zip(&lin.k_grad) {
            // |a - eta g|_K^2 from cached products
            let akg = a.dot(kg);
            let gkg = lin.grad.dot(kg);
            let aka = a.dot(ka);
            let sq = aka - 2.0 * eta * akg + eta * eta * gkg;
            let norm = sq.max(0.0).sqrt();
            let thr = eta * c;
            let (coef, kcoef) = if norm <= thr {
                (DVector::zeros(n), DVector::zeros(n))
            } else {
                let s = 1.0 - thr / norm;
                ((a - &lin.grad * eta) * s, (ka - kg * eta) * s)
            };
            let new_norm_sq = coef.dot(&kcoef);
            reg += new_norm_sq.max(0.0).sqrt();
            // |a' - a|_K^2
            let d = &coef - a;
            let kd = &kcoef - ka;
            dist += d.dot(&kd);
            z += &kcoef;
            blocks.push(coef);
            k_blocks.push(kcoef);
        }
        let bias = state.bias - eta * gsum / n as f64;
        let db = bias - state.bias;
        dist += n as f64 * db * db;
        z.add_scalar_mut(bias);
        let dz = &z - &lin.z;
        let value = loss_value(loss, &z);
        let bound = lin.value + lin.grad.dot(&dz) + dist / (2.0 * eta);
        if value <= bound + 1e-12 * lin.value.abs().max(1.0) {
            let mut objective = state.objective;
            objective.push(value + c * reg);
            return Ok(IstState {
                blocks,
                k_blocks,
                bias,
                step: eta,
                iter: state.iter + 1,
                objective,
            });
        }
        eta *= 0.5;
    }
}

/// One shrinkage/thresholding step with backtracking on `eta`.
pub fn ist_step(state: IstState, stack: &GramStack, loss: &LossSpec, c: f64) -> Result<IstState> {
    check_smooth(loss)?;
    let lin = linearize(&state, stack, loss)?;
    step_from(state, &lin, loss, c)
}

/// Iterates [`ist_step`] until the relative objective decrease drops below
/// `tol` or `max_iter` steps are taken (the model is then flagged
/// unconverged). The duality gap of every iterate is recorded in the trace;
/// it reuses the products `K_m grad` of the step, so it costs no extra
/// kernel products.
pub fn ist_solve(
    stack: &GramStack,
    loss: &LossSpec,
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MklModel> {
    if !(c > 0.0) || !(tol > 0.0) {
        return Err(MklError::Config(format!("need C > 0 and tol > 0, got C = {c}, tol = {tol}")));
    }
    if loss.len() != stack.n_samples() {
        return Err(MklError::Contract(format!(
            "{} labels for {} samples",
            loss.len(),
            stack.n_samples()
        )));
    }
    let start = Instant::now();
    let mut state = IstState::zeros(stack, loss, c)?;
    let mut diag = Diagnostics {
        solver: "ist".into(),
        final_gap: f64::INFINITY,
        ..Diagnostics::default()
    };
    let mut matvecs = stack.n_kernels() as u64 * 100;
    while state.iter < max_iter {
        let lin = linearize(&state, stack, loss)?;
        matvecs += stack.n_kernels() as u64;
        let primal = *state.objective.last().expect("objective is never empty");
        let rho = -&lin.grad;
        let norms: Vec<f64> = lin.k_grad.iter().map(|kg| lin.grad.dot(kg).max(0.0).sqrt()).collect();
        let report = gap_from_parts(primal, &rho, Some(&norms), stack, c, loss)?;
        diag.trace.push(TraceRecord {
            iter: state.iter,
            primal_obj: primal,
            dual_obj: report.dual,
            rel_gap: report.relative_gap,
            active_kernels: state.blocks.iter().filter(|b| b.iter().any(|&v| v != 0.0)).count(),
            seconds: start.elapsed().as_secs_f64(),
            inner_iterations: 0,
            gamma: state.step,
        });
        diag.final_gap = report.relative_gap;

        let next = step_from(state, &lin, loss, c)?;
        let old = primal;
        let new = *next.objective.last().expect("objective is never empty");
        state = next;
        if (old - new) / old.abs().max(f64::MIN_POSITIVE) < tol {
            diag.converged = true;
            break;
        }
    }
    diag.outer_iterations = state.iter;
    diag.matvecs = matvecs;
    if !diag.converged {
        warn!("shrinkage/thresholding stopped at max_iter = {max_iter}");
    }
    Ok(ist_model(&state, loss, c, diag))
}

fn ist_model(state: &IstState, loss: &LossSpec, c: f64, diag: Diagnostics) -> MklModel {
    let n = loss.len();
    let alpha = state
        .blocks
        .iter()
        .zip(&state.k_blocks)
        .map(|(a, ka)| {
            a.iter().any(|&v| v != 0.0).then(|| AlphaBlock {
                coef: a.clone(),
                k_coef: ka.clone(),
                sq_norm: a.dot(ka),
            })
        })
        .collect();
    let s = SolverState {
        alpha,
        bias: state.bias,
        slacks: None,
        gamma: Penalties::uniform(state.blocks.len(), state.step),
        outer_iter: state.iter,
    };
    MklModel::from_state(&s, loss.kind(), c, n, diag)
}
