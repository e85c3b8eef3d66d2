use std::cell::Cell;

use nalgebra::DVector;

use crate::error::{MklError, Result};
use crate::kernel::GramStack;
use crate::loss::{loss_value, LossKind, LossSpec};

/// The data of one MKL problem instance: Gram bank, loss with labels, and
/// the regularization constant `C` of `f_l(K a + b 1) + C sum_m |a_m|_{K_m}`.
pub struct MklProblem<'a> {
    pub stack: &'a GramStack,
    pub loss: &'a LossSpec,
    pub c: f64,
    pub(crate) counters: OpCounters,
}

impl<'a> MklProblem<'a> {
    pub fn new(stack: &'a GramStack, loss: &'a LossSpec, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(MklError::Config(format!("C must be positive, got {c}")));
        }
        if loss.len() != stack.n_samples() {
            return Err(MklError::Contract(format!(
                "{} labels for {} samples",
                loss.len(),
                stack.n_samples()
            )));
        }
        Ok(MklProblem {
            stack,
            loss,
            c,
            counters: OpCounters::default(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.stack.n_samples()
    }

    pub fn n_kernels(&self) -> usize {
        self.stack.n_kernels()
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    /// `K_m v` for every kernel, counted as a full sweep.
    pub(crate) fn sweep(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        self.counters.add_matvecs(self.n_kernels());
        self.stack.mul_all(v)
    }
}

/// Instrumentation of kernel work. `gradient_blocks` counts the per-kernel
/// terms `K_m ST(v_m)` assembled into the AL gradient; `matvecs` counts
/// full `K_m x` products.
#[derive(Debug, Default)]
pub(crate) struct OpCounters {
    matvecs: Cell<u64>,
    gradient_blocks: Cell<u64>,
    hessian_blocks: Cell<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub matvecs: u64,
    pub gradient_blocks: u64,
    pub hessian_blocks: u64,
}

impl CounterSnapshot {
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            matvecs: self.matvecs - earlier.matvecs,
            gradient_blocks: self.gradient_blocks - earlier.gradient_blocks,
            hessian_blocks: self.hessian_blocks - earlier.hessian_blocks,
        }
    }
}

impl OpCounters {
    pub(crate) fn add_matvecs(&self, n: usize) {
        self.matvecs.set(self.matvecs.get() + n as u64);
    }
    pub(crate) fn add_gradient_blocks(&self, n: usize) {
        self.gradient_blocks.set(self.gradient_blocks.get() + n as u64);
    }
    pub(crate) fn add_hessian_blocks(&self, n: usize) {
        self.hessian_blocks.set(self.hessian_blocks.get() + n as u64);
    }
    fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            matvecs: self.matvecs.get(),
            gradient_blocks: self.gradient_blocks.get(),
            hessian_blocks: self.hessian_blocks.get(),
        }
    }
}

/// A nonzero coefficient block `a_m` with its cached product `K_m a_m` and
/// squared norm `a_m' K_m a_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBlock {
    pub coef: DVector<f64>,
    pub k_coef: DVector<f64>,
    pub sq_norm: f64,
}

impl AlphaBlock {
    pub fn norm(&self) -> f64 {
        self.sq_norm.max(0.0).sqrt()
    }
}

/// Penalty parameters of the proximal scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub kernel: Vec<f64>,
    pub bias: f64,
    pub xi: f64,
    pub zeta: f64,
}

impl Penalties {
    pub fn uniform(n_kernels: usize, gamma: f64) -> Self {
        Penalties {
            kernel: vec![gamma; n_kernels],
            bias: gamma,
            xi: gamma,
            zeta: gamma,
        }
    }

    /// Multiplies every entry by `growth`, capping at `cap`. Entries never
    /// decrease.
    pub fn grow(&mut self, growth: f64, cap: f64) {
        let step = |g: &mut f64| *g = (*g * growth).min(cap).max(*g);
        self.kernel.iter_mut().for_each(step);
        step(&mut self.bias);
        step(&mut self.xi);
        step(&mut self.zeta);
    }

    pub fn min(&self) -> f64 {
        self.kernel
            .iter()
            .copied()
            .fold(self.bias.min(self.xi).min(self.zeta), f64::min)
    }
}

/// Slack variables of the hinge-loss path.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeSlacks {
    pub xi: DVector<f64>,
    pub zeta: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    /// One entry per kernel; `None` is an exactly-zero block.
    pub alpha: Vec<Option<AlphaBlock>>,
    pub bias: f64,
    pub slacks: Option<HingeSlacks>,
    pub gamma: Penalties,
    pub outer_iter: usize,
}

impl SolverState {
    /// `a = 0, b = 0` (and `xi = zeta = 0` for the hinge loss).
    pub fn zeros(problem: &MklProblem<'_>, gamma: Penalties) -> Self {
        let n = problem.n_samples();
        SolverState {
            alpha: vec![None; problem.n_kernels()],
            bias: 0.0,
            slacks: (problem.loss.kind() == LossKind::Hinge).then(|| HingeSlacks {
                xi: DVector::zeros(n),
                zeta: DVector::zeros(n),
            }),
            gamma,
            outer_iter: 0,
        }
    }

    /// Builds a state from dense blocks; all-zero blocks are stored as `None`.
    pub fn from_blocks(
        problem: &MklProblem<'_>,
        blocks: Vec<DVector<f64>>,
        bias: f64,
        gamma: Penalties,
    ) -> Result<Self> {
        if blocks.len() != problem.n_kernels() {
            return Err(MklError::Contract(format!(
                "{} blocks for {} kernels",
                blocks.len(),
                problem.n_kernels()
            )));
        }
        let mut state = SolverState::zeros(problem, gamma);
        state.bias = bias;
        for (m, coef) in blocks.into_iter().enumerate() {
            if coef.len() != problem.n_samples() {
                return Err(MklError::Contract(format!("block {m} has wrong length")));
            }
            if coef.iter().all(|&v| v == 0.0) {
                continue;
            }
            problem.counters.add_matvecs(1);
            let k_coef = problem.stack.get(m).mul_vec(&coef);
            let sq_norm = coef.dot(&k_coef);
            state.alpha[m] = Some(AlphaBlock {
                coef,
                k_coef,
                sq_norm,
            });
        }
        Ok(state)
    }

    pub fn nonzero_blocks(&self) -> usize {
        self.alpha.iter().filter(|b| b.is_some()).count()
    }

    /// `K a + b 1` from the cached block products.
    pub fn decision_values(&self, n: usize) -> DVector<f64> {
        let mut z = DVector::from_element(n, self.bias);
        for block in self.alpha.iter().flatten() {
            z += &block.k_coef;
        }
        z
    }

    /// `sum_m |a_m|_{K_m}`
    pub fn norm_sum(&self) -> f64 {
        self.alpha.iter().flatten().map(AlphaBlock::norm).sum()
    }

    /// Primal objective from the cached products.
    pub fn primal_objective(&self, problem: &MklProblem<'_>) -> f64 {
        let z = self.decision_values(problem.n_samples());
        loss_value(problem.loss, &z) + problem.c * self.norm_sum()
    }

    pub fn dense_blocks(&self, n: usize) -> Vec<DVector<f64>> {
        self.alpha
            .iter()
            .map(|b| b.as_ref().map_or_else(|| DVector::zeros(n), |b| b.coef.clone()))
            .collect()
    }
}
