use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::GramStack;
use crate::loss::{loss_value, LossKind, LossSpec};

use super::newton::NewtonRecord;
use super::state::SolverState;

/// Blocks whose K-norm falls below this are not stored in a model.
pub const BLOCK_DROP_TOL: f64 = 1e-10;

/// One selected kernel of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelKernel {
    /// Position of the kernel in the training bank.
    pub index: usize,
    pub alpha: DVector<f64>,
    /// `|alpha|_{K}`
    pub norm: f64,
    /// Kernel weight `d_m`, proportional to `norm` and summing to one.
    pub weight: f64,
}

/// One row of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub rel_gap: f64,
    pub active_kernels: usize,
    pub seconds: f64,
    pub inner_iterations: usize,
    pub gamma: f64,
}

/// A Newton record tagged with the outer iteration it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerRecord {
    pub outer: usize,
    pub record: NewtonRecord,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub solver: String,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_gap: f64,
    /// Inner solves accepted without meeting `inner_tol`.
    pub inexact_inner: usize,
    /// Stopped because the penalty reached its cap and the gap stagnated.
    pub stagnated: bool,
    /// Iterations at which the dual value exceeded the primal value.
    pub weak_duality_violations: usize,
    /// Dual points that left a K-norm ball after mean-centering.
    pub ball_reviolations: usize,
    /// Dual points that needed the box correction after mean-centering.
    pub box_corrections: usize,
    pub matvecs: u64,
    pub gradient_blocks: u64,
    pub hessian_blocks: u64,
    pub trace: Vec<TraceRecord>,
    #[serde(skip)]
    pub newton: Vec<InnerRecord>,
}

/// A trained model: the nonzero coefficient blocks, the bias and the
/// kernel weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MklModel {
    pub kernels: Vec<ModelKernel>,
    pub bias: f64,
    pub loss: LossKind,
    pub c: f64,
    /// Number of samples the coefficients refer to.
    pub n_samples: usize,
    /// Size of the kernel bank the model was trained on.
    pub bank_size: usize,
    pub diagnostics: Diagnostics,
}

impl MklModel {
    /// Extracts a model from a solver state, dropping blocks with K-norm
    /// below [`BLOCK_DROP_TOL`].
    pub fn from_state(
        state: &SolverState,
        loss: LossKind,
        c: f64,
        n_samples: usize,
        diagnostics: Diagnostics,
    ) -> Self {
        let mut kernels: Vec<ModelKernel> = state
            .alpha
            .iter()
            .enumerate()
            .filter_map(|(m, b)| {
                let b = b.as_ref()?;
                let norm = b.norm();
                (norm >= BLOCK_DROP_TOL).then(|| ModelKernel {
                    index: m,
                    alpha: b.coef.clone(),
                    norm,
                    weight: 0.0,
                })
            })
            .collect();
        let total: f64 = kernels.iter().map(|k| k.norm).sum();
        for k in &mut kernels {
            k.weight = k.norm / total;
        }
        if kernels.is_empty() {
            warn!("all coefficient blocks are zero; C = {c} may be too large");
        }
        MklModel {
            kernels,
            bias: state.bias,
            loss,
            c,
            n_samples,
            bank_size: state.alpha.len(),
            diagnostics,
        }
    }

    pub fn active_set(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.index).collect()
    }

    /// Kernel weights `(index, d_m)`.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        self.kernels.iter().map(|k| (k.index, k.weight)).collect()
    }

    pub fn norm_sum(&self) -> f64 {
        self.kernels.iter().map(|k| k.norm).sum()
    }

    /// Dense coefficient blocks for a bank of `bank_size` kernels.
    pub fn dense_blocks(&self) -> Vec<DVector<f64>> {
        let mut blocks = vec![DVector::zeros(self.n_samples); self.bank_size];
        for k in &self.kernels {
            blocks[k.index] = k.alpha.clone();
        }
        blocks
    }

    /// Training-set decision values `sum_m K_m a_m + b`.
    pub fn decision_values(&self, stack: &GramStack) -> DVector<f64> {
        let mut z = DVector::from_element(stack.n_samples(), self.bias);
        for k in &self.kernels {
            z += stack.get(k.index).mul_vec(&k.alpha);
        }
        z
    }

    /// Primal objective recomputed from the stored blocks.
    pub fn primal_objective(&self, stack: &GramStack, loss: &LossSpec) -> f64 {
        let mut reg = 0.0;
        let mut z = DVector::from_element(stack.n_samples(), self.bias);
        for k in &self.kernels {
            let kb = stack.get(k.index).mul_vec(&k.alpha);
            reg += k.alpha.dot(&kb).max(0.0).sqrt();
            z += kb;
        }
        loss_value(loss, &z) + self.c * reg
    }
}

/// Decision values on new points. `gram_rows[m]` is the `N_test x N` block
/// `k_m(x_test, x_train)` scaled like the training Gram matrix; a block is
/// required for every kernel in the model.
pub fn predict(
    model: &MklModel,
    gram_rows: &BTreeMap<usize, DMatrix<f64>>,
    n_test: usize,
) -> Result<DVector<f64>> {
    let mut z = DVector::from_element(n_test, model.bias);
    for k in &model.kernels {
        let rows = gram_rows
            .get(&k.index)
            .ok_or_else(|| MklError::Contract(format!("missing test Gram rows for kernel {}", k.index)))?;
        if rows.nrows() != n_test || rows.ncols() != k.alpha.len() {
            return Err(MklError::Contract(format!(
                "test Gram rows for kernel {} are {}x{}, expected {}x{}",
                k.index,
                rows.nrows(),
                rows.ncols(),
                n_test,
                k.alpha.len()
            )));
        }
        z.gemv(1.0, rows, &k.alpha, 1.0);
    }
    Ok(z)
}

/// The regularization constant `C'` of the squared-sum formulation
/// `f + (C'/2)(sum_m |f_m|)^2` paired with a model trained at `c`:
/// `C' = c * sum_m |a_m|_{K_m}`. Returns 0 for a zero model.
pub fn c_correspondence(model: &MklModel, c: f64) -> f64 {
    let s = model.norm_sum();
    if s == 0.0 {
        warn!("zero model: the C correspondence is degenerate");
        return 0.0;
    }
    c * s
}
