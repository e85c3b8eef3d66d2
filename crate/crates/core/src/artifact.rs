//! Self-contained model files: everything `predict` needs to rebuild the
//! test-time kernel rows from raw features.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, Standardizer};
use crate::error::{MklError, Result};
use crate::kernel::{cross_gram, GramStack, KernelSpec};
use crate::loss::LossKind;
use crate::solver::MklModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredKernel {
    /// Position in the training bank.
    pub index: usize,
    pub spec: KernelSpec,
    /// Trace of the jittered training Gram matrix; test rows are divided by it.
    pub scale: f64,
    pub weight: f64,
    pub norm: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSummary {
    pub solver: String,
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_gap: f64,
    pub bank_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub format_version: u32,
    pub loss: LossKind,
    pub c: f64,
    pub bias: f64,
    pub kernels: Vec<StoredKernel>,
    pub n_features: usize,
    pub standardizer: Option<Standardizer>,
    pub label_map: Option<LabelMap>,
    /// Training features after standardization, one row per sample.
    pub training_features: Vec<Vec<f64>>,
    pub summary: TrainingSummary,
}

impl ModelFile {
    /// Packages a model with the bank it was trained on and its training set.
    pub fn new(model: &MklModel, stack: &GramStack, train: &Dataset) -> Result<Self> {
        if train.len() != model.n_samples || stack.n_samples() != model.n_samples {
            return Err(MklError::Contract(format!(
                "model has {} samples, bank {}, training set {}",
                model.n_samples,
                stack.n_samples(),
                train.len()
            )));
        }
        let kernels = model
            .kernels
            .iter()
            .map(|k| {
                let gram = stack.get(k.index);
                let spec = gram.source().cloned().ok_or_else(|| {
                    MklError::Contract(format!("kernel {} has no recorded kernel parameters", k.index))
                })?;
                Ok(StoredKernel {
                    index: k.index,
                    spec,
                    scale: gram.scale(),
                    weight: k.weight,
                    norm: k.norm,
                    alpha: k.alpha.iter().copied().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelFile {
            format_version: FORMAT_VERSION,
            loss: model.loss,
            c: model.c,
            bias: model.bias,
            kernels,
            n_features: train.dim(),
            standardizer: train.standardizer.clone(),
            label_map: train.label_map,
            training_features: train.features.row_iter().map(|r| r.iter().copied().collect()).collect(),
            summary: TrainingSummary {
                solver: model.diagnostics.solver.clone(),
                converged: model.diagnostics.converged,
                outer_iterations: model.diagnostics.outer_iterations,
                final_gap: model.diagnostics.final_gap,
                bank_size: model.bank_size,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(MklError::Input(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn training_matrix(&self) -> DMatrix<f64> {
        let n = self.training_features.len();
        DMatrix::from_fn(n, self.n_features, |i, j| self.training_features[i][j])
    }

    /// Decision values for raw (unstandardized) feature rows.
    pub fn decision_values(&self, x_raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x_raw.ncols() != self.n_features {
            return Err(MklError::Input(format!(
                "data has {} features, model expects {}",
                x_raw.ncols(),
                self.n_features
            )));
        }
        let x = match &self.standardizer {
            Some(st) => st.apply(x_raw)?,
            None => x_raw.clone(),
        };
        let train = self.training_matrix();
        let mut z = DVector::from_element(x.nrows(), self.bias);
        for k in &self.kernels {
            let rows = cross_gram(&k.spec, k.scale, &x, &train)?;
            z.gemv(1.0, &rows, &DVector::from_column_slice(&k.alpha), 1.0);
        }
        Ok(z)
    }
}
