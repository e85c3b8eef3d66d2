use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, MklError>;

#[derive(Debug, Error)]
pub enum MklError {
    /// Bad data: non-finite entries, empty files, unusable labels.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid kernel, bank, or solver configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Caller broke a dimensional or structural precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Logistic conjugate evaluated outside its open domain `0 < y_i rho_i < 1`.
    #[error("conjugate domain violated at {} coordinate(s), first {:?}", indices.len(), indices.first())]
    Domain { indices: Vec<usize> },

    #[error("numerical error{}: {message}", kernel.map(|k| format!(" (kernel {k})")).unwrap_or_default())]
    Numerical {
        kernel: Option<usize>,
        message: String,
    },

    /// The inner Newton loop ran out of iterations; carries the last iterate.
    #[error("inner solver did not converge after {iterations} iterations (|grad|_inf = {grad_norm:.3e})")]
    InnerConvergence {
        iterations: usize,
        grad_norm: f64,
        rho: Box<DVector<f64>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl MklError {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        MklError::Numerical {
            kernel: None,
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for MklError {
    fn from(e: serde_json::Error) -> Self {
        MklError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for MklError {
    fn from(e: toml::de::Error) -> Self {
        MklError::Config(e.to_string())
    }
}
