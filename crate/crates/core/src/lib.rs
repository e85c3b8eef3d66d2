//! Sparse multiple kernel learning.
//!
//! Fits `f(x) = sum_m f_m(x) + b` with one component per kernel in a fixed
//! bank, penalized by `C sum_m |f_m|`, which drives most components to
//! exactly zero. The main solver is a proximal-minimization method whose
//! subproblems are solved in the dual by Newton's method; an iterative
//! shrinkage/thresholding solver of the same problem is included as a
//! baseline.

pub mod artifact;
pub mod bench;
pub mod data;
pub mod duality;
pub mod error;
pub mod ist;
pub mod kernel;
pub mod loss;
pub mod solver;

pub use error::{MklError, Result};
