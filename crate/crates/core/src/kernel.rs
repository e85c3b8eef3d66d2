//! Kernel bank construction and the K-weighted inner products used by the
//! solvers.
//!
//! Every Gram matrix is built on standardized features, receives a small
//! diagonal jitter, and is then divided by its trace so that `trace(K) = 1`.
//! The divisor is kept on the matrix (`scale`) so that test-time kernel rows
//! can be normalized identically.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};

/// Diagonal jitter added before trace normalization.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// The 24 Gaussian bandwidths of the default bank: 0.1, 0.25, 0.5, 0.75, 1..=20.
pub fn default_bandwidths() -> Vec<f64> {
    let mut widths = vec![0.1, 0.25, 0.5, 0.75];
    widths.extend((1..=20).map(f64::from));
    widths
}

pub fn default_degrees() -> Vec<u32> {
    vec![1, 2, 3]
}

/// Exponent convention of the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianForm {
    /// `exp(-|x - x'|^2 / (2 sigma^2))`
    #[default]
    TwoSigmaSq,
    /// `exp(-|x - x'|^2 / sigma^2)`
    SigmaSq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian {
        bandwidth: f64,
        #[serde(default)]
        form: GaussianForm,
    },
    /// Inhomogeneous polynomial `(1 + x'x)^degree`.
    Polynomial { degree: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    All,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub features: FeatureSubset,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64, features: FeatureSubset) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian {
                bandwidth,
                form: GaussianForm::default(),
            },
            features,
        }
    }

    pub fn polynomial(degree: u32, features: FeatureSubset) -> Self {
        KernelSpec {
            family: KernelFamily::Polynomial { degree },
            features,
        }
    }

    /// Checks the parameter invariants against a data dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.family {
            KernelFamily::Gaussian { bandwidth, .. } => {
                if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(MklError::Config(format!(
                        "gaussian bandwidth must be positive and finite, got {bandwidth}"
                    )));
                }
            }
            KernelFamily::Polynomial { degree } => {
                if degree < 1 {
                    return Err(MklError::Config("polynomial degree must be >= 1".into()));
                }
            }
        }
        match &self.features {
            FeatureSubset::All => {
                if dim == 0 {
                    return Err(MklError::Config("data has no features".into()));
                }
            }
            FeatureSubset::Indices(idx) => {
                if idx.is_empty() {
                    return Err(MklError::Config("empty feature subset".into()));
                }
                if let Some(&bad) = idx.iter().find(|&&j| j >= dim) {
                    return Err(MklError::Config(format!(
                        "feature index {bad} out of range for dimension {dim}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn columns(&self, dim: usize) -> Vec<usize> {
        match &self.features {
            FeatureSubset::All => (0..dim).collect(),
            FeatureSubset::Indices(idx) => idx.clone(),
        }
    }

    /// Raw (unnormalized, unjittered) kernel value between rows `a` and `b`
    /// restricted to `cols`.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian { bandwidth, form } => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                let denom = match form {
                    GaussianForm::TwoSigmaSq => 2.0 * bandwidth * bandwidth,
                    GaussianForm::SigmaSq => bandwidth * bandwidth,
                };
                (-sq / denom).exp()
            }
            KernelFamily::Polynomial { degree } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (1.0 + dot).powi(degree as i32)
            }
        }
    }
}

/// A symmetric, trace-normalized Gram matrix.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    source: Option<KernelSpec>,
    /// Divisor applied after jitter; `1.0` for fixtures built from raw matrices.
    scale: f64,
    /// Position in the owning stack, used in diagnostics.
    index: Option<usize>,
    /// Largest absolute row sum, an upper bound on the largest eigenvalue.
    spectral_bound: f64,
}

impl GramMatrix {
    /// Wraps an arbitrary symmetric matrix without jitter or normalization.
    /// Intended for fixtures and externally computed kernels.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(MklError::Contract(format!(
                "gram matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MklError::Input("gram matrix has non-finite entries".into()));
        }
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(MklError::Contract(format!(
                        "gram matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(GramMatrix {
            spectral_bound: row_sum_bound(&matrix),
            matrix,
            source: None,
            scale: 1.0,
            index: None,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn source(&self) -> Option<&KernelSpec> {
        self.source.as_ref()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn index(&self) -> Option<usize> {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// An upper bound on the largest eigenvalue (Gershgorin), so that
    /// `|v|_K <= sqrt(spectral_bound) |v|_2`.
    pub fn spectral_bound(&self) -> f64 {
        self.spectral_bound
    }

    /// `K v`
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    fn check_len(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return Err(MklError::Contract(format!(
                "{what} has length {}, gram matrix is {}x{}",
                v.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Builds the jittered, trace-normalized Gram matrix of `spec` on the rows of `x`.
pub fn compute_gram(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<GramMatrix> {
    compute_gram_with_jitter(spec, x, DEFAULT_JITTER)
}

pub fn compute_gram_with_jitter(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    jitter: f64,
) -> Result<GramMatrix> {
    let n = x.nrows();
    if n == 0 {
        return Err(MklError::Input("data matrix has no rows".into()));
    }
    check_finite(x)?;
    spec.validate(x.ncols())?;
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(MklError::Config(format!("invalid jitter {jitter}")));
    }

    let rows = gather_rows(x, &spec.columns(x.ncols()));
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    for i in 0..n {
        k[(i, i)] += jitter;
    }
    let scale = k.trace();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MklError::numerical(format!(
            "gram trace {scale} cannot be normalized"
        )));
    }
    k /= scale;
    Ok(GramMatrix {
        spectral_bound: row_sum_bound(&k),
        matrix: k,
        source: Some(spec.clone()),
        scale,
        index: None,
    })
}

fn row_sum_bound(k: &DMatrix<f64>) -> f64 {
    k.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Kernel rows between `x_new` and the training rows `x_train`, divided by
/// the training normalization constant `scale` (no jitter is applied).
pub fn cross_gram(
    spec: &KernelSpec,
    scale: f64,
    x_new: &DMatrix<f64>,
    x_train: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x_new.ncols() != x_train.ncols() {
        return Err(MklError::Contract(format!(
            "feature dimension mismatch: {} vs {}",
            x_new.ncols(),
            x_train.ncols()
        )));
    }
    check_finite(x_new)?;
    spec.validate(x_train.ncols())?;
    let cols = spec.columns(x_train.ncols());
    let a = gather_rows(x_new, &cols);
    let b = gather_rows(x_train, &cols);
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        spec.eval(&a[i], &b[j]) / scale
    }))
}

fn gather_rows(x: &DMatrix<f64>, cols: &[usize]) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| cols.iter().map(|&j| x[(i, j)]).collect())
        .collect()
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (i, j) = (pos % x.nrows(), pos / x.nrows());
        return Err(MklError::Input(format!(
            "non-finite data entry at row {i}, column {j}"
        )));
    }
    Ok(())
}

/// `a' K c`
pub fn k_inner(k: &GramMatrix, a: &DVector<f64>, c: &DVector<f64>) -> Result<f64> {
    k.check_len(a, "left vector")?;
    k.check_len(c, "right vector")?;
    Ok(a.dot(&k.mul_vec(c)))
}

/// `sqrt(a' K a)`; tiny negative quadratic forms from roundoff are read as 0.
pub fn k_norm(k: &GramMatrix, a: &DVector<f64>) -> Result<f64> {
    k.check_len(a, "vector")?;
    let q = a.dot(&k.mul_vec(a));
    quad_to_norm(q, k, a)
}

pub(crate) fn quad_to_norm(q: f64, k: &GramMatrix, a: &DVector<f64>) -> Result<f64> {
    if q >= 0.0 {
        return Ok(q.sqrt());
    }
    let diag_max = k.matrix.diagonal().amax();
    let floor = 1e-12 * a.norm_squared() * diag_max.max(f64::MIN_POSITIVE);
    if -q <= floor {
        Ok(0.0)
    } else {
        Err(MklError::Numerical {
            kernel: k.index,
            message: format!("negative quadratic form {q:.3e}; gram matrix is not positive semidefinite"),
        })
    }
}

/// Which variable groups each kernel function of the bank is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetPolicy {
    /// Each single variable and all variables jointly.
    #[default]
    Both,
    Individual,
    Joint,
}

/// Declarative description of a kernel bank (read from TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub bandwidths: Vec<f64>,
    pub degrees: Vec<u32>,
    pub subsets: SubsetPolicy,
    pub jitter: f64,
    pub gaussian_form: GaussianForm,
    /// Seed for randomly generated banks.
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            bandwidths: default_bandwidths(),
            degrees: default_degrees(),
            subsets: SubsetPolicy::Both,
            jitter: DEFAULT_JITTER,
            gaussian_form: GaussianForm::TwoSigmaSq,
            seed: 0,
        }
    }
}

impl BankConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MklError::Serde(e.to_string()))
    }

    /// Kernel specs in bank order: each kernel function (Gaussian widths,
    /// then polynomial degrees) applied to each subset (single variables in
    /// order, then the joint subset).
    pub fn specs(&self, dim: usize) -> Result<Vec<KernelSpec>> {
        if self.bandwidths.is_empty() && self.degrees.is_empty() {
            return Err(MklError::Config(
                "kernel bank lists no bandwidths and no degrees".into(),
            ));
        }
        if dim == 0 {
            return Err(MklError::Input("data has no features".into()));
        }
        let mut subsets = Vec::new();
        if matches!(self.subsets, SubsetPolicy::Both | SubsetPolicy::Individual) {
            subsets.extend((0..dim).map(|j| FeatureSubset::Indices(vec![j])));
        }
        if matches!(self.subsets, SubsetPolicy::Both | SubsetPolicy::Joint) {
            subsets.push(FeatureSubset::All);
        }
        let families = self
            .bandwidths
            .iter()
            .map(|&bandwidth| KernelFamily::Gaussian {
                bandwidth,
                form: self.gaussian_form,
            })
            .chain(
                self.degrees
                    .iter()
                    .map(|&degree| KernelFamily::Polynomial { degree }),
            );
        let mut specs = Vec::new();
        for family in families {
            for features in &subsets {
                let spec = KernelSpec {
                    family: family.clone(),
                    features: features.clone(),
                };
                spec.validate(dim)?;
                specs.push(spec);
            }
        }
        Ok(specs)
    }
}

/// The ordered bank `K_1 .. K_M` over a common sample set.
#[derive(Debug, Clone)]
pub struct GramStack {
    matrices: Vec<GramMatrix>,
    n_samples: usize,
}

impl GramStack {
    pub fn new(mut matrices: Vec<GramMatrix>) -> Result<Self> {
        let n_samples = matrices
            .first()
            .map(GramMatrix::dim)
            .ok_or_else(|| MklError::Config("a gram stack needs at least one kernel".into()))?;
        for (m, g) in matrices.iter_mut().enumerate() {
            if g.dim() != n_samples {
                return Err(MklError::Contract(format!(
                    "kernel {m} is {0}x{0}, expected {n_samples}x{n_samples}",
                    g.dim()
                )));
            }
            g.index = Some(m);
        }
        Ok(GramStack {
            matrices,
            n_samples,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_kernels(&self) -> usize {
        self.matrices.len()
    }

    pub fn get(&self, m: usize) -> &GramMatrix {
        &self.matrices[m]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GramMatrix> {
        self.matrices.iter()
    }

    pub fn matrices(&self) -> &[GramMatrix] {
        &self.matrices
    }

    /// Number of stored matrix entries, `M * N^2`.
    pub fn memory_entries(&self) -> usize {
        self.matrices.len() * self.n_samples * self.n_samples
    }

    /// `K_m v` for every kernel.
    pub fn mul_all(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        self.matrices.iter().map(|k| k.mul_vec(v)).collect()
    }

    /// `|v|_{K_m}` for every kernel.
    pub fn norms(&self, v: &DVector<f64>) -> Result<Vec<f64>> {
        self.matrices.iter().map(|k| k_norm(k, v)).collect()
    }
}

/// Applies every kernel function of `config` to each variable and/or to all
/// variables jointly.
pub fn build_kernel_bank(x: &DMatrix<f64>, config: &BankConfig) -> Result<GramStack> {
    let specs = config.specs(x.ncols())?;
    let grams = specs
        .iter()
        .map(|s| compute_gram_with_jitter(s, x, config.jitter))
        .collect::<Result<Vec<_>>>()?;
    GramStack::new(grams)
}

/// `M` Gaussian kernels on random feature subsets with width
/// `sigma = 5 chi^2 + 0.1`, `chi^2 ~ chi-squared(1)`.
pub fn random_kernel_bank(x: &DMatrix<f64>, n_kernels: usize, seed: u64) -> Result<GramStack> {
    let specs = random_kernel_specs(x.ncols(), n_kernels, seed)?;
    let grams = specs
        .iter()
        .map(|s| compute_gram(s, x))
        .collect::<Result<Vec<_>>>()?;
    GramStack::new(grams)
}

pub fn random_kernel_specs(dim: usize, n_kernels: usize, seed: u64) -> Result<Vec<KernelSpec>> {
    if n_kernels == 0 {
        return Err(MklError::Config("number of kernels must be >= 1".into()));
    }
    if dim == 0 {
        return Err(MklError::Input("data has no features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi2 = ChiSquared::new(1.0).expect("one degree of freedom is valid");
    Ok((0..n_kernels)
        .map(|_| {
            let width = 5.0 * chi2.sample(&mut rng) + 0.1;
            let size = rng.random_range(1..=dim);
            let mut cols = sample(&mut rng, dim, size).into_vec();
            cols.sort_unstable();
            KernelSpec::gaussian(width, FeatureSubset::Indices(cols))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_data(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identical_points_give_all_ones_plus_jitter() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        let g = compute_gram(&KernelSpec::gaussian(1.0, FeatureSubset::All), &x).unwrap();
        let s = 2.0 * (1.0 + 1e-8);
        assert_relative_eq!(g.scale(), s, epsilon = 1e-15);
        assert_relative_eq!(g.matrix()[(0, 0)], (1.0 + 1e-8) / s, epsilon = 1e-15);
        assert_relative_eq!(g.matrix()[(0, 1)], 1.0 / s, epsilon = 1e-15);
        assert_relative_eq!(g.trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_polynomial_entries() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let g = compute_gram(&KernelSpec::polynomial(1, FeatureSubset::All), &x).unwrap();
        let raw = g.matrix() * g.scale();
        assert_relative_eq!(raw[(0, 0)], 2.0 + 1e-8, epsilon = 1e-12);
        assert_relative_eq!(raw[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g.trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sigma_sq_form_differs_from_default() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let spec = |form| KernelSpec {
            family: KernelFamily::Gaussian {
                bandwidth: 1.0,
                form,
            },
            features: FeatureSubset::All,
        };
        let a = compute_gram_with_jitter(&spec(GaussianForm::TwoSigmaSq), &x, 0.0).unwrap();
        let b = compute_gram_with_jitter(&spec(GaussianForm::SigmaSq), &x, 0.0).unwrap();
        assert_relative_eq!(a.matrix()[(0, 1)] * a.scale(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(b.matrix()[(0, 1)] * b.scale(), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn random_gram_is_symmetric_pd_unit_trace() {
        let x = random_data(20, 5, 3);
        let specs = [
            KernelSpec::gaussian(0.5, FeatureSubset::All),
            KernelSpec::gaussian(3.0, FeatureSubset::Indices(vec![1, 4])),
            KernelSpec::polynomial(3, FeatureSubset::All),
            KernelSpec::polynomial(2, FeatureSubset::Indices(vec![0])),
        ];
        for spec in &specs {
            let g = compute_gram(spec, &x).unwrap();
            let k = g.matrix();
            assert!((k - k.transpose()).amax() <= 1e-12);
            assert!((g.trace() - 1.0).abs() <= 1e-10);
            let eig = k.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > 0.0, "{spec:?}: {}", eig.eigenvalues.min());
        }
    }

    #[test]
    fn compute_gram_rejects_bad_inputs() {
        let mut x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            compute_gram(&KernelSpec::gaussian(0.0, FeatureSubset::All), &x),
            Err(MklError::Config(_))
        ));
        assert!(matches!(
            compute_gram(&KernelSpec::polynomial(0, FeatureSubset::All), &x),
            Err(MklError::Config(_))
        ));
        assert!(matches!(
            compute_gram(&KernelSpec::gaussian(1.0, FeatureSubset::Indices(vec![1])), &x),
            Err(MklError::Config(_))
        ));
        x[(1, 0)] = f64::NAN;
        assert!(matches!(
            compute_gram(&KernelSpec::gaussian(1.0, FeatureSubset::All), &x),
            Err(MklError::Input(_))
        ));
    }

    #[test]
    fn inner_and_norm_on_fixtures() {
        let half = GramMatrix::from_matrix(DMatrix::identity(2, 2) * 0.5).unwrap();
        let ones = DVector::from_element(2, 1.0);
        assert_relative_eq!(k_inner(&half, &ones, &ones).unwrap(), 1.0);
        assert_eq!(k_inner(&half, &DVector::zeros(2), &ones).unwrap(), 0.0);

        let eye = GramMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(k_norm(&eye, &DVector::from_vec(vec![3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(k_norm(&eye, &DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn inner_matches_double_loop() {
        let x = random_data(10, 3, 9);
        let g = compute_gram(&KernelSpec::gaussian(1.0, FeatureSubset::All), &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let mut brute = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                brute += a[i] * g.matrix()[(i, j)] * c[j];
            }
        }
        assert!((k_inner(&g, &a, &c).unwrap() - brute).abs() <= 1e-12);
        let n = k_norm(&g, &a).unwrap();
        assert!((n - k_inner(&g, &a, &a).unwrap().sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let eye = GramMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        let a = DVector::zeros(2);
        assert!(matches!(k_inner(&eye, &a, &a), Err(MklError::Contract(_))));
        assert!(matches!(k_norm(&eye, &a), Err(MklError::Contract(_))));
    }

    #[test]
    fn negative_form_reports_kernel_index() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let ok = DMatrix::identity(2, 2);
        let stack = GramStack::new(vec![
            GramMatrix::from_matrix(ok).unwrap(),
            GramMatrix::from_matrix(bad).unwrap(),
        ])
        .unwrap();
        let err = k_norm(stack.get(1), &DVector::from_vec(vec![0.0, 1.0])).unwrap_err();
        assert!(matches!(err, MklError::Numerical { kernel: Some(1), .. }));
    }

    #[test]
    fn default_bank_counts() {
        assert_eq!(default_bandwidths().len(), 24);
        let x = random_data(6, 2, 0);
        assert_eq!(build_kernel_bank(&x, &BankConfig::default()).unwrap().n_kernels(), 81);
        let x4 = random_data(6, 4, 0);
        let stack = build_kernel_bank(&x4, &BankConfig::default()).unwrap();
        assert_eq!(stack.n_kernels(), 135);
        assert!(stack.iter().all(|g| (g.trace() - 1.0).abs() <= 1e-10));

        let single = BankConfig {
            bandwidths: vec![1.0],
            degrees: vec![],
            subsets: SubsetPolicy::Joint,
            ..BankConfig::default()
        };
        assert_eq!(build_kernel_bank(&x4, &single).unwrap().n_kernels(), 1);
    }

    #[test]
    fn empty_bank_is_config_error() {
        let cfg = BankConfig {
            bandwidths: vec![],
            degrees: vec![],
            ..BankConfig::default()
        };
        let x = random_data(4, 2, 0);
        assert!(matches!(build_kernel_bank(&x, &cfg), Err(MklError::Config(_))));
    }

    #[test]
    fn bank_config_toml_round_trip() {
        let text = "bandwidths = [0.5, 2.0]\ndegrees = [2]\nsubsets = \"joint\"\njitter = 1e-6\n";
        let cfg = BankConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.bandwidths, vec![0.5, 2.0]);
        assert_eq!(cfg.subsets, SubsetPolicy::Joint);
        assert_eq!(cfg.gaussian_form, GaussianForm::TwoSigmaSq);
        let back = BankConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(BankConfig::from_toml_str("widths = [1.0]").is_err());
    }

    #[test]
    fn random_bank_widths_and_determinism() {
        let x = random_data(15, 6, 4);
        let specs = random_kernel_specs(6, 50, 11).unwrap();
        assert_eq!(specs.len(), 50);
        for s in &specs {
            match s.family {
                KernelFamily::Gaussian { bandwidth, .. } => assert!(bandwidth >= 0.1),
                _ => panic!("random bank must be gaussian"),
            }
        }
        let a = random_kernel_bank(&x, 50, 11).unwrap();
        let b = random_kernel_bank(&x, 50, 11).unwrap();
        assert_eq!(a.n_kernels(), 50);
        for (ga, gb) in a.iter().zip(b.iter()) {
            assert_eq!(ga.matrix(), gb.matrix());
        }
        assert!(random_kernel_bank(&x, 0, 1).is_err());
    }

    #[test]
    fn cross_gram_reproduces_training_block_off_diagonal() {
        let x = random_data(8, 3, 5);
        let spec = KernelSpec::gaussian(1.5, FeatureSubset::Indices(vec![0, 2]));
        let g = compute_gram(&spec, &x).unwrap();
        let cross = cross_gram(&spec, g.scale(), &x, &x).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j {
                    g.matrix()[(i, j)] - DEFAULT_JITTER / g.scale()
                } else {
                    g.matrix()[(i, j)]
                };
                assert!((cross[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }
}
