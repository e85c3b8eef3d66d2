//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spicymkl::data::{split, standardize, synth_sparse_mkl, toy_blobs, toy_circles, Dataset, SYNTH_GROUP};
use spicymkl::kernel::{build_kernel_bank, random_kernel_bank, BankConfig, GramMatrix, GramStack};
use spicymkl::loss::{LossKind, LossSpec};

static SERIAL: Mutex<()> = Mutex::new(());

/// Timing-sensitive tests hold this so that they do not share the CPU.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// A random symmetric positive definite matrix with unit trace and
/// condition number below roughly 30.
pub fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> GramMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let k = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2;
    let k = (&k + k.transpose()) * (0.5 / k.trace());
    GramMatrix::from_matrix(k).unwrap()
}

pub fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Regression target `sin(x_0)` plus a little uniform noise.
pub fn regression_target(x: &DMatrix<f64>, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(x.nrows(), |i, _| x[(i, 0)].sin() + 0.1 * rng.random_range(-1.0..1.0))
}

/// Standardized circles data with a random Gaussian/polynomial bank.
pub fn random_instance(n: usize, m: usize, kind: LossKind, seed: u64) -> (GramStack, LossSpec) {
    let ds = standardize(&toy_circles(n, 3, 0.2, seed).unwrap()).unwrap();
    let y = match kind {
        LossKind::Squared => regression_target(&ds.features, seed),
        _ => ds.labels.clone(),
    };
    let stack = random_kernel_bank(&ds.features, m, seed + 1).unwrap();
    (stack, LossSpec::new(kind, y).unwrap())
}

/// The fixed logistic instance used for convergence-rate checks:
/// N = 100, M = 50.
pub fn reference_instance() -> (GramStack, LossSpec) {
    random_instance(100, 50, LossKind::Logistic, 2024)
}

/// The toy classification suite: blobs and circles, split 80/20.
pub fn toy_suite(seed: u64) -> Vec<(&'static str, Dataset, Dataset)> {
    let blobs = toy_blobs(100, 2, 1.5, seed).unwrap();
    let circles = toy_circles(100, 2, 0.15, seed).unwrap();
    vec![
        ("blobs", blobs, 0.8),
        ("circles", circles, 0.8),
    ]
    .into_iter()
    .map(|(name, ds, f)| {
        let (tr, te) = split(&ds, f, seed + 7).unwrap();
        (name, tr, te)
    })
    .collect()
}

/// The default bank on a training set.
pub fn default_bank(train: &Dataset) -> GramStack {
    build_kernel_bank(&train.features, &BankConfig::default()).unwrap()
}

/// The smallest `C` at which the all-zero model is optimal,
/// `max_m |rho0|_{K_m}`, where `rho0 = -grad f(b* 1)` at the best constant
/// model `b*`. Defined for the logistic and squared losses.
pub fn c_max(stack: &GramStack, loss: &LossSpec) -> f64 {
    let y = loss.labels();
    let n = y.len() as f64;
    let rho0 = match loss.kind() {
        LossKind::Squared => y.add_scalar(-y.mean()) * 2.0,
        _ => {
            let pos = y.iter().filter(|&&v| v > 0.0).count() as f64;
            y.map(|v| if v > 0.0 { (n - pos) / n } else { -pos / n })
        }
    };
    stack.norms(&rho0).unwrap().into_iter().fold(0.0, f64::max)
}

/// A synthetic instance with known informative kernels; for the squared
/// loss the target is a smooth function of the informative groups.
pub fn synth_instance(n: usize, m: usize, kind: LossKind, seed: u64) -> (GramStack, LossSpec) {
    let synth = synth_sparse_mkl(n, m, 2, seed).unwrap();
    let y = match kind {
        LossKind::Squared => {
            let x = &synth.dataset.features;
            let (a, b) = (SYNTH_GROUP * synth.informative[0], SYNTH_GROUP * synth.informative[1]);
            DVector::from_fn(n, |i, _| x[(i, a)].sin() + x[(i, b)] * x[(i, b + 1)])
        }
        _ => synth.dataset.labels.clone(),
    };
    (synth.stack, LossSpec::new(kind, y).unwrap())
}
