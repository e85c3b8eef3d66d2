//! Shipped data through load, split, bank, train, model file and back.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use spicymkl::artifact::ModelFile;
use spicymkl::data::{load, split, Format, LoadOptions, Task};
use spicymkl::ist::ist_solve;
use spicymkl::kernel::{build_kernel_bank, BankConfig};
use spicymkl::loss::{LossKind, LossSpec};
use spicymkl::solver::{train, SolverConfig};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn raw(ds: &spicymkl::data::Dataset) -> DMatrix<f64> {
    let st = ds.standardizer.as_ref().unwrap();
    DMatrix::from_fn(ds.len(), ds.dim(), |i, j| ds.features[(i, j)] * st.scale[j] + st.mean[j])
}

#[test]
fn classification_pipeline_predicts_held_out_points() {
    let ds = load(data("toy_blobs.libsvm"), Format::Libsvm, &LoadOptions::default()).unwrap();
    assert!(ds.classification);
    let (tr, te) = split(&ds, 0.75, 4).unwrap();
    let stack = build_kernel_bank(&tr.features, &BankConfig::default()).unwrap();
    let loss = LossSpec::new(LossKind::Logistic, tr.labels.clone()).unwrap();
    let model = train(&stack, &loss, &SolverConfig::with_c(0.05)).unwrap();
    assert!(model.diagnostics.converged);
    assert!(model.kernels.len() < stack.n_kernels());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ModelFile::new(&model, &stack, &tr).unwrap().save(&path).unwrap();
    let file = ModelFile::load(&path).unwrap();
    let z = file.decision_values(&raw(&te)).unwrap();
    let hits = z.iter().zip(te.labels.iter()).filter(|(z, y)| **z * **y > 0.0).count();
    assert!(hits as f64 / te.len() as f64 > 0.75, "{hits}/{}", te.len());
}

#[test]
fn regression_pipeline_beats_the_mean() {
    let options = LoadOptions {
        task: Task::Regression,
        header: true,
        n_features: None,
    };
    let ds = load(data("toy_regression.csv"), Format::Csv, &options).unwrap();
    let (tr, te) = split(&ds, 0.8, 9).unwrap();
    let stack = build_kernel_bank(&tr.features, &BankConfig::default()).unwrap();
    let loss = LossSpec::new(LossKind::Squared, tr.labels.clone()).unwrap();
    for model in [
        train(&stack, &loss, &SolverConfig::with_c(0.05)).unwrap(),
        ist_solve(&stack, &loss, 0.05, 1e-8, 50_000).unwrap(),
    ] {
        let file = ModelFile::new(&model, &stack, &tr).unwrap();
        let z = file.decision_values(&raw(&te)).unwrap();
        let mse = (z - &te.labels).norm_squared() / te.len() as f64;
        let mean = te.labels.mean();
        let var = te.labels.map(|y| (y - mean).powi(2)).sum() / te.len() as f64;
        assert!(mse < 0.2 * var, "{}: mse {mse} vs variance {var}", model.diagnostics.solver);
    }
}
