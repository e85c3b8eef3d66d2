//! Timing sweeps over the number of kernels or samples on random-width
//! Gaussian banks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{standardize, toy_circles};
use crate::error::{MklError, Result};
use crate::ist::ist_solve;
use crate::kernel::random_kernel_bank;
use crate::loss::{LossKind, LossSpec};
use crate::solver::{train, MklModel, SolverConfig, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Spicy,
    Ist,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Spicy => "spicy",
            SolverKind::Ist => "ist",
        })
    }
}

impl FromStr for SolverKind {
    type Err = MklError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spicy" | "spicymkl" => Ok(SolverKind::Spicy),
            "ist" => Ok(SolverKind::Ist),
            other => Err(MklError::Config(format!("unknown solver '{other}' (expected spicy or ist)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Kernels,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub repetitions: usize,
    pub solvers: Vec<SolverKind>,
    pub loss: LossKind,
    pub c: f64,
    /// Sample count when sweeping over kernels.
    pub n_samples: usize,
    /// Kernel count when sweeping over samples.
    pub n_kernels: usize,
    pub n_features: usize,
    pub seed: u64,
    pub outer_tol: f64,
    pub ist_tol: f64,
    pub ist_max_iter: usize,
    /// Runs whose Gram bank would exceed this many bytes are skipped and
    /// recorded as failures.
    pub memory_budget_bytes: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            axis: SweepAxis::Kernels,
            values: vec![50, 200, 800],
            repetitions: 3,
            solvers: vec![SolverKind::Spicy],
            loss: LossKind::Logistic,
            c: 0.05,
            n_samples: 200,
            n_kernels: 100,
            n_features: 10,
            seed: 0,
            outer_tol: 0.01,
            ist_tol: 1e-6,
            ist_max_iter: 20_000,
            memory_budget_bytes: 3 << 30,
        }
    }
}

impl BenchSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: BenchSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.contains(&0) {
            return Err(MklError::Config("sweep values must be nonempty and positive".into()));
        }
        if self.repetitions == 0 || self.solvers.is_empty() {
            return Err(MklError::Config("need at least one repetition and one solver".into()));
        }
        if !(self.c > 0.0) {
            return Err(MklError::Config(format!("C must be positive, got {}", self.c)));
        }
        if self.n_features < 2 {
            return Err(MklError::Config("bench data needs at least 2 features".into()));
        }
        if self.solvers.contains(&SolverKind::Ist) && self.loss == LossKind::Hinge {
            return Err(MklError::Config("the ist solver does not support the hinge loss".into()));
        }
        Ok(())
    }

    fn shape(&self, value: usize) -> (usize, usize) {
        match self.axis {
            SweepAxis::Kernels => (self.n_samples, value),
            SweepAxis::Samples => (value, self.n_kernels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub solver: SolverKind,
    pub value: usize,
    pub n_samples: usize,
    pub n_kernels: usize,
    pub rep: usize,
    pub seconds: f64,
    pub active_kernels: usize,
    pub final_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub solver: SolverKind,
    pub value: usize,
    pub runs: usize,
    pub failures: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub mean_active_kernels: f64,
}

/// One point of a gap-versus-time trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTracePoint {
    pub solver: SolverKind,
    pub value: usize,
    pub rep: usize,
    pub iter: usize,
    pub seconds: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchResults {
    pub rows: Vec<BenchRow>,
    pub aggregate: Vec<BenchAggregate>,
    pub traces: Vec<BenchTracePoint>,
}

/// Trains `solver` on the generated problem of size `value`, repetition
/// `rep`. Only the solver call is timed.
pub fn run_one(spec: &BenchSpec, solver: SolverKind, value: usize, rep: usize) -> Result<(MklModel, f64)> {
    let (n, m) = spec.shape(value);
    let bytes = (m as u64).saturating_mul((n * n) as u64).saturating_mul(8);
    if bytes > spec.memory_budget_bytes {
        return Err(MklError::Config(format!(
            "kernel bank needs {bytes} bytes, budget is {}",
            spec.memory_budget_bytes
        )));
    }
    let seed = spec.seed.wrapping_add(1000 * rep as u64);
    let ds = standardize(&toy_circles(n, spec.n_features, 0.2, seed)?)?;
    let labels = match spec.loss {
        LossKind::Squared => ds.features.column(0).map(|v| v.sin()).into_owned(),
        _ => ds.labels.clone(),
    };
    let stack = random_kernel_bank(&ds.features, m, seed.wrapping_add(1))?;
    let loss = LossSpec::new(spec.loss, labels)?;
    let start = Instant::now();
    let model = match solver {
        SolverKind::Spicy => {
            let config = SolverConfig {
                outer_tol: spec.outer_tol,
                ..SolverConfig::with_c(spec.c)
            };
            train(&stack, &loss, &config)?
        }
        SolverKind::Ist => ist_solve(&stack, &loss, spec.c, spec.ist_tol, spec.ist_max_iter)?,
    };
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Runs the whole sweep. Failed runs are recorded and the sweep continues.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResults> {
    spec.validate()?;
    let mut out = BenchResults::default();
    for &value in &spec.values {
        for &solver in &spec.solvers {
            for rep in 0..spec.repetitions {
                let (n, m) = spec.shape(value);
                let row = match run_one(spec, solver, value, rep) {
                    Ok((model, seconds)) => {
                        let d = &model.diagnostics;
                        out.traces.extend(d.trace.iter().map(|t: &TraceRecord| BenchTracePoint {
                            solver,
                            value,
                            rep,
                            iter: t.iter,
                            seconds: t.seconds,
                            rel_gap: t.rel_gap,
                        }));
                        BenchRow {
                            solver,
                            value,
                            n_samples: n,
                            n_kernels: m,
                            rep,
                            seconds,
                            active_kernels: model.kernels.len(),
                            final_gap: d.final_gap,
                            iterations: d.outer_iterations,
                            converged: d.converged,
                            error: None,
                        }
                    }
                    Err(e) => {
                        warn!("{solver} at {value} (rep {rep}) failed: {e}");
                        BenchRow {
                            solver,
                            value,
                            n_samples: n,
                            n_kernels: m,
                            rep,
                            seconds: f64::NAN,
                            active_kernels: 0,
                            final_gap: f64::NAN,
                            iterations: 0,
                            converged: false,
                            error: Some(e.to_string()),
                        }
                    }
                };
                info!("{solver} value={value} rep={rep}: {:.3}s", row.seconds);
                out.rows.push(row);
            }
            out.aggregate.push(aggregate(&out.rows, solver, value));
        }
    }
    Ok(out)
}

fn aggregate(rows: &[BenchRow], solver: SolverKind, value: usize) -> BenchAggregate {
    let group: Vec<&BenchRow> = rows.iter().filter(|r| r.solver == solver && r.value == value).collect();
    let ok: Vec<&BenchRow> = group.iter().copied().filter(|r| r.error.is_none()).collect();
    let k = ok.len() as f64;
    let mean = ok.iter().map(|r| r.seconds).sum::<f64>() / k;
    let var = if ok.len() > 1 {
        ok.iter().map(|r| (r.seconds - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    BenchAggregate {
        solver,
        value,
        runs: group.len(),
        failures: group.len() - ok.len(),
        mean_seconds: mean,
        std_seconds: var.sqrt(),
        mean_active_kernels: ok.iter().map(|r| r.active_kernels as f64).sum::<f64>() / k,
    }
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MklError::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| MklError::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
