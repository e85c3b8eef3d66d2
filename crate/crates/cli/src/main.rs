//! `spicymkl` command-line tool: train, predict and bench.
//!
//! Exit codes: 0 on success, 1 on numerical or convergence failure,
//! 2 on usage or input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;

use spicymkl::artifact::ModelFile;
use spicymkl::bench::{run_bench, write_csv, BenchSpec, SolverKind};
use spicymkl::data::{load, split, standardize, Dataset, Format, LoadOptions, Task};
use spicymkl::ist::ist_solve;
use spicymkl::kernel::{build_kernel_bank, BankConfig};
use spicymkl::loss::{LossKind, LossSpec};
use spicymkl::solver::{train, MklModel, SolverConfig};
use spicymkl::MklError;

#[derive(Parser)]
#[command(name = "spicymkl", version, about = "Sparse multiple kernel learning")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model per value of C.
    Train(TrainArgs),
    /// Apply a saved model to a data file.
    Predict(PredictArgs),
    /// Timing sweep over kernels or samples on generated data.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Libsvm,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Auto,
    Classification,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Logistic,
    Hinge,
    Squared,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Spicy,
    Ist,
}

#[derive(Args)]
struct DataArgs {
    /// Data file (libsvm or CSV with the label in the first column).
    #[arg(long)]
    data: PathBuf,
    /// Defaults to csv for *.csv files and libsvm otherwise.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// The CSV file starts with a header line.
    #[arg(long)]
    header: bool,
    #[arg(long, value_enum, default_value = "auto")]
    task: TaskArg,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to logistic for classification and squared for regression.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Comma-separated regularization constants.
    #[arg(long = "C", value_delimiter = ',', default_value = "0.05")]
    c: Vec<f64>,
    #[arg(long, value_enum, default_value = "spicy")]
    solver: SolverArg,
    /// Training fraction; the rest is held out for evaluation.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kernel bank configuration (TOML).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Solver configuration (TOML); C is taken from --C.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outer_tol: Option<f64>,
    #[arg(long)]
    inner_tol: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    ist_tol: f64,
    #[arg(long, default_value_t = 20_000)]
    ist_max_iter: usize,
    /// Output directory for models, traces and the summary.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Predictions CSV.
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Sweep settings (TOML); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<MklError> for Failure {
    fn from(e: MklError) -> Self {
        let code = match e {
            MklError::Numerical { .. } | MklError::Domain { .. } | MklError::InnerConvergence { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        MklError::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => run_train(&a),
        Command::Predict(a) => run_predict(&a),
        Command::Bench(a) => run_bench_cmd(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_data(args: &DataArgs, task: Task) -> CliResult<Dataset> {
    let format = match args.format {
        Some(FormatArg::Libsvm) => Format::Libsvm,
        Some(FormatArg::Csv) => Format::Csv,
        None if args.data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => Format::Csv,
        None => Format::Libsvm,
    };
    if !args.data.is_file() {
        return Err(usage(format!("data file {} not found", args.data.display())));
    }
    let options = LoadOptions {
        task,
        header: args.header,
        n_features: None,
    };
    Ok(load(&args.data, format, &options)?)
}

fn task_of(arg: TaskArg) -> Task {
    match arg {
        TaskArg::Auto => Task::Auto,
        TaskArg::Classification => Task::Classification,
        TaskArg::Regression => Task::Regression,
    }
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

/// Undoes the standardization stored on a split.
fn raw_features(ds: &Dataset) -> DMatrix<f64> {
    match &ds.standardizer {
        Some(st) => DMatrix::from_fn(ds.len(), ds.dim(), |i, j| ds.features[(i, j)] * st.scale[j] + st.mean[j]),
        None => ds.features.clone(),
    }
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    primal_obj: f64,
    dual_obj: f64,
    rel_gap: f64,
    active_kernels: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    c: f64,
    solver: String,
    loss: String,
    converged: bool,
    iterations: usize,
    final_gap: f64,
    active_kernels: usize,
    bank_size: usize,
    seconds: f64,
    /// Held-out accuracy (classification) or mean squared error (regression).
    test_metric: Option<f64>,
    model: String,
    error: Option<String>,
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    if args.c.is_empty() || args.c.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(usage("every C must be positive and finite"));
    }
    let ds = load_data(&args.data, task_of(args.data.task))?;
    let kind = match args.loss {
        Some(LossArg::Logistic) => LossKind::Logistic,
        Some(LossArg::Hinge) => LossKind::Hinge,
        Some(LossArg::Squared) => LossKind::Squared,
        None if ds.classification => LossKind::Logistic,
        None => LossKind::Squared,
    };
    if kind.is_classification() && !ds.classification {
        return Err(usage(format!("{} loss needs binary labels", kind.name())));
    }
    let solver = match args.solver {
        SolverArg::Spicy => SolverKind::Spicy,
        SolverArg::Ist => SolverKind::Ist,
    };
    if solver == SolverKind::Ist && kind == LossKind::Hinge {
        return Err(usage("the ist solver does not support the hinge loss"));
    }

    let (train_set, test_set) = match args.split {
        Some(f) => {
            let (tr, te) = split(&ds, f, args.seed)?;
            (tr, Some(te))
        }
        None => (standardize(&ds)?, None),
    };
    let bank = match &args.bank {
        Some(p) => BankConfig::from_toml_str(&read_text(p, "bank config")?)?,
        None => BankConfig::default(),
    };
    let mut config = match &args.config {
        Some(p) => SolverConfig::from_toml_str(&read_text(p, "solver config")?)?,
        None => SolverConfig::default(),
    };
    if let Some(t) = args.outer_tol {
        config.outer_tol = t;
    }
    if let Some(t) = args.inner_tol {
        config.inner_tol = t;
    }
    if let Some(n) = args.max_outer {
        config.max_outer = n;
    }

    let stack = build_kernel_bank(&train_set.features, &bank)?;
    info!("{} kernels on {} training samples", stack.n_kernels(), train_set.len());
    let loss = LossSpec::new(kind, train_set.labels.clone())?;
    fs::create_dir_all(&args.out)?;
    let test_raw = test_set.as_ref().map(raw_features);

    let mut rows = Vec::new();
    let mut failed = false;
    for &c in &args.c {
        let start = Instant::now();
        let fitted: spicymkl::Result<MklModel> = match solver {
            SolverKind::Spicy => {
                config.c = c;
                config.validate().and_then(|_| train(&stack, &loss, &config))
            }
            SolverKind::Ist => ist_solve(&stack, &loss, c, args.ist_tol, args.ist_max_iter),
        };
        let seconds = start.elapsed().as_secs_f64();
        let model = match fitted {
            Ok(m) => m,
            Err(e) => {
                let f = Failure::from(e);
                if f.code == 2 {
                    return Err(f);
                }
                warn!("C = {c}: {}", f.message);
                failed = true;
                rows.push(SummaryRow {
                    c,
                    solver: solver.to_string(),
                    loss: kind.name().into(),
                    converged: false,
                    iterations: 0,
                    final_gap: f64::NAN,
                    active_kernels: 0,
                    bank_size: stack.n_kernels(),
                    seconds,
                    test_metric: None,
                    model: String::new(),
                    error: Some(f.message),
                });
                continue;
            }
        };
        let d = &model.diagnostics;
        if !d.converged {
            warn!("C = {c}: not converged, relative gap {:.3e}", d.final_gap);
            failed = true;
        }
        let file = ModelFile::new(&model, &stack, &train_set)?;
        let model_path = args.out.join(format!("model_C{c}.json"));
        file.save(&model_path)?;
        let trace: Vec<TraceRow> = d
            .trace
            .iter()
            .map(|t| TraceRow {
                iter: t.iter,
                primal_obj: t.primal_obj,
                dual_obj: t.dual_obj,
                rel_gap: t.rel_gap,
                active_kernels: t.active_kernels,
                seconds: t.seconds,
            })
            .collect();
        write_csv(args.out.join(format!("trace_C{c}.csv")), &trace)?;

        let test_metric = match (&test_set, &test_raw) {
            (Some(te), Some(x)) => {
                let z = file.decision_values(x)?;
                Some(if kind.is_classification() {
                    let hits = z.iter().zip(te.labels.iter()).filter(|(z, y)| (**z >= 0.0) == (**y > 0.0)).count();
                    hits as f64 / te.len() as f64
                } else {
                    (z - &te.labels).norm_squared() / te.len() as f64
                })
            }
            _ => None,
        };
        rows.push(SummaryRow {
            c,
            solver: solver.to_string(),
            loss: kind.name().into(),
            converged: d.converged,
            iterations: d.outer_iterations,
            final_gap: d.final_gap,
            active_kernels: model.kernels.len(),
            bank_size: model.bank_size,
            seconds,
            test_metric,
            model: model_path.display().to_string(),
            error: None,
        });
    }
    write_csv(args.out.join("summary.csv"), &rows)?;

    let metric_name = if kind.is_classification() { "accuracy" } else { "mse" };
    println!("C\tkernels\titers\tgap\tseconds\t{metric_name}");
    for r in &rows {
        let metric = r.test_metric.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}\t{}/{}\t{}\t{:.3e}\t{:.3}\t{}",
            r.c, r.active_kernels, r.bank_size, r.iterations, r.final_gap, r.seconds, metric
        );
    }
    if failed {
        return Err(Failure {
            code: 1,
            message: "at least one model failed to converge".into(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    row: usize,
    value: f64,
    /// Predicted label for classification models, the value itself otherwise.
    prediction: f64,
}

fn run_predict(args: &PredictArgs) -> CliResult<()> {
    if !args.model.is_file() {
        return Err(usage(format!("model file {} not found", args.model.display())));
    }
    let file = ModelFile::load(&args.model)?;
    let classification = file.loss.is_classification();
    let task = match args.data.task {
        TaskArg::Auto if classification => Task::Classification,
        TaskArg::Auto => Task::Regression,
        t => task_of(t),
    };
    let ds = load_data(&args.data, task)?;
    let z = file.decision_values(&ds.features)?;
    let predictions: Vec<PredictionRow> = z
        .iter()
        .enumerate()
        .map(|(row, &value)| {
            let prediction = match (classification, file.label_map) {
                (true, Some(map)) => {
                    if value >= 0.0 {
                        map.positive
                    } else {
                        map.negative
                    }
                }
                (true, None) => value.signum(),
                (false, _) => value,
            };
            PredictionRow { row, value, prediction }
        })
        .collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&args.out, &predictions)?;

    if classification {
        // compare raw labels so the test file may use its own label coding
        let raw = |y: f64, map: Option<spicymkl::data::LabelMap>| match map {
            Some(m) if y > 0.0 => m.positive,
            Some(m) => m.negative,
            None => y,
        };
        let hits = predictions
            .iter()
            .zip(ds.labels.iter())
            .filter(|(p, y)| p.prediction == raw(**y, ds.label_map))
            .count();
        println!("accuracy\t{:.4}\t({hits}/{})", hits as f64 / ds.len() as f64, ds.len());
    } else {
        let mse = (z - &ds.labels).norm_squared() / ds.len() as f64;
        println!("mse\t{mse:.6}");
    }
    Ok(())
}

fn run_bench_cmd(args: &BenchArgs) -> CliResult<()> {
    let spec = match &args.spec {
        Some(p) => BenchSpec::from_toml_str(&read_text(p, "bench spec")?)?,
        None => BenchSpec::default(),
    };
    fs::create_dir_all(&args.out)?;
    let results = run_bench(&spec)?;
    write_csv(args.out.join("bench_results.csv"), &results.rows)?;
    write_csv(args.out.join("bench_aggregate.csv"), &results.aggregate)?;
    write_csv(args.out.join("bench_traces.csv"), &results.traces)?;
    println!("solver\tvalue\truns\tfailures\tmean_s\tstd_s\tactive");
    for a in &results.aggregate {
        println!(
            "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.1}",
            a.solver, a.value, a.runs, a.failures, a.mean_seconds, a.std_seconds, a.mean_active_kernels
        );
    }
    let failures: usize = results.aggregate.iter().map(|a| a.failures).sum();
    if failures > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failures} bench run(s) failed"),
        });
    }
    Ok(())
}
