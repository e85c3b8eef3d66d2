//! Datasets: libsvm and CSV loading, train/test splitting with
//! standardization, and synthetic generators.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::{compute_gram, FeatureSubset, GramStack, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Libsvm,
    Csv,
}

impl FromStr for Format {
    type Err = MklError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "libsvm" | "svmlight" => Ok(Format::Libsvm),
            "csv" => Ok(Format::Csv),
            other => Err(MklError::Config(format!("unknown data format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Classification when the labels are integers with at most two values.
    #[default]
    Auto,
    Classification,
    Regression,
}

/// The two raw label values mapped to `-1` and `+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub negative: f64,
    pub positive: f64,
}

/// Per-feature affine map `x -> (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and (population) standard deviation of each column; constant
    /// columns get scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(MklError::Contract(format!(
                "data has {} features, standardizer expects {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x d`
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub names: Option<Vec<String>>,
    pub provenance: String,
    pub classification: bool,
    pub label_map: Option<LabelMap>,
    /// Set when `features` have been standardized.
    pub standardizer: Option<Standardizer>,
    /// Row of each sample in the dataset this one was derived from.
    pub source_rows: Vec<usize>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>, classification: bool, provenance: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            source_rows: (0..features.nrows()).collect(),
            features,
            labels,
            names: None,
            provenance: provenance.into(),
            classification,
            label_map: None,
            standardizer: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(MklError::Input(format!("need at least 2 samples, got {}", self.len())));
        }
        if self.labels.len() != self.len() {
            return Err(MklError::Input(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.len()
            )));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(MklError::Input(format!(
                "non-finite feature at row {}, column {}",
                pos % self.len(),
                pos / self.len()
            )));
        }
        if self.labels.iter().any(|v| !v.is_finite()) {
            return Err(MklError::Input("non-finite label".into()));
        }
        if self.classification && self.labels.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(MklError::Input("classification labels must be -1 or +1".into()));
        }
        Ok(())
    }

    fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: self.labels.select_rows(rows),
            names: self.names.clone(),
            provenance: self.provenance.clone(),
            classification: self.classification,
            label_map: self.label_map,
            standardizer: self.standardizer.clone(),
            source_rows: rows.iter().map(|&r| self.source_rows[r]).collect(),
        }
    }
}

/// Options for [`load`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub task: Task,
    /// CSV only: the first line holds column names.
    pub header: bool,
    /// libsvm only: minimum feature dimension.
    pub n_features: Option<usize>,
}

pub fn load(path: impl AsRef<Path>, format: Format, options: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut ds = parse(&text, format, options)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

pub fn parse(text: &str, format: Format, options: &LoadOptions) -> Result<Dataset> {
    let (rows, raw_labels, names) = match format {
        Format::Libsvm => parse_libsvm(text, options.n_features)?,
        Format::Csv => parse_csv(text, options.header)?,
    };
    if rows.is_empty() {
        return Err(MklError::Input("no samples in input".into()));
    }
    let d = rows[0].len();
    let n = rows.len();
    let features = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let (labels, classification, label_map) = resolve_labels(&raw_labels, options.task)?;
    let mut ds = Dataset::new(features, labels, classification, "inline")?;
    ds.names = names;
    ds.label_map = label_map;
    Ok(ds)
}

type Parsed = (Vec<Vec<f64>>, Vec<f64>, Option<Vec<String>>);

fn parse_number(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| MklError::Parse {
        line,
        message: format!("invalid {what} '{tok}'"),
    })?;
    if !v.is_finite() {
        return Err(MklError::Parse {
            line,
            message: format!("non-finite {what} '{tok}'"),
        });
    }
    Ok(v)
}

fn parse_libsvm(text: &str, n_features: Option<usize>) -> Result<Parsed> {
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = n_features.unwrap_or(0);
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let label = parse_number(toks.next().expect("non-empty line"), line, "label")?;
        let mut entries = Vec::new();
        let mut last = 0;
        for tok in toks {
            let (idx, val) = tok.split_once(':').ok_or_else(|| MklError::Parse {
                line,
                message: format!("expected index:value, got '{tok}'"),
            })?;
            if idx == "qid" {
                continue;
            }
            let idx: usize = idx.parse().map_err(|_| MklError::Parse {
                line,
                message: format!("invalid feature index '{idx}'"),
            })?;
            if idx == 0 || idx <= last {
                return Err(MklError::Parse {
                    line,
                    message: format!("feature indices must be 1-based and increasing, got {idx}"),
                });
            }
            last = idx;
            entries.push((idx - 1, parse_number(val, line, "feature value")?));
        }
        dim = dim.max(last);
        sparse.push(entries);
        labels.push(label);
    }
    let rows = sparse
        .into_iter()
        .map(|entries| {
            let mut row = vec![0.0; dim];
            for (j, v) in entries {
                row[j] = v;
            }
            row
        })
        .collect();
    Ok((rows, labels, None))
}

fn parse_csv(text: &str, header: bool) -> Result<Parsed> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let names = if header {
        let h = reader
            .headers()
            .map_err(|e| MklError::Parse { line: 1, message: e.to_string() })?;
        Some(h.iter().skip(1).map(str::to_string).collect())
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| MklError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(MklError::Parse {
                line,
                message: "expected a label and at least one feature".into(),
            });
        }
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(MklError::Parse {
                line,
                message: format!("expected {} fields, got {}", width.unwrap_or(0), record.len()),
            });
        }
        labels.push(parse_number(&record[0], line, "label")?);
        rows.push(
            record
                .iter()
                .skip(1)
                .map(|t| parse_number(t, line, "feature value"))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((rows, labels, names))
}

/// Decides classification vs regression and maps two-valued labels to
/// `-1/+1` (smaller value to `-1`).
fn resolve_labels(raw: &[f64], task: Task) -> Result<(DVector<f64>, bool, Option<LabelMap>)> {
    let mut distinct: Vec<f64> = raw.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let integral = raw.iter().all(|v| v.fract() == 0.0);
    let classification = match task {
        Task::Regression => false,
        Task::Classification => {
            if distinct.len() > 2 {
                return Err(MklError::Input(format!(
                    "classification needs at most 2 label values, found {}",
                    distinct.len()
                )));
            }
            true
        }
        Task::Auto => integral && distinct.len() <= 2,
    };
    if !classification {
        return Ok((DVector::from_column_slice(raw), false, None));
    }
    let map = match distinct.as_slice() {
        [lo, hi] => LabelMap {
            negative: *lo,
            positive: *hi,
        },
        [v] if *v > 0.0 => LabelMap {
            negative: f64::NAN,
            positive: *v,
        },
        [v] => LabelMap {
            negative: *v,
            positive: f64::NAN,
        },
        _ => unreachable!("at least one label"),
    };
    let labels = DVector::from_iterator(raw.len(), raw.iter().map(|&v| if v == map.positive { 1.0 } else { -1.0 }));
    let identity = map.negative == -1.0 && map.positive == 1.0;
    Ok((labels, true, (!identity).then_some(map)))
}

fn fmt_label(ds: &Dataset, v: f64) -> String {
    if ds.classification {
        if v > 0.0 { "+1".into() } else { "-1".into() }
    } else {
        format!("{v:?}")
    }
}

/// libsvm text; zeros are omitted except the last feature of the first row,
/// which is always written so that the dimension survives a reload.
pub fn to_libsvm_string(ds: &Dataset) -> String {
    let mut out = String::new();
    let d = ds.dim();
    for i in 0..ds.len() {
        out.push_str(&fmt_label(ds, ds.labels[i]));
        for j in 0..d {
            let v = ds.features[(i, j)];
            if v != 0.0 || (i == 0 && j + 1 == d) {
                write!(out, " {}:{v:?}", j + 1).expect("writing to a String");
            }
        }
        out.push('\n');
    }
    out
}

pub fn to_csv_string(ds: &Dataset, header: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| MklError::Serde(e.to_string());
    if header {
        let names: Vec<String> = match &ds.names {
            Some(n) => n.clone(),
            None => (0..ds.dim()).map(|j| format!("x{}", j + 1)).collect(),
        };
        w.write_record(std::iter::once("label".to_string()).chain(names)).map_err(csv_err)?;
    }
    for i in 0..ds.len() {
        let row = std::iter::once(fmt_label(ds, ds.labels[i]))
            .chain((0..ds.dim()).map(|j| format!("{:?}", ds.features[(i, j)])));
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| MklError::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MklError::Serde(e.to_string()))
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>, format: Format, header: bool) -> Result<()> {
    let text = match format {
        Format::Libsvm => to_libsvm_string(ds),
        Format::Csv => to_csv_string(ds, header)?,
    };
    fs::write(path, text)?;
    Ok(())
}

/// Seeded random split into `round(fraction N)` training and the remaining
/// test samples. Both parts are standardized with training statistics.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MklError::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = ds.len();
    let n_train = ((fraction * n as f64).round() as usize).min(n - 1);
    if n_train < 2 {
        return Err(MklError::Input(format!("split leaves {n_train} training samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, te) = idx.split_at(n_train);
    let mut train = ds.subset(tr);
    let mut test = ds.subset(te);
    let st = Standardizer::fit(&train.features);
    train.features = st.apply(&train.features)?;
    test.features = st.apply(&test.features)?;
    train.standardizer = Some(st.clone());
    test.standardizer = Some(st);
    Ok((train, test))
}

/// Standardizes a whole dataset with its own statistics.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let st = Standardizer::fit(&ds.features);
    let mut out = ds.clone();
    out.features = st.apply(&ds.features)?;
    out.standardizer = Some(st);
    Ok(out)
}

/// A synthetic MKL instance with known relevant kernels.
#[derive(Debug, Clone)]
pub struct SynthProblem {
    pub dataset: Dataset,
    pub stack: GramStack,
    pub specs: Vec<KernelSpec>,
    /// Kernels whose features determine the labels.
    pub informative: Vec<usize>,
}

/// Features per kernel group in [`synth_sparse_mkl`].
pub const SYNTH_GROUP: usize = 2;

/// `M` groups of two standard-normal features with one Gaussian kernel
/// (`sigma = 1`) per group. Each of the `n_informative` chosen groups gets a
/// random sum of Gaussian bumps, scaled to unit variance; the labels are the
/// sign of their total, split at its median so that the classes are
/// balanced. All other groups are pure noise.
pub fn synth_sparse_mkl(n: usize, m: usize, n_informative: usize, seed: u64) -> Result<SynthProblem> {
    if n_informative > m || m == 0 {
        return Err(MklError::Config(format!(
            "need 0 < M and n_informative <= M, got M = {m}, n_informative = {n_informative}"
        )));
    }
    if n < 2 {
        return Err(MklError::Input("need at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = SYNTH_GROUP * m;
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut informative = sample(&mut rng, m, n_informative).into_vec();
    informative.sort_unstable();

    let mut f = DVector::<f64>::zeros(n);
    for &g in &informative {
        let cols = [SYNTH_GROUP * g, SYNTH_GROUP * g + 1];
        let mut part = DVector::<f64>::zeros(n);
        for _ in 0..5 {
            let center: Vec<f64> = (0..SYNTH_GROUP).map(|_| rng.sample(StandardNormal)).collect();
            let w: f64 = rng.sample(StandardNormal);
            for i in 0..n {
                let r2: f64 = cols.iter().zip(&center).map(|(&c, &mu)| (x[(i, c)] - mu).powi(2)).sum();
                part[i] += w * (-0.5 * r2).exp();
            }
        }
        // every informative group carries the same share of the signal
        let mean = part.mean();
        part.add_scalar_mut(-mean);
        let sd = (part.norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            f += part / sd;
        }
    }
    let mut sorted: Vec<f64> = f.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(n - 1) / 2] + sorted[n / 2]);
    let y = f.map(|v| if v > median { 1.0 } else { -1.0 });

    let specs: Vec<KernelSpec> = (0..m)
        .map(|g| KernelSpec::gaussian(1.0, FeatureSubset::Indices((SYNTH_GROUP * g..SYNTH_GROUP * (g + 1)).collect())))
        .collect();
    let stack = GramStack::new(specs.iter().map(|s| compute_gram(s, &x)).collect::<Result<Vec<_>>>()?)?;
    let dataset = Dataset::new(x, y, true, format!("synth_sparse_mkl(n={n}, m={m}, informative={n_informative}, seed={seed})"))?;
    Ok(SynthProblem {
        dataset,
        stack,
        specs,
        informative,
    })
}

/// Two Gaussian classes in `d` dimensions whose means differ by
/// `separation` along the first axis, plus a quadratic boundary component on
/// the second axis.
pub fn toy_blobs(n: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if d < 2 {
        return Err(MklError::Config("toy_blobs needs d >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let x = DMatrix::from_fn(n, d, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        match j {
            0 => z + 0.5 * separation * y[i],
            1 => z * if y[i] > 0.0 { 0.6 } else { 1.4 },
            _ => z,
        }
    });
    Dataset::new(x, y, true, format!("toy_blobs(n={n}, d={d}, sep={separation}, seed={seed})"))
}

/// Noisy concentric circles in the first two of `d` dimensions.
pub fn toy_circles(n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if d < 2 {
        return Err(MklError::Config("toy_circles needs d >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = if y[i] > 0.0 { 1.0 } else { 2.0 };
        x[(i, 0)] = radius * angle.cos() + noise * rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = radius * angle.sin() + noise * rng.sample::<f64, _>(StandardNormal);
        for j in 2..d {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Dataset::new(x, y, true, format!("toy_circles(n={n}, d={d}, noise={noise}, seed={seed})"))
}
