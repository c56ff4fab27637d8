//! Command-line interface: dataset preparation, training with
//! cross-validated C, evaluation, triplet export, the scaling benchmark and
//! the verification suite.
//!
//! Exit codes: 0 success, 1 solver stall, 2 configuration or I/O error,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::{
    self, CsvOptions, Dataset, LabelColumn, SplitSpec, TripletConstraint,
};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metric::{self, LearnedMetric};
use crate::oracle;
use crate::solver::{self, HyperParams, MahalanobisMatrix, SolverState, SolverStatus};

#[derive(Parser)]
#[command(
    name = "trimetric",
    about = "Learn a Mahalanobis distance from proximity triplets and evaluate it with k-NN",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train models over one or more split seeds, writing model, trace and
    /// split files plus a summary table.
    Train(DataArgs),
    /// Evaluate trained models (and the Euclidean baseline) on their test
    /// splits, writing a report table.
    Eval(EvalArgs),
    /// Write the generated training triplets as CSV.
    GenTriplets(GenArgs),
    /// Time training on synthetic triplets across dimensionalities.
    BenchScaling(BenchArgs),
    /// Run the oracle verification suite.
    Verify,
}

/// Data-pipeline and solver options shared by the data-driven subcommands.
/// Every flag overrides the matching config-file key.
#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Config file: JSON or `key=value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset format: csv | libsvm.
    #[arg(long)]
    format: Option<String>,
    /// CSV label column, by header name or zero-based index.
    #[arg(long)]
    label_col: Option<String>,
    /// The CSV file has no header row.
    #[arg(long)]
    no_header: bool,
    /// Reduce to this dimension with PCA fit on the training split.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// z-score features using training-split statistics.
    #[arg(long)]
    standardize: bool,
    /// Neighbors per side when generating triplets.
    #[arg(long)]
    triplet_m: Option<usize>,
    /// Loss: squared_hinge | huber | hinge.
    #[arg(long)]
    loss: Option<String>,
    /// Huber width parameter.
    #[arg(long)]
    huber_h: Option<f64>,
    /// Fixed C; omits cross-validation.
    #[arg(long)]
    c: Option<f64>,
    /// Comma-separated C grid for validation-split selection.
    #[arg(long)]
    c_grid: Option<String>,
    /// Neighbors for k-NN classification.
    #[arg(long)]
    k: Option<usize>,
    /// Base split seed; repeat r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of split seeds to run.
    #[arg(long)]
    repeats: Option<usize>,
    /// Train/validation/test fractions, e.g. 0.7,0.15,0.15.
    #[arg(long)]
    fractions: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep per-triplet reductions in a fixed order (always on; accepted
    /// for scripting symmetry).
    #[arg(long)]
    deterministic: bool,
    /// Convergence tolerance.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Maximum outer iterations.
    #[arg(long)]
    max_outer: Option<usize>,
    /// Maximum inner iterations per outer round.
    #[arg(long)]
    max_inner: Option<usize>,
    /// Initialization: ones | leading-constraint.
    #[arg(long)]
    init: Option<String>,
    /// Allow the non-differentiable hinge loss.
    #[arg(long)]
    subgradient_unsafe: bool,
    /// Gate the inner loop on the raw leading eigenvalue instead of the
    /// conditional-gradient gap.
    #[arg(long)]
    literal_eigen_test: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory holding model_seed*.json files (or one model file).
    #[arg(long)]
    models: Option<PathBuf>,
    /// Report CSV path (default: <out>/report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Triplet CSV path (default: <out>/triplets.csv).
    #[arg(long)]
    triplets_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated dimensionalities.
    #[arg(long, default_value = "20,40,60,80,100")]
    dims: String,
    /// Number of synthetic triplets.
    #[arg(long, default_value_t = 1000)]
    triplets: usize,
    /// Timed repetitions per dimensionality.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Inner iterations per run (the fixed budget being timed).
    #[arg(long, default_value_t = 50)]
    inner_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (default: bench_scaling.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Keys accepted in config files; identical to the long flag names.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    data: Option<PathBuf>,
    format: Option<String>,
    label_col: Option<String>,
    header: Option<bool>,
    pca_dim: Option<usize>,
    standardize: Option<bool>,
    triplet_m: Option<usize>,
    loss: Option<String>,
    huber_h: Option<f64>,
    c: Option<f64>,
    c_grid: Option<String>,
    k: Option<usize>,
    seed: Option<u64>,
    repeats: Option<usize>,
    fractions: Option<String>,
    out: Option<PathBuf>,
    deterministic: Option<bool>,
    epsilon: Option<f64>,
    max_outer: Option<usize>,
    max_inner: Option<usize>,
    init: Option<String>,
    subgradient_unsafe: Option<bool>,
    literal_eigen_test: Option<bool>,
}

impl PartialConfig {
    fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())));
        }
        let mut cfg = PartialConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    i + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| {
                Error::Config(format!("{}:{}: {msg}", path.display(), i + 1))
            })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(v: &str, key: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("bad value '{v}' for key '{key}'"))
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "format" => self.format = Some(value.to_string()),
            "label_col" => self.label_col = Some(value.to_string()),
            "header" => self.header = Some(p(value, key)?),
            "pca_dim" => self.pca_dim = Some(p(value, key)?),
            "standardize" => self.standardize = Some(p(value, key)?),
            "triplet_m" => self.triplet_m = Some(p(value, key)?),
            "loss" => self.loss = Some(value.to_string()),
            "huber_h" => self.huber_h = Some(p(value, key)?),
            "c" => self.c = Some(p(value, key)?),
            "c_grid" => self.c_grid = Some(value.to_string()),
            "k" => self.k = Some(p(value, key)?),
            "seed" => self.seed = Some(p(value, key)?),
            "repeats" => self.repeats = Some(p(value, key)?),
            "fractions" => self.fractions = Some(value.to_string()),
            "out" => self.out = Some(PathBuf::from(value)),
            "deterministic" => self.deterministic = Some(p(value, key)?),
            "epsilon" => self.epsilon = Some(p(value, key)?),
            "max_outer" => self.max_outer = Some(p(value, key)?),
            "max_inner" => self.max_inner = Some(p(value, key)?),
            "init" => self.init = Some(value.to_string()),
            "subgradient_unsafe" => self.subgradient_unsafe = Some(p(value, key)?),
            "literal_eigen_test" => self.literal_eigen_test = Some(p(value, key)?),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Libsvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Ones,
    LeadingConstraint,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub format: DataFormat,
    pub label_col: LabelColumn,
    pub has_header: bool,
    pub pca_dim: Option<usize>,
    pub standardize: bool,
    pub triplet_m: usize,
    pub loss: LossKind,
    pub c: Option<f64>,
    pub c_grid: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    pub repeats: usize,
    pub fractions: [f64; 3],
    pub out: PathBuf,
    pub deterministic: bool,
    pub init: InitKind,
    pub hyper: HyperParams,
}

pub const DEFAULT_C_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{s}'")))
        })
        .collect()
}

impl RunConfig {
    fn resolve(args: &DataArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => PartialConfig::from_file(path)?,
            None => PartialConfig::default(),
        };
        let data = args
            .data
            .clone()
            .or(file.data)
            .ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
        if !data.exists() {
            return Err(Error::Config(format!(
                "dataset file not found: {}",
                data.display()
            )));
        }
        let format = match args
            .format
            .clone()
            .or(file.format)
            .unwrap_or_else(|| "csv".into())
            .as_str()
        {
            "csv" => DataFormat::Csv,
            "libsvm" => DataFormat::Libsvm,
            other => {
                return Err(Error::Config(format!(
                    "unknown format '{other}' (expected csv | libsvm)"
                )))
            }
        };
        let label_raw = args
            .label_col
            .clone()
            .or(file.label_col)
            .unwrap_or_else(|| "label".into());
        let label_col = match label_raw.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(label_raw),
        };
        let has_header = if args.no_header {
            false
        } else {
            file.header.unwrap_or(true)
        };
        let loss_name = args
            .loss
            .clone()
            .or(file.loss)
            .unwrap_or_else(|| "huber".into());
        let huber_h = args.huber_h.or(file.huber_h);
        let loss = LossKind::from_name(&loss_name, huber_h)?;
        let c = args.c.or(file.c);
        let c_grid = match args.c_grid.clone().or(file.c_grid) {
            Some(text) => parse_list(&text, "c_grid")?,
            None => DEFAULT_C_GRID.to_vec(),
        };
        if c_grid.is_empty() || c_grid.iter().any(|c| *c <= 0.0) {
            return Err(Error::Config("c_grid entries must be positive".into()));
        }
        let fractions_text = args
            .fractions
            .clone()
            .or(file.fractions)
            .unwrap_or_else(|| "0.7,0.15,0.15".into());
        let fl = parse_list(&fractions_text, "fractions")?;
        if fl.len() != 3 {
            return Err(Error::Config(format!(
                "fractions needs 3 entries, got {}",
                fl.len()
            )));
        }
        let repeats = args.repeats.or(file.repeats).unwrap_or(1);
        if repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        let init = match args
            .init
            .clone()
            .or(file.init)
            .unwrap_or_else(|| "ones".into())
            .as_str()
        {
            "ones" => InitKind::Ones,
            "leading-constraint" => InitKind::LeadingConstraint,
            other => {
                return Err(Error::Config(format!(
                    "unknown init '{other}' (expected ones | leading-constraint)"
                )))
            }
        };
        let hyper = HyperParams {
            c: c.unwrap_or(1.0),
            loss,
            max_outer: args.max_outer.or(file.max_outer).unwrap_or(500),
            max_inner: args.max_inner.or(file.max_inner).unwrap_or(100),
            tolerance: args.epsilon.or(file.epsilon).unwrap_or(1e-5),
            literal_eigen_gate: args.literal_eigen_test
                || file.literal_eigen_test.unwrap_or(false),
            allow_nonsmooth: args.subgradient_unsafe || file.subgradient_unsafe.unwrap_or(false),
            ..HyperParams::default()
        };
        hyper.validate()?;
        Ok(RunConfig {
            data,
            format,
            label_col,
            has_header,
            pca_dim: args.pca_dim.or(file.pca_dim),
            standardize: args.standardize || file.standardize.unwrap_or(false),
            triplet_m: args.triplet_m.or(file.triplet_m).unwrap_or(3),
            loss,
            c,
            c_grid,
            k: args.k.or(file.k).unwrap_or(3),
            seed: args.seed.or(file.seed).unwrap_or(0),
            repeats,
            fractions: [fl[0], fl[1], fl[2]],
            out: args.out.clone().or(file.out).unwrap_or_else(|| "runs".into()),
            deterministic: args.deterministic || file.deterministic.unwrap_or(true),
            init,
            hyper,
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.format {
            DataFormat::Csv => data::load_dense(
                &self.data,
                &CsvOptions {
                    has_header: self.has_header,
                    label_col: self.label_col.clone(),
                },
            ),
            DataFormat::Libsvm => data::load_libsvm(&self.data),
        }
    }
}

/// Split, then standardize and project using training-split statistics only.
pub fn preprocess(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<(Dataset, SplitSpec)> {
    let split = data::make_splits(ds, seed, cfg.fractions)?;
    let mut working = ds.clone();
    if cfg.standardize {
        working = data::standardize(&working, &split.train)?;
    }
    if let Some(dim) = cfg.pca_dim {
        let (projected, _) = data::apply_pca(&working, &split.train, dim)?;
        working = projected;
    }
    Ok((working, split))
}

pub fn select_rows(ds: &Dataset, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let rows = ds.samples().select(Axis(0), idx);
    let labels = idx.iter().map(|&i| ds.labels()[i]).collect();
    (rows, labels)
}

/// One per-C fit during cross-validation.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub c: f64,
    pub validation_error: f64,
    pub train_seconds: f64,
    pub status: SolverStatus,
}

/// Result of training with validation-split selection of C.
pub struct FitOutcome {
    pub state: SolverState,
    pub chosen_c: f64,
    pub grid: Vec<GridPoint>,
    pub train_seconds: f64,
}

/// Trains one model per C in `c_grid` (in parallel), scores each on the
/// validation split with k-NN, and keeps the model with the lowest
/// validation error (ties to the smaller C). A single-entry grid skips the
/// scoring shortcut but follows the same path.
pub fn train_with_c_selection(
    triplets: &[TripletConstraint],
    dim: usize,
    base: &HyperParams,
    c_grid: &[f64],
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    k: usize,
    x0: Option<&MahalanobisMatrix>,
) -> Result<FitOutcome> {
    if c_grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    let (train_rows, train_labels) = select_rows(ds, train_idx);
    let (val_rows, val_labels) = select_rows(ds, val_idx);

    type Fitted = Result<(SolverState, f64, f64)>;
    let mut results: Vec<Option<Fitted>> = (0..c_grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &c in c_grid {
            let hp = HyperParams { c, ..base.clone() };
            let (train_rows, train_labels) = (&train_rows, &train_labels);
            let (val_rows, val_labels) = (&val_rows, &val_labels);
            handles.push(scope.spawn(move || -> Fitted {
                let started = Instant::now();
                let state = solver::train(triplets, dim, &hp, x0.cloned())?;
                let seconds = started.elapsed().as_secs_f64();
                let metric = LearnedMetric::new(&state.x)?;
                let err = if val_rows.nrows() == 0 {
                    f64::NAN
                } else {
                    metric::error_rate(
                        &metric,
                        train_rows.view(),
                        train_labels,
                        val_rows.view(),
                        val_labels,
                        k.min(train_rows.nrows()),
                    )?
                };
                Ok((state, err, seconds))
            }));
        }
        for (slot, handle) in results.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("training thread panicked"));
        }
    });

    let mut grid = Vec::with_capacity(c_grid.len());
    let mut best: Option<(usize, f64)> = None;
    let mut fitted: Vec<Option<SolverState>> = Vec::with_capacity(c_grid.len());
    let mut seconds: Vec<f64> = Vec::with_capacity(c_grid.len());
    for (i, slot) in results.into_iter().enumerate() {
        let (state, err, secs) = slot.expect("all slots filled")?;
        grid.push(GridPoint {
            c: c_grid[i],
            validation_error: err,
            train_seconds: secs,
            status: state.status,
        });
        let score = if err.is_nan() { f64::INFINITY } else { err };
        // prefer non-stalled fits, then lower validation error, then smaller C
        let penalized = if state.status == SolverStatus::Stalled {
            score + 1e6
        } else {
            score
        };
        if best.map(|(_, s)| penalized < s).unwrap_or(true) {
            best = Some((i, penalized));
        }
        fitted.push(Some(state));
        seconds.push(secs);
    }
    let (idx, _) = best.expect("nonempty grid");
    Ok(FitOutcome {
        state: fitted[idx].take().expect("state present"),
        chosen_c: c_grid[idx],
        grid,
        train_seconds: seconds[idx],
    })
}

fn status_name(s: SolverStatus) -> &'static str {
    match s {
        SolverStatus::Converged => "converged",
        SolverStatus::MaxIterations => "max_iterations",
        SolverStatus::Stalled => "stalled",
    }
}

fn cmd_train(args: &DataArgs) -> Result<i32> {
    let cfg = RunConfig::resolve(args)?;
    let ds = cfg.load_dataset()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;

    let mut summary = String::from(
        "dataset,seed,loss,h,chosen_c,status,outer_iters,inner_steps,objective,rho,fw_gap,validation_error,train_seconds\n",
    );
    let mut any_stalled = false;

    for rep in 0..cfg.repeats {
        let seed = cfg.seed + rep as u64;
        let (working, split) = preprocess(&ds, &cfg, seed)?;
        let triplets = data::generate_triplets(&working, &split.train, cfg.triplet_m)?;
        let x0 = match cfg.init {
            InitKind::Ones => None,
            InitKind::LeadingConstraint => Some(solver::leading_constraint_init(
                &triplets,
                working.dim(),
                &cfg.hyper,
            )?),
        };
        let c_grid: Vec<f64> = match cfg.c {
            Some(c) => vec![c],
            None => cfg.c_grid.clone(),
        };
        let outcome = train_with_c_selection(
            &triplets,
            working.dim(),
            &cfg.hyper,
            &c_grid,
            &working,
            &split.train,
            &split.validation,
            cfg.k,
            x0.as_ref(),
        )?;
        let state = &outcome.state;
        if state.status == SolverStatus::Stalled {
            any_stalled = true;
        }

        split.write_json(&cfg.out.join(format!("split_seed{seed}.json")))?;
        solver::write_model(
            &cfg.out.join(format!("model_seed{seed}.json")),
            &state.x,
            state.rho,
            cfg.loss,
            outcome.chosen_c,
            &state.trace,
        )?;
        let mut trace_csv = String::from("iter,objective\n");
        for (i, v) in state.trace.iter().enumerate() {
            trace_csv.push_str(&format!("{i},{v:.17e}\n"));
        }
        let trace_path = cfg.out.join(format!("trace_seed{seed}.csv"));
        fs::write(&trace_path, trace_csv).map_err(|e| Error::io(&trace_path, e))?;

        let val_err = outcome
            .grid
            .iter()
            .find(|g| g.c == outcome.chosen_c)
            .map(|g| g.validation_error)
            .unwrap_or(f64::NAN);
        let h = match cfg.loss {
            LossKind::Huber { h } => format!("{h}"),
            _ => String::new(),
        };
        summary.push_str(&format!(
            "{},{seed},{},{h},{},{},{},{},{:.9e},{:.9e},{:.3e},{},{:.4}\n",
            working.name(),
            cfg.loss.name(),
            outcome.chosen_c,
            status_name(state.status),
            state.outer_iters,
            state.inner_iters,
            state.objective,
            state.rho,
            state.fw_gap,
            if val_err.is_nan() {
                String::new()
            } else {
                format!("{val_err:.6}")
            },
            outcome.train_seconds,
        ));
        log::info!(
            "seed {seed}: C = {}, status {}, objective {:.6}, {:.3}s",
            outcome.chosen_c,
            status_name(state.status),
            state.objective,
            outcome.train_seconds
        );
    }

    let summary_path = cfg.out.join("summary.csv");
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    println!("wrote {}", summary_path.display());
    Ok(if any_stalled { 1 } else { 0 })
}

fn find_model_files(models: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    if models.is_file() {
        let seed = models
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("model_seed"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        found.push((seed, models.to_path_buf()));
        return Ok(found);
    }
    let entries = fs::read_dir(models).map_err(|e| Error::io(models, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(models, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name
            .strip_prefix("model_seed")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse().ok())
        {
            found.push((seed, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

fn train_seconds_by_seed(models_dir: &Path) -> std::collections::BTreeMap<u64, String> {
    let mut map = std::collections::BTreeMap::new();
    let Ok(text) = fs::read_to_string(models_dir.join("summary.csv")) else {
        return map;
    };
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 13 {
            if let Ok(seed) = fields[1].parse::<u64>() {
                map.insert(seed, fields[12].to_string());
            }
        }
    }
    map
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let cfg = RunConfig::resolve(&args.data)?;
    let ds = cfg.load_dataset()?;
    let models_dir = args.models.clone().unwrap_or_else(|| cfg.out.clone());
    let models = if models_dir.exists() {
        find_model_files(&models_dir)?
    } else {
        Vec::new()
    };
    let timing = train_seconds_by_seed(&models_dir);

    let mut rows = String::from("dataset,split,method,error_rate,std,train_seconds\n");
    let mut euclid_errors = Vec::new();
    let mut learned_errors = Vec::new();

    let seeds: Vec<u64> = if models.is_empty() {
        (0..cfg.repeats).map(|r| cfg.seed + r as u64).collect()
    } else {
        models.iter().map(|(s, _)| *s).collect()
    };

    for (i, &seed) in seeds.iter().enumerate() {
        let (working, split) = preprocess(&ds, &cfg, seed)?;
        let (train_rows, train_labels) = select_rows(&working, &split.train);
        let (test_rows, test_labels) = select_rows(&working, &split.test);

        let euclid = LearnedMetric::euclidean(working.dim());
        let e_err = metric::error_rate(
            &euclid,
            train_rows.view(),
            &train_labels,
            test_rows.view(),
            &test_labels,
            cfg.k,
        )?;
        euclid_errors.push(e_err);
        rows.push_str(&format!(
            "{},seed{seed},euclidean,{e_err:.6},,\n",
            working.name()
        ));

        if let Some((_, path)) = models.get(i) {
            let model = solver::read_model(path)?;
            if model.dim != working.dim() {
                return Err(Error::Dimension {
                    expected: working.dim(),
                    got: model.dim,
                });
            }
            let learned = LearnedMetric::new(&model.matrix()?)?;
            let l_err = metric::error_rate(
                &learned,
                train_rows.view(),
                &train_labels,
                test_rows.view(),
                &test_labels,
                cfg.k,
            )?;
            learned_errors.push(l_err);
            let secs = timing.get(&seed).cloned().unwrap_or_default();
            rows.push_str(&format!(
                "{},seed{seed},learned,{l_err:.6},,{secs}\n",
                working.name()
            ));
        }
    }

    let name = ds.name().to_string();
    let (em, es) = mean_std(&euclid_errors);
    rows.push_str(&format!("{name},mean,euclidean,{em:.6},{es:.6},\n"));
    println!("euclidean: mean error {:.2}% (std {:.2})", em * 100.0, es * 100.0);
    if !learned_errors.is_empty() {
        let (lm, ls) = mean_std(&learned_errors);
        rows.push_str(&format!("{name},mean,learned,{lm:.6},{ls:.6},\n"));
        println!("learned:   mean error {:.2}% (std {:.2})", lm * 100.0, ls * 100.0);
    }

    let report = args
        .report
        .clone()
        .unwrap_or_else(|| cfg.out.join("report.csv"));
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(&report, rows).map_err(|e| Error::io(&report, e))?;
    println!("wrote {}", report.display());
    Ok(0)
}

fn cmd_gen_triplets(args: &GenArgs) -> Result<i32> {
    let cfg = RunConfig::resolve(&args.data)?;
    let ds = cfg.load_dataset()?;
    let (working, split) = preprocess(&ds, &cfg, cfg.seed)?;
    let triplets = data::generate_triplets(&working, &split.train, cfg.triplet_m)?;
    let mut csv = String::from("i,j,k\n");
    for t in &triplets {
        let (i, j, k) = t.source;
        csv.push_str(&format!("{i},{j},{k}\n"));
    }
    let out = args
        .triplets_out
        .clone()
        .unwrap_or_else(|| cfg.out.join("triplets.csv"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    println!("wrote {} triplets to {}", triplets.len(), out.display());
    Ok(0)
}

/// Synthetic two-blob Gaussian triplets for the scaling benchmark.
pub fn synthetic_gaussian_triplets(
    dim: usize,
    count: usize,
    seed: u64,
) -> Vec<TripletConstraint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 400usize;
    let normal = move |rng: &mut ChaCha8Rng| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut samples = Array2::zeros((n, dim));
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let class = i % 2;
        labels[i] = class;
        let offset = if class == 0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            samples[[i, j]] = normal(&mut rng) + if j < 2 { offset } else { 0.0 };
        }
    }
    let mut triplets = Vec::with_capacity(count);
    while triplets.len() < count {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || labels[i] != labels[j] || labels[i] == labels[k] {
            continue;
        }
        let u: Array1<f64> = &samples.row(i) - &samples.row(k);
        let v: Array1<f64> = &samples.row(i) - &samples.row(j);
        triplets.push(TripletConstraint::new(u, v, (i, j, k)));
    }
    triplets
}

/// One timed run at a given dimensionality: a fixed budget of inner
/// iterations with one margin step, no early exit.
pub fn bench_one(dim: usize, n_triplets: usize, inner_iters: usize, seed: u64) -> Result<(f64, usize)> {
    let triplets = synthetic_gaussian_triplets(dim, n_triplets, seed);
    let hp = HyperParams {
        c: 1.0,
        loss: LossKind::SquaredHinge,
        max_outer: 1,
        max_inner: inner_iters,
        tolerance: 1e-300,
        ..HyperParams::default()
    };
    let started = Instant::now();
    let state = solver::train(&triplets, dim, &hp, None)?;
    Ok((started.elapsed().as_secs_f64(), state.inner_iters))
}

fn cmd_bench_scaling(args: &BenchArgs) -> Result<i32> {
    if args.triplets == 0 {
        return Err(Error::Config("bench needs at least one triplet".into()));
    }
    if args.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let dims: Vec<usize> = args
        .dims
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad dims entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if dims.is_empty() {
        return Err(Error::Config("dims must be nonempty".into()));
    }

    let mut csv = String::from("dimension,seconds_per_iteration,seconds_total\n");
    for &dim in &dims {
        for rep in 0..args.repeats {
            let (total, iters) = bench_one(dim, args.triplets, args.inner_iters, args.seed + rep as u64)?;
            let per_iter = total / iters.max(1) as f64;
            csv.push_str(&format!("{dim},{per_iter:.6e},{total:.6e}\n"));
            println!(
                "dim {dim}: {total:.3}s total, {per_iter:.5}s/iteration ({iters} iterations)"
            );
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("bench_scaling.csv"));
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_verify() -> i32 {
    let checks = oracle::run_checks();
    let mut failures = 0usize;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} - {}", c.name, c.detail);
        if !c.passed {
            failures += 1;
        }
    }
    println!("{} checks, {} failed", checks.len(), failures);
    if failures == 0 {
        0
    } else {
        3
    }
}

/// Command-line entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GenTriplets(args) => cmd_gen_triplets(args),
        Command::BenchScaling(args) => cmd_bench_scaling(args),
        Command::Verify => return cmd_verify(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn key_value_config_parses() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment").unwrap();
        writeln!(f, "data = datasets/wine.csv").unwrap();
        writeln!(f, "loss = squared_hinge").unwrap();
        writeln!(f, "k = 5").unwrap();
        writeln!(f, "fractions = 0.6,0.2,0.2").unwrap();
        f.flush().unwrap();
        let cfg = PartialConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.loss.as_deref(), Some("squared_hinge"));
        assert_eq!(cfg.k, Some(5));
        assert_eq!(cfg.fractions.as_deref(), Some("0.6,0.2,0.2"));
    }

    #[test]
    fn json_config_parses() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{{\"loss\": \"huber\", \"huber_h\": 0.1, \"repeats\": 10}}").unwrap();
        f.flush().unwrap();
        let cfg = PartialConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.loss.as_deref(), Some("huber"));
        assert_eq!(cfg.huber_h, Some(0.1));
        assert_eq!(cfg.repeats, Some(10));
    }

    #[test]
    fn unknown_config_key_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "losss = huber").unwrap();
        f.flush().unwrap();
        assert!(PartialConfig::from_file(f.path()).is_err());
    }

    #[test]
    fn synthetic_triplets_have_requested_shape() {
        let triplets = synthetic_gaussian_triplets(20, 100, 1);
        assert_eq!(triplets.len(), 100);
        assert!(triplets.iter().all(|t| t.dim() == 20));
        // deterministic
        let again = synthetic_gaussian_triplets(20, 100, 1);
        assert_eq!(
            triplets[0].impostor_diff.to_vec(),
            again[0].impostor_diff.to_vec()
        );
    }
}
