//! `qsheet` command line: `fit`, `predict` and `simulate`.
//!
//! Settings come from an optional JSON config file, patched by `--set
//! path=value` overrides and the dedicated flags, and are validated as a
//! whole (unknown keys are rejected) before anything runs.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SheetError};
use crate::loss_exact::Dataset;
use crate::loss_smoothed::{KernelKind, KernelSpec, QuadratureGrid};
use crate::model::{AffineMap, Lambdas, SheetModel};
use crate::optim::{fit_backtracking, fit_bb, LossKind, OptimConfig, StopReason};
use crate::simulation::{format_summary, run_sweep, summarize, write_csv, write_json, BasisConfig, SweepConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Backtracking,
    Bb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossChoice {
    Exact,
    Smoothed {
        #[serde(default = "default_kernel")]
        kernel: KernelKind,
        /// Chosen from the data when absent.
        #[serde(default)]
        bandwidth: Option<f64>,
        #[serde(default = "default_n_tau")]
        n_tau: usize,
    },
}

fn default_kernel() -> KernelKind {
    KernelKind::Gaussian
}

fn default_n_tau() -> usize {
    QuadratureGrid::DEFAULT_NODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Headered CSV with columns `x,y`.
    pub input: Option<PathBuf>,
    pub basis: BasisConfig,
    pub lambdas: Lambdas,
    pub loss: LossChoice,
    pub optimizer: Optimizer,
    pub optim: OptimConfig,
    pub model_file: String,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            input: None,
            basis: BasisConfig::default(),
            lambdas: Lambdas::uniform(1e-3),
            loss: LossChoice::Exact,
            optimizer: Optimizer::Backtracking,
            optim: OptimConfig::default(),
            model_file: "model.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub model: Option<PathBuf>,
    pub taus: Vec<f64>,
    /// Explicit covariate values, in data units.
    pub xs: Option<Vec<f64>>,
    /// Number of equally spaced covariate values across the model's range,
    /// used when `xs` is absent.
    pub x_grid: usize,
    pub output_file: String,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            model: None,
            taus: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            xs: None,
            x_grid: 101,
            output_file: "predictions.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub sweep: SweepConfig,
    pub csv_file: String,
    pub json_file: String,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            sweep: SweepConfig {
                lambda_grid: vec![1e-4, 1e-3, 1e-2],
                ..SweepConfig::default()
            },
            csv_file: "simulation.csv".into(),
            json_file: "simulation.json".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory; the working directory when absent.
    pub out: Option<PathBuf>,
    pub fit: FitSection,
    pub predict: PredictSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Parser)]
#[command(name = "qsheet", version, about = "Fit and evaluate non-crossing quantile sheets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set fit.basis.k_tau=10`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed for anything random.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a sheet to a CSV of `x,y` observations and write the model file.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Input CSV (overrides `fit.input`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate a fitted sheet and write `tau,x,q` rows.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Model file (overrides `predict.model`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated quantile levels.
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        /// Comma-separated covariate values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        /// Number of equally spaced covariate values over the fitted range.
        #[arg(long)]
        x_grid: Option<usize>,
    },
    /// Run a simulation sweep and write CSV, JSON and a summary table.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

fn bad(msg: impl Into<String>) -> SheetError {
    SheetError::InvalidArgument(msg.into())
}

/// Sets `path` (dot separated) in a JSON object tree to `value`.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override {assignment:?} is not of the form path=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad(format!("override path {path:?} has an empty segment")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(bad(format!("override path {path:?} passes through a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(bad(format!("override path {path:?} passes through a non-object"))),
    }
}

/// Reads, patches and validates the configuration.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let (mut root, source) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| SheetError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let v: Value = serde_json::from_str(&text).map_err(|e| SheetError::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            (v, p.display().to_string())
        }
        None => (Value::Object(Default::default()), "<defaults>".to_string()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    serde_path_to_error::deserialize(root).map_err(|e| SheetError::Parse {
        path: source,
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

/// Reads a headered `x,y` CSV.
pub fn read_xy_csv(path: &Path) -> Result<Dataset> {
    let name = path.display().to_string();
    let parse = |message: String| SheetError::Parse {
        path: name.clone(),
        message,
    };
    let file = File::open(path).map_err(|source| SheetError::Io {
        path: name.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| parse(e.to_string()))?.clone();
    let col = |want: &str| {
        headers
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| parse(format!("missing column `{want}`")))
    };
    let (ix, iy) = (col("x")?, col("y")?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse(e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            let s = record.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse(format!("row {}: {s:?} is not a finite number", line + 1)))
        };
        xs.push(field(ix)?);
        ys.push(field(iy)?);
    }
    if xs.is_empty() {
        return Err(SheetError::InsufficientData(format!("{name} holds no data rows")));
    }
    Dataset::new(xs, ys)
}

fn out_path(cfg: &RunConfig, file: &str) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|source| SheetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir.join(file))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| SheetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Fits the configured sheet to data in data units.
pub fn fit_model(section: &FitSection, data: &Dataset) -> Result<SheetModel> {
    let spec = section.basis.spec()?;
    let x_map = AffineMap::fit(&data.xs)?;
    let unit = Dataset::new(
        data.xs.iter().map(|&x| x_map.to_unit(x)).collect::<Result<_>>()?,
        data.ys.clone(),
    )?;
    let penalty = section.lambdas.penalty(&spec)?;
    let loss = match section.loss {
        LossChoice::Exact => LossKind::Exact,
        LossChoice::Smoothed { kernel, bandwidth, n_tau } => LossKind::Smoothed {
            kernel: KernelSpec::new(kernel, bandwidth.unwrap_or_else(|| KernelSpec::data_bandwidth(&unit)))?,
            n_tau,
        },
    };
    let report = match section.optimizer {
        Optimizer::Backtracking => fit_backtracking(&spec, &unit, &penalty, &section.optim, loss)?,
        Optimizer::Bb => fit_bb(&spec, &unit, &penalty, &section.optim, loss)?,
    };
    let method = match (section.loss, section.optimizer) {
        (LossChoice::Exact, Optimizer::Backtracking) => "exact_backtracking",
        (LossChoice::Exact, Optimizer::Bb) => "exact_bb",
        (LossChoice::Smoothed { .. }, Optimizer::Backtracking) => "smoothed_backtracking",
        (LossChoice::Smoothed { .. }, Optimizer::Bb) => "smoothed_bb",
    };
    Ok(SheetModel::from_report(&spec, &report, section.lambdas, x_map, method))
}

fn cmd_fit(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let input = cfg
        .fit
        .input
        .as_deref()
        .ok_or_else(|| bad("no input file: pass --input or set fit.input"))?;
    let data = read_xy_csv(input)?;
    let model = fit_model(&cfg.fit, &data)?;
    let path = out_path(cfg, &cfg.fit.model_file)?;
    model.save(&path)?;
    let d = &model.diagnostics;
    if d.stop_reason == Some(StopReason::MaxIters) {
        eprintln!("warning: iteration limit reached before the stopping rules fired");
    }
    let _ = writeln!(
        out,
        "stop reason: {}\nfinal loss: {}\niterations: {}\nmodel: {}",
        d.stop_reason.map(|r| enum_text(&r)).unwrap_or_default(),
        d.final_loss.unwrap_or(f64::NAN),
        d.iterations,
        path.display()
    );
    Ok(())
}

fn enum_text<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// `(τ, x, Q̂)` rows for the configured grid, τ-major.
pub fn predict_rows(model: &SheetModel, section: &PredictSection) -> Result<Vec<(f64, f64, f64)>> {
    if section.taus.is_empty() {
        return Err(bad("no quantile levels requested"));
    }
    if let Some(t) = section.taus.iter().find(|t| !(**t >= 0.0 && **t <= 1.0)) {
        return Err(SheetError::DomainViolation {
            value: *t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let xs = match &section.xs {
        Some(xs) if !xs.is_empty() => xs.clone(),
        Some(_) => return Err(bad("empty covariate list")),
        None => {
            if section.x_grid == 0 {
                return Err(bad("x_grid must be positive"));
            }
            let (lo, hi) = (model.x_map.lo, model.x_map.hi);
            let m = section.x_grid;
            (0..m)
                .map(|i| if m == 1 { lo } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 })
                .map(|x| x.min(hi))
                .collect()
        }
    };
    let q = model.grid(&section.taus, &xs)?;
    let mut rows = Vec::with_capacity(section.taus.len() * xs.len());
    for (i, &t) in section.taus.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            rows.push((t, x, q[[i, j]]));
        }
    }
    Ok(rows)
}

fn cmd_predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let path = cfg
        .predict
        .model
        .as_deref()
        .ok_or_else(|| bad("no model file: pass --model or set predict.model"))?;
    let model = SheetModel::load(path)?;
    let rows = predict_rows(&model, &cfg.predict)?;
    let dest = out_path(cfg, &cfg.predict.output_file)?;
    let mut w = csv::Writer::from_writer(create(&dest)?);
    let io = |e: csv::Error| SheetError::Io {
        path: dest.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    w.write_record(["tau", "x", "q"]).map_err(io)?;
    for (t, x, q) in &rows {
        w.write_record([t.to_string(), x.to_string(), q.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|source| SheetError::Io {
        path: dest.display().to_string(),
        source,
    })?;
    let _ = writeln!(out, "wrote {} rows to {}", rows.len(), dest.display());
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let sweep = &cfg.simulate.sweep;
    let results = run_sweep(sweep)?;
    let csv_path = out_path(cfg, &cfg.simulate.csv_file)?;
    write_csv(&results, std::io::BufWriter::new(create(&csv_path)?))?;
    let json_path = out_path(cfg, &cfg.simulate.json_file)?;
    write_json(&results, std::io::BufWriter::new(create(&json_path)?))?;
    let _ = write!(out, "{}", format_summary(&summarize(&results)));
    let _ = writeln!(out, "results: {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

pub fn exit_code(err: &SheetError) -> i32 {
    match err {
        SheetError::NumericFailure(_) => EXIT_NUMERIC,
        _ => EXIT_BAD_INPUT,
    }
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    if let Some(seed) = common.seed {
        overrides.push(format!("simulate.sweep.seed={seed}"));
    }
    let mut cfg = load_config(common.config.as_deref(), &overrides)?;
    if let Some(dir) = &common.out {
        cfg.out = Some(dir.clone());
    }
    Ok(cfg)
}

fn json_list(v: &[f64]) -> String {
    serde_json::to_string(v).expect("numbers serialize")
}

/// Runs the command line and returns the process exit code. Messages go to
/// `out`; errors go to standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Fit { common, input } => {
            let extra = input
                .map(|p| vec![format!("fit.input={}", Value::String(p.display().to_string()))])
                .unwrap_or_default();
            resolve(&common, extra).and_then(|cfg| cmd_fit(&cfg, out))
        }
        Command::Predict {
            common,
            model,
            tau,
            x,
            x_grid,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = model {
                extra.push(format!("predict.model={}", Value::String(m.display().to_string())));
            }
            if let Some(t) = tau {
                extra.push(format!("predict.taus={}", json_list(&t)));
            }
            if let Some(x) = x {
                extra.push(format!("predict.xs={}", json_list(&x)));
            }
            if let Some(g) = x_grid {
                extra.push(format!("predict.x_grid={g}"));
            }
            resolve(&common, extra).and_then(|cfg| cmd_predict(&cfg, out))
        }
        Command::Simulate { common } => resolve(&common, Vec::new()).and_then(|cfg| cmd_simulate(&cfg, out)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
