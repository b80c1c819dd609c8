//! Simulation study: data generation, true quantiles, MISE and crossing
//! counts, and parallel scenario sweeps with deterministic output.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, ChiSquared, Exp1, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::baselines::{default_tau_grid, fit_irls_sheet, fit_two_step, IrlsConfig, DEFAULT_SPAN};
use crate::constraint::SheetSpec;
use crate::error::{Result, SheetError};
use crate::loss_exact::Dataset;
use crate::model::{AffineMap, Lambdas, SheetModel};
use crate::optim::{fit_backtracking, fit_bb, LossKind, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    /// `0.2 + 0.4x`
    G1,
    /// `ln x`
    G2,
    /// `sin 2πx`
    G3,
    /// `x + sin 2πx`
    G4,
    /// `sqrt(x(1−x)) sin(2π(1+ε)/(x+ε))`, `ε = 2^{-7/5}`
    G5,
}

impl Signal {
    pub const ALL: [Signal; 5] = [Signal::G1, Signal::G2, Signal::G3, Signal::G4, Signal::G5];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Signal::G1 => 0.2 + 0.4 * x,
            Signal::G2 => x.ln(),
            Signal::G3 => (2.0 * PI * x).sin(),
            Signal::G4 => x + (2.0 * PI * x).sin(),
            Signal::G5 => {
                let eps = 2f64.powf(-1.4);
                (x * (1.0 - x)).sqrt() * (2.0 * PI * (1.0 + eps) / (x + eps)).sin()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Gaussian,
    T3,
    T1,
    Laplace,
    Chisq3,
}

impl Noise {
    pub const ALL: [Noise; 5] = [Noise::Gaussian, Noise::T3, Noise::T1, Noise::Laplace, Noise::Chisq3];

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Noise::Gaussian => rng.sample(StandardNormal),
            Noise::T3 => rng.sample(StudentT::new(3.0).expect("valid degrees of freedom")),
            Noise::T1 => rng.sample(Cauchy::new(0.0, 1.0).expect("valid scale")),
            Noise::Laplace => {
                let a: f64 = rng.sample(Exp1);
                let b: f64 = rng.sample(Exp1);
                a - b
            }
            Noise::Chisq3 => rng.sample(ChiSquared::new(3.0).expect("valid degrees of freedom")),
        }
    }

    /// Inverse CDF `F⁻¹(τ)`; errors at `τ ∈ {0, 1}`, where every law here is
    /// unbounded on at least one side.
    pub fn quantile(self, tau: f64) -> Result<f64> {
        let lo_open = self != Noise::Chisq3;
        if !(tau < 1.0 && (tau > 0.0 || (!lo_open && tau == 0.0))) {
            return Err(SheetError::DomainViolation {
                value: tau,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(match self {
            Noise::Gaussian => Normal::standard().inverse_cdf(tau),
            Noise::T3 => StudentsT::new(0.0, 1.0, 3.0).expect("valid").inverse_cdf(tau),
            Noise::T1 => (PI * (tau - 0.5)).tan(),
            Noise::Laplace => {
                if tau < 0.5 {
                    (2.0 * tau).ln()
                } else {
                    -(2.0 * (1.0 - tau)).ln()
                }
            }
            Noise::Chisq3 => statrs::distribution::ChiSquared::new(3.0).expect("valid").inverse_cdf(tau),
        })
    }

    pub fn median(self) -> f64 {
        self.quantile(0.5).expect("0.5 is interior")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// `0.2`
    Constant,
    /// `0.2(1 + x)`
    Linear,
    /// `0.5(1 + (x − 1)²)`
    Quadratic,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Constant, Scale::Linear, Scale::Quadratic];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Scale::Constant => 0.2,
            Scale::Linear => 0.2 * (1.0 + x),
            Scale::Quadratic => 0.5 * (1.0 + (x - 1.0).powi(2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub signal: Signal,
    pub noise: Noise,
    pub scale: Scale,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    /// Shift the noise so its median is zero.
    #[serde(default)]
    pub center_median: bool,
}

/// One step of the splitmix64 sequence: advances `state` and returns the output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `index` derived from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut t = a ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    splitmix64(&mut t)
}

/// Stream index of the first λ-tuning replicate; further ones count down.
pub const TUNING_REPLICATE: u64 = u64::MAX;

impl Scenario {
    pub fn replicate_seed(&self, replicate: u64) -> u64 {
        derive_seed(self.seed, replicate)
    }

    fn noise_shift(&self) -> f64 {
        if self.center_median {
            self.noise.median()
        } else {
            0.0
        }
    }

    /// `Q(τ | x) = g(x) + σ(x) F⁻¹(τ)`
    pub fn true_quantile(&self, tau: f64, x: f64) -> Result<f64> {
        Ok(self.signal.eval(x) + self.scale.eval(x) * (self.noise.quantile(tau)? - self.noise_shift()))
    }

    /// Replicate `replicate` of the scenario's data.
    pub fn gen_data(&self, replicate: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.replicate_seed(replicate));
        let shift = self.noise_shift();
        let mut xs = Vec::with_capacity(self.n);
        let mut ys = Vec::with_capacity(self.n);
        while xs.len() < self.n {
            let x: f64 = rng.random();
            if x < 1e-12 {
                continue;
            }
            let e = self.noise.sample(&mut rng) - shift;
            xs.push(x);
            ys.push(self.signal.eval(x) + self.scale.eval(x) * e);
        }
        Dataset::new(xs, ys).expect("generated data is well formed")
    }
}

pub fn gen_data(scenario: &Scenario, replicate: u64) -> Dataset {
    scenario.gen_data(replicate)
}

pub fn true_quantile(scenario: &Scenario, tau: f64, x: f64) -> Result<f64> {
    scenario.true_quantile(tau, x)
}

/// `n` equally spaced cell midpoints `(j + ½)/n` of `[0, 1]`.
pub fn midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect()
}

pub const MISE_TAUS: usize = 1024;
pub const MISE_XS: usize = 10_000;
pub const TRIM: (f64, f64) = (0.05, 0.95);
const CROSSING_TOL: f64 = 1e-12;
const X_CHUNK: usize = 1000;

/// Sheet evaluator: `(taus, xs) ↦ Q̂` of shape `taus.len() × xs.len()`.
pub trait SheetEval {
    fn eval(&self, taus: &[f64], xs: &[f64]) -> Result<ndarray::Array2<f64>>;
}

impl<F> SheetEval for F
where
    F: Fn(&[f64], &[f64]) -> Result<ndarray::Array2<f64>>,
{
    fn eval(&self, taus: &[f64], xs: &[f64]) -> Result<ndarray::Array2<f64>> {
        self(taus, xs)
    }
}

impl SheetEval for SheetModel {
    fn eval(&self, taus: &[f64], xs: &[f64]) -> Result<ndarray::Array2<f64>> {
        self.grid(taus, xs)
    }
}

/// Counts neighbouring-level crossings `Q̂(τ_{j+1}, x) < Q̂(τ_j, x) − 1e-12`,
/// one per contiguous run of violating `x` for each pair `j`.
#[derive(Debug, Clone)]
struct CrossingCounter {
    in_run: Vec<bool>,
    count: usize,
}

impl CrossingCounter {
    fn new(pairs: usize) -> Self {
        CrossingCounter {
            in_run: vec![false; pairs],
            count: 0,
        }
    }

    fn feed(&mut self, q: &ndarray::Array2<f64>) {
        for c in 0..q.ncols() {
            for j in 0..self.in_run.len() {
                let bad = q[[j + 1, c]] < q[[j, c]] - CROSSING_TOL;
                if bad && !self.in_run[j] {
                    self.count += 1;
                }
                self.in_run[j] = bad;
            }
        }
    }
}

pub fn count_crossings(sheet: &impl SheetEval, taus: &[f64], xs: &[f64]) -> Result<usize> {
    if taus.is_empty() || xs.is_empty() {
        return Err(SheetError::invalid("crossing count needs nonempty grids"));
    }
    let mut counter = CrossingCounter::new(taus.len() - 1);
    for chunk in xs.chunks(X_CHUNK) {
        counter.feed(&sheet.eval(taus, chunk)?);
    }
    Ok(counter.count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiseSummary {
    pub taus: Vec<f64>,
    pub per_tau: Vec<f64>,
    /// Mean over all τ levels.
    pub full: f64,
    /// Mean over τ levels inside `[0.05, 0.95]`.
    pub trimmed: f64,
    /// RMSE of the τ = ½ curve against the true median.
    pub median_rmse: f64,
    pub crossings: usize,
}

/// MISE per τ level against the scenario's true quantiles on `n_tau × n_x`
/// midpoint grids, with crossings counted on the same grid.
pub fn mise(sheet: &impl SheetEval, scenario: &Scenario, n_tau: usize, n_x: usize) -> Result<MiseSummary> {
    if n_tau == 0 || n_x == 0 {
        return Err(SheetError::invalid("MISE grids must be nonempty"));
    }
    let taus = midpoints(n_tau);
    let xs = midpoints(n_x);
    let zq: Vec<f64> = taus
        .iter()
        .map(|&t| scenario.noise.quantile(t).map(|q| q - scenario.noise_shift()))
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; n_tau];
    let mut median_sq = 0.0;
    let mut counter = CrossingCounter::new(n_tau - 1);
    let median_noise = scenario.noise.median() - scenario.noise_shift();
    for chunk in xs.chunks(X_CHUNK) {
        let q = sheet.eval(&taus, chunk)?;
        counter.feed(&q);
        let g: Vec<f64> = chunk.iter().map(|&x| scenario.signal.eval(x)).collect();
        let s: Vec<f64> = chunk.iter().map(|&x| scenario.scale.eval(x)).collect();
        for (j, sum) in sums.iter_mut().enumerate() {
            let row = q.row(j);
            *sum += row
                .iter()
                .zip(g.iter().zip(&s))
                .map(|(qh, (gi, si))| (qh - gi - si * zq[j]).powi(2))
                .sum::<f64>();
        }
        let med = sheet.eval(&[0.5], chunk)?;
        median_sq += med
            .iter()
            .zip(g.iter().zip(&s))
            .map(|(qh, (gi, si))| (qh - gi - si * median_noise).powi(2))
            .sum::<f64>();
    }
    let per_tau: Vec<f64> = sums.iter().map(|s| s / n_x as f64).collect();
    let full = per_tau.iter().sum::<f64>() / n_tau as f64;
    let inside: Vec<f64> = taus
        .iter()
        .zip(&per_tau)
        .filter(|(t, _)| **t >= TRIM.0 && **t <= TRIM.1)
        .map(|(_, m)| *m)
        .collect();
    let trimmed = inside.iter().sum::<f64>() / inside.len().max(1) as f64;
    Ok(MiseSummary {
        taus,
        per_tau,
        full,
        trimmed,
        median_rmse: (median_sq / n_x as f64).sqrt(),
        crossings: counter.count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exact integrated loss, backtracking gradient descent.
    Exact,
    /// Smoothed integrated loss, Barzilai-Borwein gradient descent.
    Smoothed,
    /// IRLS sheet on the τ grid without the monotone constraint.
    Irls,
    /// Local empirical quantiles then a constrained least-squares sheet.
    TwoStep,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Exact, Method::Smoothed, Method::Irls, Method::TwoStep];

    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Smoothed => "smoothed",
            Method::Irls => "irls",
            Method::TwoStep => "two_step",
        }
    }

    /// Whether the method's sheets are nondecreasing in τ by construction.
    pub fn constrained(self) -> bool {
        self != Method::Irls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub k_tau: usize,
    pub order_tau: usize,
    pub k_x: usize,
    pub order_x: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            k_tau: 8,
            order_tau: 4,
            k_x: 8,
            order_x: 4,
        }
    }
}

impl BasisConfig {
    pub fn spec(&self) -> Result<SheetSpec> {
        SheetSpec::uniform(self.k_tau, self.order_tau, self.k_x, self.order_x)
    }
}

/// Everything a single fit needs besides the data and λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub basis: BasisConfig,
    pub optim: OptimConfig,
    pub irls: IrlsConfig,
    pub two_step_span: f64,
    /// Kernel bandwidth for the smoothed loss; `None` picks one from the data.
    pub bandwidth: Option<f64>,
    pub n_tau: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            basis: BasisConfig::default(),
            optim: OptimConfig::default(),
            irls: IrlsConfig {
                monotone: false,
                ..IrlsConfig::default()
            },
            two_step_span: DEFAULT_SPAN,
            bandwidth: None,
            n_tau: crate::loss_smoothed::QuadratureGrid::DEFAULT_NODES,
        }
    }
}

/// Fits `method` to data on the unit covariate scale.
pub fn fit_method(method: Method, dataset: &Dataset, lambda: f64, settings: &MethodSettings) -> Result<SheetModel> {
    let spec = settings.basis.spec()?;
    let lambdas = Lambdas::uniform(lambda);
    match method {
        Method::Exact => {
            let pen = lambdas.penalty(&spec)?;
            let r = fit_backtracking(&spec, dataset, &pen, &settings.optim, LossKind::Exact)?;
            Ok(SheetModel::from_report(&spec, &r, lambdas, AffineMap::IDENTITY, method.name()))
        }
        Method::Smoothed => {
            let pen = lambdas.penalty(&spec)?;
            let h = settings
                .bandwidth
                .unwrap_or_else(|| crate::loss_smoothed::KernelSpec::data_bandwidth(dataset));
            let kind = LossKind::Smoothed {
                kernel: crate::loss_smoothed::KernelSpec::gaussian(h)?,
                n_tau: settings.n_tau,
            };
            let r = fit_bb(&spec, dataset, &pen, &settings.optim, kind)?;
            Ok(SheetModel::from_report(&spec, &r, lambdas, AffineMap::IDENTITY, method.name()))
        }
        Method::Irls => fit_irls_sheet(&spec, dataset, &lambdas, &settings.irls),
        Method::TwoStep => fit_two_step(&spec, dataset, &lambdas, &default_tau_grid(), settings.two_step_span),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub signals: Vec<Signal>,
    pub noises: Vec<Noise>,
    pub scales: Vec<Scale>,
    pub ns: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub center_median: bool,
    pub methods: Vec<Method>,
    pub lambda_grid: Vec<f64>,
    /// Extra replicates, disjoint from the reported ones, that score each λ.
    pub tuning_replicates: usize,
    pub settings: MethodSettings,
    pub mise_taus: usize,
    pub mise_xs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            signals: Signal::ALL.to_vec(),
            noises: Noise::ALL.to_vec(),
            scales: Scale::ALL.to_vec(),
            ns: vec![64, 128, 256, 512],
            replications: 100,
            seed: 20_240_601,
            center_median: false,
            methods: Method::ALL.to_vec(),
            lambda_grid: vec![0.01],
            tuning_replicates: 5,
            settings: MethodSettings::default(),
            mise_taus: MISE_TAUS,
            mise_xs: MISE_XS,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let empty = self.signals.is_empty()
            || self.noises.is_empty()
            || self.scales.is_empty()
            || self.ns.is_empty()
            || self.methods.is_empty()
            || self.lambda_grid.is_empty();
        if empty {
            return Err(SheetError::invalid("sweep lists must be nonempty"));
        }
        if self.replications == 0 || self.tuning_replicates == 0 || self.mise_taus < 2 || self.mise_xs == 0 {
            return Err(SheetError::invalid("replications and evaluation grids must be positive"));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(SheetError::invalid("λ values must be finite and ≥ 0"));
        }
        self.settings.optim.validate()?;
        self.settings.basis.spec()?;
        Ok(())
    }

    /// Scenario grid in (signal, noise, scale, n) order, each with a seed
    /// derived from the master seed and the scenario's position.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &signal in &self.signals {
            for &noise in &self.noises {
                for &scale in &self.scales {
                    for &n in &self.ns {
                        let key = (signal as u64) << 48 | (noise as u64) << 40 | (scale as u64) << 32 | n as u64;
                        out.push(Scenario {
                            signal,
                            noise,
                            scale,
                            n,
                            replications: self.replications,
                            seed: derive_seed(self.seed, key),
                            center_median: self.center_median,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: Scenario,
    pub method: Method,
    pub replicate: usize,
    pub lambda: f64,
    /// `None` when the fit failed; `error` then holds the reason.
    pub mise: Option<MiseSummary>,
    pub iterations: usize,
    pub converged: bool,
    pub fit_seconds: f64,
    pub error: Option<String>,
}

impl SimResult {
    pub fn crossings(&self) -> Option<usize> {
        self.mise.as_ref().map(|m| m.crossings)
    }
}

fn run_one(scenario: &Scenario, method: Method, replicate: u64, lambda: f64, cfg: &SweepConfig) -> SimResult {
    let data = scenario.gen_data(replicate);
    let clock = Instant::now();
    let fitted = fit_method(method, &data, lambda, &cfg.settings);
    let fit_seconds = clock.elapsed().as_secs_f64();
    let evaluated = fitted.and_then(|m| Ok((mise(&m, scenario, cfg.mise_taus, cfg.mise_xs)?, m)));
    let mut result = SimResult {
        scenario: *scenario,
        method,
        replicate: replicate as usize,
        lambda,
        mise: None,
        iterations: 0,
        converged: false,
        fit_seconds,
        error: None,
    };
    match evaluated {
        Ok((summary, model)) => {
            result.mise = Some(summary);
            result.iterations = model.diagnostics.iterations;
            result.converged = model.diagnostics.converged;
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// λ with the smallest mean trimmed MISE over the tuning replicates; the
/// first on ties or when every candidate fails.
pub fn select_lambda(scenario: &Scenario, method: Method, cfg: &SweepConfig) -> f64 {
    if cfg.lambda_grid.len() == 1 {
        return cfg.lambda_grid[0];
    }
    let reps = cfg.tuning_replicates as u64;
    let jobs: Vec<(f64, u64)> = cfg
        .lambda_grid
        .iter()
        .flat_map(|&l| (0..reps).map(move |k| (l, k)))
        .collect();
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(l, k)| run_one(scenario, method, TUNING_REPLICATE - k, l, cfg).mise.map(|m| m.trimmed))
        .collect();
    let mut best = (f64::INFINITY, cfg.lambda_grid[0]);
    for (lambda, chunk) in cfg.lambda_grid.iter().zip(scores.chunks(reps as usize)) {
        if let Some(v) = chunk.iter().copied().collect::<Option<Vec<f64>>>() {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            if mean < best.0 {
                best = (mean, *lambda);
            }
        }
    }
    best.1
}

/// Runs every (scenario, method, replicate) job. Results are ordered by that
/// key regardless of scheduling, and fit failures are recorded in place.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SimResult>> {
    cfg.validate()?;
    let scenarios = cfg.scenarios();
    let pairs: Vec<(Scenario, Method)> = scenarios
        .iter()
        .flat_map(|s| cfg.methods.iter().map(move |&m| (*s, m)))
        .collect();
    let lambdas: Vec<f64> = pairs.par_iter().map(|(s, m)| select_lambda(s, *m, cfg)).collect();
    let jobs: Vec<(usize, u64)> = (0..pairs.len())
        .flat_map(|p| (0..cfg.replications as u64).map(move |r| (p, r)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(p, r)| run_one(&pairs[p].0, pairs[p].1, r, lambdas[p], cfg))
        .collect())
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:e}")
    }
}

pub const CSV_HEADER: [&str; 15] = [
    "signal",
    "noise",
    "scale",
    "n",
    "method",
    "constrained",
    "replicate",
    "seed",
    "lambda",
    "summary",
    "mise",
    "median_rmse",
    "crossings",
    "iterations",
    "status",
];

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Two rows per result (`full` and `trimmed` τ summaries). Timing is left
/// out so the file depends only on the configuration.
pub fn write_csv<W: Write>(results: &[SimResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| SheetError::Io {
        path: "<csv output>".into(),
        source: std::io::Error::other(e),
    };
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        let s = &r.scenario;
        for summary in ["full", "trimmed"] {
            let (mise, rmse, crossings) = match &r.mise {
                Some(m) => (
                    if summary == "full" { m.full } else { m.trimmed },
                    m.median_rmse,
                    m.crossings.to_string(),
                ),
                None => (f64::NAN, f64::NAN, String::new()),
            };
            let status = match &r.error {
                Some(e) => format!("failed: {e}"),
                None if r.converged => "ok".into(),
                None => "not_converged".into(),
            };
            w.write_record([
                enum_name(&s.signal),
                enum_name(&s.noise),
                enum_name(&s.scale),
                s.n.to_string(),
                r.method.name().to_string(),
                r.method.constrained().to_string(),
                r.replicate.to_string(),
                s.replicate_seed(r.replicate as u64).to_string(),
                fmt_float(r.lambda),
                summary.to_string(),
                fmt_float(mise),
                fmt_float(rmse),
                crossings,
                r.iterations.to_string(),
                status,
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|source| SheetError::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_json<W: Write>(results: &[SimResult], out: W) -> Result<()> {
    serde_json::to_writer(out, results).map_err(|e| SheetError::Io {
        path: "<json output>".into(),
        source: e.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failures: usize,
    pub mean_trimmed_mise: f64,
    pub total_crossings: usize,
    pub mean_fit_seconds: f64,
}

pub fn summarize(results: &[SimResult]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = results.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let rs: Vec<&SimResult> = results.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&MiseSummary> = rs.iter().filter_map(|r| r.mise.as_ref()).collect();
            MethodSummary {
                method,
                runs: rs.len(),
                failures: rs.len() - ok.len(),
                mean_trimmed_mise: ok.iter().map(|m| m.trimmed).sum::<f64>() / ok.len().max(1) as f64,
                total_crossings: ok.iter().map(|m| m.crossings).sum(),
                mean_fit_seconds: rs.iter().map(|r| r.fit_seconds).sum::<f64>() / rs.len().max(1) as f64,
            }
        })
        .collect()
}

pub fn format_summary(rows: &[MethodSummary]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>8} {:>18} {:>10} {:>12}\n",
        "method", "runs", "failed", "mean trimmed MISE", "crossings", "mean fit s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>18.6e} {:>10} {:>12.4}\n",
            r.method.name(),
            r.runs,
            r.failures,
            r.mean_trimmed_mise,
            r.total_crossings,
            r.mean_fit_seconds
        ));
    }
    s
}
