//! First-order fitting: least-squares initialization, stopping rules,
//! Armijo backtracking gradient descent and Barzilai-Borwein gradient descent.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::constraint::{
    cumulative_blocks_transpose, map_beta, tensor_row, CoefficientState, PenaltyConfig, SheetSpec,
};
use crate::error::{Result, SheetError};
use crate::linalg::BoundedLsq;
use crate::loss_exact::{Dataset, ExactEvaluation, ExactLoss};
use crate::loss_smoothed::{KernelSpec, QuadratureGrid, SmoothedLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Armijo sufficient-decrease fraction, in `(0, 0.5)`.
    pub armijo_alpha: f64,
    /// Backtracking shrink factor, in `(0, 1)`.
    pub shrink_beta: f64,
    /// `‖∇R‖ / ‖β‖` threshold.
    pub grad_tol: f64,
    /// Relative loss-decrease threshold.
    pub loss_tol: f64,
    pub max_iters: usize,
    /// Upper bound on Barzilai-Borwein steps.
    pub bb_max_step: f64,
    /// Gradient-norm threshold for Barzilai-Borwein; capped at `sqrt(p/n)`.
    pub bb_grad_tol: f64,
    /// Smallest step the line search may take.
    pub min_step: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            armijo_alpha: 0.1,
            shrink_beta: 0.5,
            grad_tol: 1e-4,
            loss_tol: 1e-8,
            max_iters: 5000,
            bb_max_step: 100.0,
            bb_grad_tol: 1e-4,
            min_step: 1e-10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.armijo_alpha > 0.0
            && self.armijo_alpha < 0.5
            && self.shrink_beta > 0.0
            && self.shrink_beta < 1.0
            && self.grad_tol > 0.0
            && self.loss_tol > 0.0
            && self.bb_max_step > 0.0
            && self.bb_grad_tol > 0.0
            && self.min_step > 0.0
            && self.min_step <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SheetError::invalid(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradRatio,
    LossDecrease,
    MaxIters,
    StepFloor,
    /// Barzilai-Borwein gradient-norm rule.
    GradNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Exact,
    Smoothed { kernel: KernelSpec, n_tau: usize },
}

impl LossKind {
    /// Gaussian kernel with the data-scaled default bandwidth.
    pub fn default_smoothed(dataset: &Dataset) -> Self {
        LossKind::Smoothed {
            kernel: KernelSpec::gaussian(KernelSpec::data_bandwidth(dataset)).expect("positive bandwidth"),
            n_tau: QuadratureGrid::DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub final_state: CoefficientState,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub loss_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    /// Step accepted at each iteration.
    pub step_trace: Vec<f64>,
    /// Iterations whose step was forced to `min_step`.
    pub floor_steps: Vec<usize>,
    pub h1_evaluations: usize,
    pub init_fallback: bool,
    pub wall_time: Duration,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial loss")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norm_trace.last().expect("trace holds the initial gradient")
    }
}

/// A differentiable objective in `β`. `Cache` carries whatever an evaluation
/// computed that the gradient at the same point can reuse.
pub trait Objective {
    type Cache;
    fn evaluate(&self, state: &CoefficientState) -> Result<(f64, Self::Cache)>;
    fn gradient(&self, state: &CoefficientState, cache: &Self::Cache) -> Result<Vec<f64>>;
    fn k_x(&self) -> usize;
}

impl Objective for ExactLoss<'_> {
    type Cache = ExactEvaluation;

    fn evaluate(&self, state: &CoefficientState) -> Result<(f64, ExactEvaluation)> {
        let e = ExactLoss::evaluate(self, state)?;
        Ok((e.value, e))
    }

    fn gradient(&self, state: &CoefficientState, cache: &ExactEvaluation) -> Result<Vec<f64>> {
        ExactLoss::gradient(self, state, cache)
    }

    fn k_x(&self) -> usize {
        self.workspace.spec.k_x()
    }
}

impl Objective for SmoothedLoss<'_> {
    /// `h_τ` at the evaluated state.
    type Cache = Vec<f64>;

    fn evaluate(&self, state: &CoefficientState) -> Result<(f64, Vec<f64>)> {
        let (data, h_tau) = self.data_value_and_h_tau(state)?;
        Ok((data + self.penalty.value(&state.beta), h_tau))
    }

    fn gradient(&self, state: &CoefficientState, h_tau: &Vec<f64>) -> Result<Vec<f64>> {
        self.gradient_from(state, h_tau)
    }

    fn k_x(&self) -> usize {
        self.workspace.spec.k_x()
    }
}

/// Objective over a plain closure pair; handy for checking the optimizers on
/// toy problems.
pub struct FnObjective<F, G> {
    pub value: F,
    pub grad: G,
    pub k_x: usize,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    type Cache = ();

    fn evaluate(&self, state: &CoefficientState) -> Result<(f64, ())> {
        Ok(((self.value)(&state.beta), ()))
    }

    fn gradient(&self, state: &CoefficientState, _: &()) -> Result<Vec<f64>> {
        Ok((self.grad)(&state.beta))
    }

    fn k_x(&self) -> usize {
        self.k_x
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns a stop reason when either descent rule fires.
///
/// `losses` is `(previous, current)` once a step has been taken.
pub fn stop_check(beta: &[f64], grad: &[f64], losses: Option<(f64, f64)>, config: &OptimConfig) -> Option<StopReason> {
    let g = norm(grad);
    let b = norm(beta);
    let ratio = if b > 0.0 { g / b } else { g };
    if ratio <= config.grad_tol {
        return Some(StopReason::GradRatio);
    }
    if let Some((prev, cur)) = losses {
        let change = (prev - cur).abs();
        let rel = if prev != 0.0 { change / prev.abs() } else { change };
        if rel <= config.loss_tol {
            return Some(StopReason::LossDecrease);
        }
    }
    None
}

/// Result of the least-squares starting point.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub state: CoefficientState,
    /// Local conditional-probability estimates used as the τ coordinate.
    pub tau_tilde: Vec<f64>,
    pub fallback: bool,
}

/// Positivity floor on the monotone increments in the initial fit.
pub const INIT_FLOOR: f64 = 1e-8;

/// Kernel-weighted local mid-rank of each `y_i` among observations whose
/// covariate lies within `span/2 · range(x)` of `x_i`.
pub fn local_tau_estimates(dataset: &Dataset, span: f64) -> Vec<f64> {
    let (lo, hi) = dataset
        .xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let half = 0.5 * span * (hi - lo);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.xs[a].total_cmp(&dataset.xs[b]));
    let sorted_x: Vec<f64> = order.iter().map(|&i| dataset.xs[i]).collect();
    (0..dataset.len())
        .map(|i| {
            let (xi, yi) = (dataset.xs[i], dataset.ys[i]);
            let start = sorted_x.partition_point(|&x| x < xi - half);
            let end = sorted_x.partition_point(|&x| x <= xi + half);
            let (mut num, mut den) = (0.0, 0.0);
            for &j in &order[start..end] {
                let d = if half > 0.0 { (dataset.xs[j] - xi) / half } else { 0.0 };
                let w = (1.0 - d * d).max(0.0) + 1e-12;
                den += w;
                let yj = dataset.ys[j];
                if yj < yi {
                    num += w;
                } else if yj == yi {
                    num += 0.5 * w;
                }
            }
            num / den
        })
        .collect()
}

/// Rows `(N_τ(τ_i) ⊗ N_x(x_i)) Σ` mapping increments `β̃` to fitted values.
fn increment_design(spec: &SheetSpec, taus: &[f64], xs: &[f64]) -> Result<ndarray::Array2<f64>> {
    let k1 = spec.k_x();
    let mut design = ndarray::Array2::zeros((taus.len(), spec.dim()));
    for (i, (&t, &x)) in taus.iter().zip(xs).enumerate() {
        let row = cumulative_blocks_transpose(&tensor_row(spec, t, x)?, k1);
        for (j, v) in row.into_iter().enumerate() {
            design[[i, j]] = v;
        }
    }
    Ok(design)
}

/// Fits monotone increments `β̃` to `(τ_i, x_i) ↦ y_i` by penalized least
/// squares with `β̃ ≥ floor` outside the anchor block. The penalty is
/// `penalty_scale · β̃ᵀ S β̃`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn constrained_sheet_lsq(
    spec: &SheetSpec,
    taus: &[f64],
    xs: &[f64],
    ys: &[f64],
    weights: Option<&[f64]>,
    penalty_scale: f64,
    penalty: &PenaltyConfig,
    floor: f64,
) -> Result<CoefficientState> {
    let k1 = spec.k_x();
    let design = increment_design(spec, taus, xs)?;
    let bounded: Vec<bool> = (0..spec.dim()).map(|j| j >= k1).collect();
    let pen = &penalty.s * penalty_scale;
    let sol = BoundedLsq { floor, max_outer: 0 }.solve(&design, ys, weights, &pen, &bounded)?;
    let z: Vec<f64> = sol
        .z
        .iter()
        .enumerate()
        .map(|(j, &v)| if j >= k1 { v.max(floor) } else { v })
        .collect();
    crate::constraint::state_from_beta_tilde(&z, k1)
}

/// Same fit with the increments left free of sign constraints.
pub(crate) fn free_sheet_lsq(
    spec: &SheetSpec,
    taus: &[f64],
    xs: &[f64],
    ys: &[f64],
    weights: Option<&[f64]>,
    penalty_scale: f64,
    penalty: &PenaltyConfig,
) -> Result<Vec<f64>> {
    let design = increment_design(spec, taus, xs)?;
    let pen = &penalty.s * penalty_scale;
    let bounded = vec![false; spec.dim()];
    Ok(BoundedLsq::default().solve(&design, ys, weights, &pen, &bounded)?.z)
}

/// Starting point from the constrained least-squares fit on local τ estimates.
pub fn initialize_beta(spec: &SheetSpec, dataset: &Dataset, penalty: &PenaltyConfig) -> Result<Initialization> {
    let tau_tilde = local_tau_estimates(dataset, 0.1);
    let n = dataset.len() as f64;
    match constrained_sheet_lsq(spec, &tau_tilde, &dataset.xs, &dataset.ys, None, n, penalty, INIT_FLOOR) {
        Ok(state) => Ok(Initialization {
            state,
            tau_tilde,
            fallback: false,
        }),
        Err(SheetError::NumericFailure(msg)) => {
            log::warn!("least-squares initialization failed ({msg}); starting from β = 0");
            Ok(Initialization {
                state: map_beta(&vec![0.0; spec.dim()], spec.k_x())?,
                tau_tilde,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

struct LineSearchOutcome<C> {
    state: CoefficientState,
    value: f64,
    cache: C,
    step: f64,
    floored: bool,
}

/// Armijo backtracking along `-g`. Returns `None` when even `min_step` fails
/// to keep the loss from increasing.
fn backtrack<O: Objective>(
    obj: &O,
    state: &CoefficientState,
    value: f64,
    grad: &[f64],
    config: &OptimConfig,
) -> Result<Option<LineSearchOutcome<O::Cache>>> {
    let gg = dot(grad, grad);
    let trial = |t: f64| -> Result<(CoefficientState, f64, O::Cache)> {
        let beta: Vec<f64> = state.beta.iter().zip(grad).map(|(b, g)| b - t * g).collect();
        let st = map_beta(&beta, obj.k_x())?;
        let (v, c) = obj.evaluate(&st)?;
        Ok((st, v, c))
    };
    let mut t = 1.0;
    while t >= config.min_step {
        match trial(t) {
            Ok((st, v, cache)) if v <= value - config.armijo_alpha * t * gg => {
                return Ok(Some(LineSearchOutcome {
                    state: st,
                    value: v,
                    cache,
                    step: t,
                    floored: false,
                }))
            }
            Ok(_) | Err(SheetError::NumericFailure(_)) => {}
            Err(e) => return Err(e),
        }
        t *= config.shrink_beta;
    }
    let (st, v, cache) = trial(config.min_step)?;
    if v <= value {
        Ok(Some(LineSearchOutcome {
            state: st,
            value: v,
            cache,
            step: config.min_step,
            floored: true,
        }))
    } else {
        Ok(None)
    }
}

/// Gradient descent with Armijo backtracking from a given state.
pub fn descend_backtracking<O: Objective>(obj: &O, start: CoefficientState, config: &OptimConfig) -> Result<FitReport> {
    config.validate()?;
    let clock = Instant::now();
    let mut state = start;
    let (mut value, mut cache) = obj.evaluate(&state)?;
    let mut grad = obj.gradient(&state, &cache)?;
    let mut report = FitReport {
        final_state: state.clone(),
        iterations: 0,
        stop_reason: StopReason::MaxIters,
        loss_trace: vec![value],
        grad_norm_trace: vec![norm(&grad)],
        step_trace: Vec::new(),
        floor_steps: Vec::new(),
        h1_evaluations: 1,
        init_fallback: false,
        wall_time: Duration::ZERO,
    };
    let mut losses = None;
    loop {
        if let Some(reason) = stop_check(&state.beta, &grad, losses, config) {
            report.stop_reason = reason;
            break;
        }
        if report.iterations >= config.max_iters {
            report.stop_reason = StopReason::MaxIters;
            break;
        }
        let Some(step) = backtrack(obj, &state, value, &grad, config)? else {
            report.stop_reason = StopReason::StepFloor;
            break;
        };
        report.iterations += 1;
        if step.floored {
            report.floor_steps.push(report.iterations);
        }
        losses = Some((value, step.value));
        state = step.state;
        value = step.value;
        cache = step.cache;
        grad = obj.gradient(&state, &cache)?;
        report.loss_trace.push(value);
        report.grad_norm_trace.push(norm(&grad));
        report.step_trace.push(step.step);
    }
    report.final_state = state;
    report.wall_time = clock.elapsed();
    Ok(report)
}

/// Barzilai-Borwein step from successive iterate and gradient differences:
/// `min(η1, η2, u)` when `η1 = ⟨δ,δ⟩/⟨δ,g⟩ > 0`, else `1`.
pub fn bb_step(delta: &[f64], grad_diff: &[f64], max_step: f64) -> f64 {
    let dd = dot(delta, delta);
    let dg = dot(delta, grad_diff);
    let gg = dot(grad_diff, grad_diff);
    let eta1 = dd / dg;
    if dg > 0.0 && eta1 > 0.0 && eta1.is_finite() {
        let eta2 = dg / gg;
        eta1.min(eta2).min(max_step)
    } else {
        1.0
    }
}

/// Gradient-norm threshold `min(bb_grad_tol, sqrt(p/n))`.
pub fn bb_threshold(config: &OptimConfig, p: usize, n: usize) -> f64 {
    config.bb_grad_tol.min((p as f64 / n as f64).sqrt())
}

/// Barzilai-Borwein gradient descent from a given state. The first step is
/// an Armijo backtracking step.
pub fn descend_bb<O: Objective>(
    obj: &O,
    start: CoefficientState,
    config: &OptimConfig,
    threshold: f64,
) -> Result<FitReport> {
    config.validate()?;
    let clock = Instant::now();
    let mut state = start;
    let (mut value, mut cache) = obj.evaluate(&state)?;
    let mut grad = obj.gradient(&state, &cache)?;
    let mut report = FitReport {
        final_state: state.clone(),
        iterations: 0,
        stop_reason: StopReason::MaxIters,
        loss_trace: vec![value],
        grad_norm_trace: vec![norm(&grad)],
        step_trace: Vec::new(),
        floor_steps: Vec::new(),
        h1_evaluations: 1,
        init_fallback: false,
        wall_time: Duration::ZERO,
    };
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    loop {
        if norm(&grad) < threshold {
            report.stop_reason = StopReason::GradNorm;
            break;
        }
        if report.iterations >= config.max_iters {
            report.stop_reason = StopReason::MaxIters;
            break;
        }
        let (next, step) = match &previous {
            None => {
                let Some(ls) = backtrack(obj, &state, value, &grad, config)? else {
                    report.stop_reason = StopReason::StepFloor;
                    break;
                };
                if ls.floored {
                    report.floor_steps.push(report.iterations + 1);
                }
                (ls.state, ls.step)
            }
            Some((prev_beta, prev_grad)) => {
                let delta: Vec<f64> = state.beta.iter().zip(prev_beta).map(|(a, b)| a - b).collect();
                let gdiff: Vec<f64> = grad.iter().zip(prev_grad).map(|(a, b)| a - b).collect();
                let eta = bb_step(&delta, &gdiff, config.bb_max_step);
                let beta: Vec<f64> = state.beta.iter().zip(&grad).map(|(b, g)| b - eta * g).collect();
                (map_beta(&beta, obj.k_x())?, eta)
            }
        };
        previous = Some((state.beta.clone(), grad.clone()));
        report.iterations += 1;
        state = next;
        (value, cache) = obj.evaluate(&state)?;
        grad = obj.gradient(&state, &cache)?;
        report.loss_trace.push(value);
        report.grad_norm_trace.push(norm(&grad));
        report.step_trace.push(step);
    }
    report.final_state = state;
    report.wall_time = clock.elapsed();
    Ok(report)
}

fn with_objective<T>(
    spec: &SheetSpec,
    dataset: &Dataset,
    penalty: &PenaltyConfig,
    loss_kind: LossKind,
    exact: impl FnOnce(&ExactLoss) -> Result<T>,
    smoothed: impl FnOnce(&SmoothedLoss) -> Result<T>,
) -> Result<T> {
    match loss_kind {
        LossKind::Exact => exact(&ExactLoss::new(spec, dataset, penalty)?),
        LossKind::Smoothed { kernel, n_tau } => {
            let grid = QuadratureGrid::midpoint(n_tau)?;
            smoothed(&SmoothedLoss::new(spec, dataset, penalty, kernel, grid)?)
        }
    }
}

/// Backtracking gradient descent from the least-squares starting point.
pub fn fit_backtracking(
    spec: &SheetSpec,
    dataset: &Dataset,
    penalty: &PenaltyConfig,
    config: &OptimConfig,
    loss_kind: LossKind,
) -> Result<FitReport> {
    let clock = Instant::now();
    let init = initialize_beta(spec, dataset, penalty)?;
    let start = init.state.clone();
    let mut report = with_objective(
        spec,
        dataset,
        penalty,
        loss_kind,
        |o| descend_backtracking(o, start.clone(), config),
        |o| descend_backtracking(o, start.clone(), config),
    )?;
    report.init_fallback = init.fallback;
    report.wall_time = clock.elapsed();
    Ok(report)
}

/// Barzilai-Borwein gradient descent from the least-squares starting point.
pub fn fit_bb(
    spec: &SheetSpec,
    dataset: &Dataset,
    penalty: &PenaltyConfig,
    config: &OptimConfig,
    loss_kind: LossKind,
) -> Result<FitReport> {
    if loss_kind == LossKind::Exact {
        log::warn!("Barzilai-Borwein steps on the non-smooth exact loss may fail to converge");
    }
    let clock = Instant::now();
    let init = initialize_beta(spec, dataset, penalty)?;
    let threshold = bb_threshold(config, spec.dim(), dataset.len());
    let start = init.state.clone();
    let mut report = with_objective(
        spec,
        dataset,
        penalty,
        loss_kind,
        |o| descend_bb(o, start.clone(), config, threshold),
        |o| descend_bb(o, start.clone(), config, threshold),
    )?;
    report.init_fallback = init.fallback;
    report.wall_time = clock.elapsed();
    Ok(report)
}
