//! Comparison estimators: an iteratively reweighted least-squares sheet over
//! a discrete τ grid, and a two-step fit to local empirical quantiles.
//!
//! Like the optimizers, these expect covariates already on the x basis domain.

use serde::{Deserialize, Serialize};

use crate::constraint::{free_state, CoefficientState, SheetSpec};
use crate::error::{Result, SheetError};
use crate::loss_exact::Dataset;
use crate::model::{AffineMap, Diagnostics, Lambdas, SheetModel};
use crate::optim::{constrained_sheet_lsq, INIT_FLOOR};

/// `{0.05, 0.10, …, 0.95}`
pub fn default_tau_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

fn check_tau_grid(grid: &[f64]) -> Result<()> {
    let inside = grid.iter().all(|&t| t > 0.0 && t < 1.0);
    let increasing = grid.windows(2).all(|w| w[0] < w[1]);
    if grid.is_empty() || !inside || !increasing {
        return Err(SheetError::invalid("τ grid must be nonempty and strictly increasing inside (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlsConfig {
    pub tau_grid: Vec<f64>,
    /// Residual floor relative to the response scale.
    pub weight_floor: f64,
    pub max_iters: usize,
    /// Relative coefficient change that ends the iteration.
    pub tol: f64,
    /// Keep the sheet nondecreasing in τ through the increment constraints.
    pub monotone: bool,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            tau_grid: default_tau_grid(),
            weight_floor: 1e-6,
            max_iters: 100,
            tol: 1e-6,
            monotone: true,
        }
    }
}

/// Reweighting that turns the pinball loss into a weighted square:
/// `ρ_τ(r) = w r²` with `w = |τ − 1{r<0}| / max(|r|, floor)`.
pub fn irls_weight(r: f64, tau: f64, floor: f64) -> f64 {
    let side = if r < 0.0 { tau - 1.0 } else { tau };
    side.abs() / r.abs().max(floor)
}

/// Spread of `ys` used to scale the residual floor: the interquartile range,
/// or the standard deviation when that collapses.
fn response_scale(ys: &[f64]) -> f64 {
    let mut s = ys.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let iqr = sample_quantile(&s, 0.75) - sample_quantile(&s, 0.25);
    if iqr > 0.0 {
        return iqr;
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub fn sample_quantile(sorted: &[f64], tau: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn fit_pseudo(
    spec: &SheetSpec,
    taus: &[f64],
    xs: &[f64],
    ys: &[f64],
    weights: Option<&[f64]>,
    lambdas: &Lambdas,
    penalty_scale: f64,
    monotone: bool,
) -> Result<CoefficientState> {
    let penalty = lambdas.penalty(spec)?;
    if monotone {
        constrained_sheet_lsq(spec, taus, xs, ys, weights, penalty_scale, &penalty, INIT_FLOOR)
    } else {
        let free = crate::optim::free_sheet_lsq(spec, taus, xs, ys, weights, penalty_scale, &penalty)?;
        free_state(&free, spec.k_x())
    }
}

/// Weighted least squares over pseudo-observations `(τ_k, x_i, y_i)`, with
/// the pinball weights refreshed from the current residuals each round.
///
/// The penalty acts on the increments `β̃`, scaled by the pseudo-observation
/// count. Non-convergence is reported through the diagnostics.
pub fn fit_irls_sheet(spec: &SheetSpec, dataset: &Dataset, lambdas: &Lambdas, config: &IrlsConfig) -> Result<SheetModel> {
    check_tau_grid(&config.tau_grid)?;
    if !(config.weight_floor > 0.0 && config.tol > 0.0) {
        return Err(SheetError::invalid("IRLS weight floor and tolerance must be positive"));
    }
    let unit = &dataset.xs;
    let n = dataset.len();
    let g = config.tau_grid.len();
    let mut taus = Vec::with_capacity(n * g);
    let mut xs = Vec::with_capacity(n * g);
    let mut ys = Vec::with_capacity(n * g);
    for &t in &config.tau_grid {
        for (&x, &y) in unit.iter().zip(&dataset.ys) {
            taus.push(t);
            xs.push(x);
            ys.push(y);
        }
    }
    let floor = config.weight_floor * response_scale(&dataset.ys);
    let scale = (n * g) as f64;
    let rows: Vec<Vec<f64>> = taus
        .iter()
        .zip(&xs)
        .map(|(&t, &x)| crate::constraint::tensor_row(spec, t, x))
        .collect::<Result<_>>()?;

    // unweighted start
    let mut weights: Vec<f64> = vec![1.0; n * g];
    let mut state = fit_pseudo(spec, &taus, &xs, &ys, Some(&weights), lambdas, scale, config.monotone)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        for (k, row) in rows.iter().enumerate() {
            let fitted: f64 = row.iter().zip(&state.gamma).map(|(a, b)| a * b).sum();
            weights[k] = irls_weight(ys[k] - fitted, taus[k], floor);
        }
        let next = fit_pseudo(spec, &taus, &xs, &ys, Some(&weights), lambdas, scale, config.monotone)?;
        let change = next
            .beta_tilde
            .iter()
            .zip(&state.beta_tilde)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let size = next.beta_tilde.iter().map(|v| v.abs()).fold(0.0, f64::max);
        state = next;
        if change <= config.tol * (1.0 + size) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("IRLS stopped after {iterations} iterations without meeting the tolerance");
    }
    Ok(SheetModel {
        spec: spec.clone(),
        state,
        monotone: config.monotone,
        lambdas: *lambdas,
        x_map: AffineMap::IDENTITY,
        diagnostics: Diagnostics {
            method: "irls".into(),
            iterations,
            converged,
            stop_reason: None,
            final_loss: None,
            final_grad_norm: None,
            init_fallback: false,
        },
    })
}

/// Smallest number of observations a local window may hold.
pub const MIN_WINDOW: usize = 5;

/// Local empirical quantiles at each distinct covariate value: for every
/// `x`, the observations with `|x_j − x| ≤ span/2 · range(x)`.
///
/// Returns `(τ, x, q̂)` triples in the order distinct-x major, τ minor.
pub fn local_quantiles(dataset: &Dataset, tau_grid: &[f64], span: f64) -> Result<Vec<(f64, f64, f64)>> {
    check_tau_grid(tau_grid)?;
    if !(span > 0.0 && span <= 1.0) {
        return Err(SheetError::invalid(format!("span must lie in (0, 1], got {span}")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.xs[a].total_cmp(&dataset.xs[b]));
    let sorted_x: Vec<f64> = order.iter().map(|&i| dataset.xs[i]).collect();
    let range = sorted_x.last().copied().unwrap_or(0.0) - sorted_x.first().copied().unwrap_or(0.0);
    let half = 0.5 * span * range;
    let mut distinct = sorted_x.clone();
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() * tau_grid.len());
    for &x in &distinct {
        let start = sorted_x.partition_point(|&v| v < x - half);
        let end = sorted_x.partition_point(|&v| v <= x + half);
        if end - start < MIN_WINDOW {
            return Err(SheetError::InsufficientData(format!(
                "window around x = {x} holds {} points (need {MIN_WINDOW})",
                end - start
            )));
        }
        let mut window: Vec<f64> = order[start..end].iter().map(|&i| dataset.ys[i]).collect();
        window.sort_by(|a, b| a.total_cmp(b));
        for &t in tau_grid {
            out.push((t, x, sample_quantile(&window, t)));
        }
    }
    Ok(out)
}

pub const DEFAULT_SPAN: f64 = 0.4;

/// Local empirical quantiles followed by a constrained least-squares sheet
/// through them.
pub fn fit_two_step(
    spec: &SheetSpec,
    dataset: &Dataset,
    lambdas: &Lambdas,
    tau_grid: &[f64],
    span: f64,
) -> Result<SheetModel> {
    let pseudo = local_quantiles(dataset, tau_grid, span)?;
    let taus: Vec<f64> = pseudo.iter().map(|p| p.0).collect();
    let xs: Vec<f64> = pseudo.iter().map(|p| p.1).collect();
    let qs: Vec<f64> = pseudo.iter().map(|p| p.2).collect();
    let state = fit_pseudo(spec, &taus, &xs, &qs, None, lambdas, pseudo.len() as f64, true)?;
    Ok(SheetModel {
        spec: spec.clone(),
        state,
        monotone: true,
        lambdas: *lambdas,
        x_map: AffineMap::IDENTITY,
        diagnostics: Diagnostics {
            method: "two_step".into(),
            iterations: 1,
            converged: true,
            stop_reason: None,
            final_loss: None,
            final_grad_norm: None,
            init_fallback: false,
        },
    })
}
