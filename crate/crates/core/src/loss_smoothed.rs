//! Convolution-smoothed integrated quantile loss.
//!
//! The check function is replaced by `l_{h,τ}(u) = ∫ ρ_τ(v) K_h(v - u) dv`. For a
//! symmetric kernel with CDF `𝒦` and partial first moment `M(t) = ∫_{-∞}^t z K(z) dz`
//! this has the closed form
//!
//! ```text
//! l_{h,τ}(u) = τ u - u 𝒦(-u/h) - h M(-u/h),     l'_{h,τ}(u) = τ - 𝒦(-u/h).
//! ```
//!
//! The `τ u` part integrates over `τ` analytically (it produces `h_1 = H1`); the
//! rest is averaged over an equally spaced midpoint grid in `τ`. Loss and
//! gradient use the same grid, so the gradient is exact for the discretized loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::constraint::{cumulative_blocks_transpose, CoefficientState, PenaltyConfig, SheetSpec};
use crate::error::{Result, SheetError};
use crate::loss_exact::{Dataset, GradientWorkspace};
use crate::splines::LocalRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Uniform,
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SheetError::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { kind, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, bandwidth)
    }

    /// `max(0.05, sqrt(ln n / n))`
    pub fn default_bandwidth(n: usize) -> f64 {
        let n = n.max(2) as f64;
        (n.ln() / n).sqrt().max(0.05)
    }

    /// [`KernelSpec::default_bandwidth`] in units of the response: scaled by
    /// the typical conditional spread of `y` given `x`.
    pub fn data_bandwidth(dataset: &Dataset) -> f64 {
        Self::default_bandwidth(dataset.len()) * conditional_scale(dataset)
    }

    /// Standardized density `K(z)`.
    pub fn density(&self, z: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => INV_SQRT_2PI * (-0.5 * z * z).exp(),
            KernelKind::Uniform => {
                if z.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelKind::Epanechnikov => {
                if z.abs() <= 1.0 {
                    0.75 * (1.0 - z * z)
                } else {
                    0.0
                }
            }
        }
    }

    /// `𝒦(z) = ∫_{-∞}^z K`.
    pub fn cdf(&self, z: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => 0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2),
            KernelKind::Uniform => ((z + 1.0) * 0.5).clamp(0.0, 1.0),
            KernelKind::Epanechnikov => {
                let t = z.clamp(-1.0, 1.0);
                (2.0 + 3.0 * t - t * t * t) / 4.0
            }
        }
    }

    /// `M(t) = ∫_{-∞}^t z K(z) dz`.
    pub fn partial_moment(&self, t: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => -INV_SQRT_2PI * (-0.5 * t * t).exp(),
            KernelKind::Uniform => {
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    (t * t - 1.0) / 4.0
                }
            }
            KernelKind::Epanechnikov => {
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    let s = t * t - 1.0;
                    -3.0 / 16.0 * s * s
                }
            }
        }
    }

    /// Part of `l_{h,τ}(u)` that does not involve `τ`.
    fn smooth_part(&self, u: f64) -> f64 {
        let h = self.bandwidth;
        let z = -u / h;
        -u * self.cdf(z) - h * self.partial_moment(z)
    }
}

/// Median over 50 covariate windows (width 0.2·range(x)) of the local
/// interquartile range divided by 1.349, the Gaussian IQR-to-σ ratio. Falls
/// back to the global spread, then to 1, when the local estimates vanish.
pub fn conditional_scale(dataset: &Dataset) -> f64 {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.xs[a].total_cmp(&dataset.xs[b]));
    let xs: Vec<f64> = order.iter().map(|&i| dataset.xs[i]).collect();
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let half = 0.1 * (hi - lo);
    let iqr = |mut v: Vec<f64>| -> Option<f64> {
        if v.len() < 4 {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        Some(crate::baselines::sample_quantile(&v, 0.75) - crate::baselines::sample_quantile(&v, 0.25))
    };
    let mut local: Vec<f64> = (0..50)
        .filter_map(|c| {
            let x = lo + (c as f64 + 0.5) / 50.0 * (hi - lo);
            let a = xs.partition_point(|&v| v < x - half);
            let b = xs.partition_point(|&v| v <= x + half);
            iqr(order[a..b].iter().map(|&i| dataset.ys[i]).collect())
        })
        .collect();
    local.sort_by(|a, b| a.total_cmp(b));
    let candidates = [
        local.get(local.len() / 2).copied().unwrap_or(0.0),
        iqr(dataset.ys.clone()).unwrap_or(0.0),
    ];
    candidates
        .into_iter()
        .map(|v| v / 1.349)
        .find(|v| *v > 0.0 && v.is_finite())
        .unwrap_or(1.0)
}

/// `(ρ_τ * K_h)(u)`
pub fn smoothed_check(u: f64, tau: f64, kernel: &KernelSpec) -> f64 {
    tau * u + kernel.smooth_part(u)
}

/// Equally spaced midpoint rule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub const DEFAULT_NODES: usize = 256;

    pub fn midpoint(n_tau: usize) -> Result<Self> {
        if n_tau == 0 {
            return Err(SheetError::invalid("τ grid needs at least one node"));
        }
        let w = 1.0 / n_tau as f64;
        Ok(QuadratureGrid {
            nodes: (0..n_tau).map(|j| (j as f64 + 0.5) * w).collect(),
            weights: vec![w; n_tau],
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Smoothed objective bound to one dataset and penalty.
#[derive(Debug, Clone)]
pub struct SmoothedLoss<'a> {
    pub workspace: GradientWorkspace,
    pub dataset: &'a Dataset,
    pub penalty: &'a PenaltyConfig,
    pub kernel: KernelSpec,
    pub grid: QuadratureGrid,
    tau_rows: Vec<LocalRow>,
}

impl<'a> SmoothedLoss<'a> {
    pub fn new(
        spec: &SheetSpec,
        dataset: &'a Dataset,
        penalty: &'a PenaltyConfig,
        kernel: KernelSpec,
        grid: QuadratureGrid,
    ) -> Result<Self> {
        let workspace = GradientWorkspace::new(spec, dataset)?;
        Self::with_workspace(workspace, dataset, penalty, kernel, grid)
    }

    pub fn with_workspace(
        workspace: GradientWorkspace,
        dataset: &'a Dataset,
        penalty: &'a PenaltyConfig,
        kernel: KernelSpec,
        grid: QuadratureGrid,
    ) -> Result<Self> {
        if penalty.s.dim() != (workspace.spec.dim(), workspace.spec.dim()) {
            return Err(SheetError::invalid("penalty size does not match the sheet"));
        }
        let tau_rows = grid
            .nodes
            .iter()
            .map(|&t| workspace.spec.tau_basis.eval_local(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(SmoothedLoss {
            workspace,
            dataset,
            penalty,
            kernel,
            grid,
            tau_rows,
        })
    }

    fn n(&self) -> f64 {
        self.dataset.len() as f64
    }

    /// Data part of the loss, without the penalty.
    pub fn data_value(&self, state: &CoefficientState) -> Result<f64> {
        let coefs = self.workspace.curve_coefficients(state);
        let moment = &self.workspace.tau_moment;
        let mut total = 0.0;
        for (coef, &y) in coefs.iter().zip(&self.dataset.ys) {
            let linear = 0.5 * y - coef.iter().zip(moment).map(|(c, m)| c * m).sum::<f64>();
            let smooth: f64 = self
                .tau_rows
                .iter()
                .zip(&self.grid.weights)
                .map(|(row, w)| w * self.kernel.smooth_part(y - row.dot(coef)))
                .sum();
            total += linear + smooth;
        }
        let v = total / self.n();
        if !v.is_finite() {
            return Err(SheetError::numeric("smoothed loss is not finite"));
        }
        Ok(v)
    }

    pub fn value(&self, state: &CoefficientState) -> Result<f64> {
        Ok(self.data_value(state)? + self.penalty.value(&state.beta))
    }

    /// `h_τ = Σ_i Σ_k w_k 𝒦((Q(τ_k, x_i) - y_i)/h) N_τ(τ_k) ⊗ N_x(x_i)`.
    pub fn h_tau(&self, state: &CoefficientState) -> Vec<f64> {
        let coefs = self.workspace.curve_coefficients(state);
        let kt = self.workspace.spec.k_tau();
        let mut acc = vec![0.0; self.workspace.spec.dim()];
        let mut per_obs = vec![0.0; kt];
        let h = self.kernel.bandwidth;
        for (i, (coef, &y)) in coefs.iter().zip(&self.dataset.ys).enumerate() {
            per_obs.iter_mut().for_each(|v| *v = 0.0);
            for (row, w) in self.tau_rows.iter().zip(&self.grid.weights) {
                let k = w * self.kernel.cdf((row.dot(coef) - y) / h);
                for (r, v) in row.values.iter().enumerate() {
                    per_obs[row.first + r] += k * v;
                }
            }
            self.workspace.add_outer(&mut acc, &per_obs, i, 1.0);
        }
        acc
    }

    /// Data part of the loss together with `h_τ`, sharing one pass of kernel
    /// evaluations.
    pub fn data_value_and_h_tau(&self, state: &CoefficientState) -> Result<(f64, Vec<f64>)> {
        let coefs = self.workspace.curve_coefficients(state);
        let moment = &self.workspace.tau_moment;
        let kt = self.workspace.spec.k_tau();
        let h = self.kernel.bandwidth;
        let mut acc = vec![0.0; self.workspace.spec.dim()];
        let mut per_obs = vec![0.0; kt];
        let mut total = 0.0;
        for (i, (coef, &y)) in coefs.iter().zip(&self.dataset.ys).enumerate() {
            per_obs.iter_mut().for_each(|v| *v = 0.0);
            total += 0.5 * y - coef.iter().zip(moment).map(|(c, m)| c * m).sum::<f64>();
            for (row, w) in self.tau_rows.iter().zip(&self.grid.weights) {
                let u = y - row.dot(coef);
                let z = -u / h;
                let cdf = self.kernel.cdf(z);
                total += w * (-u * cdf - h * self.kernel.partial_moment(z));
                let k = w * cdf;
                for (r, v) in row.values.iter().enumerate() {
                    per_obs[row.first + r] += k * v;
                }
            }
            self.workspace.add_outer(&mut acc, &per_obs, i, 1.0);
        }
        let v = total / self.n();
        if !v.is_finite() {
            return Err(SheetError::numeric("smoothed loss is not finite"));
        }
        Ok((v, acc))
    }

    /// `(1/n) C Σᵀ (h_τ - h_1)`, the data part of the gradient.
    pub fn data_gradient(&self, state: &CoefficientState) -> Vec<f64> {
        self.data_gradient_from(state, &self.h_tau(state))
    }

    pub(crate) fn data_gradient_from(&self, state: &CoefficientState, h_tau: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = h_tau
            .iter()
            .zip(&self.workspace.h1)
            .map(|(a, b)| a - b)
            .collect();
        let back = cumulative_blocks_transpose(&diff, state.k_x());
        let n = self.n();
        back.iter()
            .zip(state.jacobian_diag())
            .map(|(v, c)| c * v / n)
            .collect()
    }

    pub fn gradient(&self, state: &CoefficientState) -> Result<Vec<f64>> {
        self.gradient_from(state, &self.h_tau(state))
    }

    /// Full gradient given `h_τ` at the same state.
    pub fn gradient_from(&self, state: &CoefficientState, h_tau: &[f64]) -> Result<Vec<f64>> {
        let pen = self.penalty.gradient(&state.beta);
        let g: Vec<f64> = self
            .data_gradient_from(state, h_tau)
            .iter()
            .zip(&pen)
            .map(|(a, b)| a + b)
            .collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SheetError::numeric("smoothed gradient is not finite"));
        }
        Ok(g)
    }

    /// `W = (1/n) Σ_i ∫ K_h(Q - y) N Nᵀ dτ` on the grid.
    pub fn weight_matrix(&self, state: &CoefficientState) -> Array2<f64> {
        let spec = &self.workspace.spec;
        let (k1, p) = (spec.k_x(), spec.dim());
        let coefs = self.workspace.curve_coefficients(state);
        let h = self.kernel.bandwidth;
        let mut w = Array2::zeros((p, p));
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, (coef, &y)) in coefs.iter().zip(&self.dataset.ys).enumerate() {
            let xr = &self.workspace.x_rows[i];
            for (row, wt) in self.tau_rows.iter().zip(&self.grid.weights) {
                let kh = self.kernel.density((row.dot(coef) - y) / h) / h;
                if kh == 0.0 {
                    continue;
                }
                idx.clear();
                val.clear();
                for (a, ta) in row.values.iter().enumerate() {
                    for (b, xb) in xr.values.iter().enumerate() {
                        idx.push((row.first + a) * k1 + xr.first + b);
                        val.push(ta * xb);
                    }
                }
                let scale = wt * kh;
                for (ia, va) in idx.iter().zip(&val) {
                    for (ib, vb) in idx.iter().zip(&val) {
                        w[[*ia, *ib]] += scale * va * vb;
                    }
                }
            }
        }
        w / self.n()
    }

    /// `C Σᵀ W Σ C + J` for the data part of the loss.
    pub fn hessian(&self, state: &CoefficientState) -> Array2<f64> {
        let k1 = state.k_x();
        let p = state.dim();
        let w = self.weight_matrix(state);
        let c = state.jacobian_diag();
        // Σᵀ W Σ via block cumulative sums on rows and columns
        let mut ws = Array2::zeros((p, p));
        for r in 0..p {
            let col = cumulative_blocks_transpose(&w.row(r).to_vec(), k1);
            for (j, v) in col.into_iter().enumerate() {
                ws[[r, j]] = v;
            }
        }
        let mut out = Array2::zeros((p, p));
        for j in 0..p {
            let col = cumulative_blocks_transpose(&ws.column(j).to_vec(), k1);
            for (r, v) in col.into_iter().enumerate() {
                out[[r, j]] = c[r] * v * c[j];
            }
        }
        let g = self.data_gradient(state);
        for j in 0..p {
            if !state.is_anchor(j) {
                out[[j, j]] += g[j];
            }
        }
        out
    }
}

pub fn smoothed_gradient(
    spec: &SheetSpec,
    state: &CoefficientState,
    dataset: &Dataset,
    penalty: &PenaltyConfig,
    kernel: KernelSpec,
    grid: QuadratureGrid,
) -> Result<Vec<f64>> {
    SmoothedLoss::new(spec, dataset, penalty, kernel, grid)?.gradient(state)
}

pub fn smoothed_hessian(
    spec: &SheetSpec,
    state: &CoefficientState,
    dataset: &Dataset,
    kernel: KernelSpec,
    grid: QuadratureGrid,
) -> Result<Array2<f64>> {
    let pen = PenaltyConfig::zero(spec.dim());
    Ok(SmoothedLoss::new(spec, dataset, &pen, kernel, grid)?.hessian(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{build_penalty, map_beta};
    use crate::loss_exact::{check_loss, gradient_r};
    use crate::test_support::adaptive_integral;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize) -> (SheetSpec, Dataset, CoefficientState) {
        let spec = SheetSpec::uniform(5, 3, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..spec.dim())
            .map(|j| if j < spec.k_x() { rng.random_range(-1.0..0.0) } else { rng.random_range(-2.0..0.0) })
            .collect();
        let state = map_beta(&beta, spec.k_x()).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-0.8..1.2)).collect();
        (spec, Dataset::new(xs, ys).unwrap(), state)
    }

    #[test]
    fn kernel_cdfs_are_distribution_functions() {
        for kind in [KernelKind::Gaussian, KernelKind::Uniform, KernelKind::Epanechnikov] {
            let k = KernelSpec::new(kind, 1.0).unwrap();
            // integrate from the left edge of the support so panels never straddle a jump
            let lo = if kind == KernelKind::Gaussian { -12.0 } else { -1.0 };
            let total = adaptive_integral(|z| k.density(z), lo, 12.0, 1e-12);
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
            let mut prev = 0.0;
            for i in 0..=400 {
                let z = -5.0 + i as f64 * 0.025;
                let c = k.cdf(z);
                assert!((0.0..=1.0).contains(&c) && c >= prev);
                prev = c;
                let top = if kind == KernelKind::Gaussian { z } else { z.min(1.0) };
                let direct = if top > lo { adaptive_integral(|v| k.density(v), lo, top, 1e-12) } else { 0.0 };
                assert_abs_diff_eq!(c, direct, epsilon = 1e-8);
                let moment = if top > lo { adaptive_integral(|v| v * k.density(v), lo, top, 1e-12) } else { 0.0 };
                assert_abs_diff_eq!(k.partial_moment(z), moment, epsilon = 1e-8);
            }
        }
        assert!(KernelSpec::gaussian(0.0).is_err());
    }

    #[test]
    fn smoothed_check_matches_numerical_convolution() {
        for kind in [KernelKind::Gaussian, KernelKind::Uniform, KernelKind::Epanechnikov] {
            let k = KernelSpec::new(kind, 0.3).unwrap();
            for &(u, t) in &[(0.0, 0.5), (0.4, 0.2), (-0.7, 0.9), (0.05, 0.35)] {
                let h = k.bandwidth;
                let f = |v: f64| check_loss(v, t) * k.density((v - u) / h) / h;
                // split at the kink of ρ and the support edges of compact kernels
                let mut cuts = vec![u - 12.0 * h, u - h, 0.0, u + h, u + 12.0 * h];
                cuts.sort_by(|a, b| a.total_cmp(b));
                let conv: f64 = cuts.windows(2).map(|w| adaptive_integral(f, w[0], w[1], 1e-13)).sum();
                assert_abs_diff_eq!(smoothed_check(u, t, &k), conv, epsilon = 1e-9);
            }
        }
        let g = KernelSpec::gaussian(0.2).unwrap();
        assert_abs_diff_eq!(smoothed_check(0.0, 0.5, &g), 0.2 * INV_SQRT_2PI, epsilon = 1e-15);
        let tiny = KernelSpec::gaussian(1e-6).unwrap();
        assert_abs_diff_eq!(smoothed_check(1.0, 0.3, &tiny), 0.3, epsilon = 1e-4);
        for u in [0.1, 0.7, 2.0] {
            assert_abs_diff_eq!(smoothed_check(u, 0.5, &g), smoothed_check(-u, 0.5, &g), epsilon = 1e-15);
        }
    }

    #[test]
    fn conditional_scale_tracks_noise_not_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 3.0 * x + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let s = conditional_scale(&Dataset::new(xs.clone(), ys).unwrap());
        // a 0.2-wide window adds the signal's uniform spread (sd 0.6/sqrt 12)
        let expected = (0.09f64 + 0.03).sqrt();
        assert!((s - expected).abs() < 0.05, "{s} vs {expected}");
        let flat = Dataset::new(xs, vec![2.0; n]).unwrap();
        assert_eq!(conditional_scale(&flat), 1.0);
    }

    #[test]
    fn fused_pass_matches_separate_evaluations() {
        let (spec, data, state) = setup(33, 30);
        let pen = build_penalty(&spec, 0.2, 0.1, 0.1).unwrap();
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let k = KernelSpec::new(kind, 0.2).unwrap();
            let loss = SmoothedLoss::new(&spec, &data, &pen, k, QuadratureGrid::midpoint(50).unwrap()).unwrap();
            let (v, h) = loss.data_value_and_h_tau(&state).unwrap();
            assert_abs_diff_eq!(v, loss.data_value(&state).unwrap(), epsilon = 1e-14);
            for (a, b) in h.iter().zip(loss.h_tau(&state)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_grid_loss() {
        let (spec, data, state) = setup(31, 40);
        let pen = build_penalty(&spec, 0.2, 0.1, 0.1).unwrap();
        let loss = SmoothedLoss::new(&spec, &data, &pen, KernelSpec::gaussian(0.15).unwrap(), QuadratureGrid::midpoint(64).unwrap()).unwrap();
        let g = loss.gradient(&state).unwrap();
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for j in 0..spec.dim() {
            let h = 1e-6;
            let mut bp = state.beta.clone();
            bp[j] += h;
            let mut bm = state.beta.clone();
            bm[j] -= h;
            let fd = (loss.value(&map_beta(&bp, spec.k_x()).unwrap()).unwrap()
                - loss.value(&map_beta(&bm, spec.k_x()).unwrap()).unwrap())
                / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * gmax, "j={j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn loss_matches_quadrature_of_smoothed_check() {
        let (spec, data, state) = setup(32, 10);
        let pen = PenaltyConfig::zero(spec.dim());
        let k = KernelSpec::gaussian(0.2).unwrap();
        let loss = SmoothedLoss::new(&spec, &data, &pen, k, QuadratureGrid::midpoint(2048).unwrap()).unwrap();
        let q = |t: f64, x: f64| crate::constraint::eval_sheet(&spec, &state, &[t], &[x]).unwrap()[[0, 0]];
        let oracle: f64 = data
            .xs
            .iter()
            .zip(&data.ys)
            .map(|(&x, &y)| adaptive_integral(|t| smoothed_check(y - q(t, x), t, &k), 0.0, 1.0, 1e-11))
            .sum::<f64>()
            / data.len() as f64;
        assert_abs_diff_eq!(loss.value(&state).unwrap(), oracle, epsilon = 1e-6);
    }

    #[test]
    fn tail_residuals_leave_only_h1() {
        let (spec, data, state) = setup(33, 20);
        let far = Dataset::new(data.xs.clone(), data.ys.iter().map(|y| y + 1e3).collect()).unwrap();
        let pen = PenaltyConfig::zero(spec.dim());
        let loss = SmoothedLoss::new(&spec, &far, &pen, KernelSpec::gaussian(0.1).unwrap(), QuadratureGrid::midpoint(64).unwrap()).unwrap();
        let g = loss.gradient(&state).unwrap();
        let expect = cumulative_blocks_transpose(&loss.workspace.h1, spec.k_x());
        let c = state.jacobian_diag();
        for j in 0..spec.dim() {
            assert_abs_diff_eq!(g[j], -c[j] * expect[j] / 20.0, epsilon = 1e-14);
        }
        // compact kernel, far tail: W vanishes and the Hessian is J alone
        let compact = SmoothedLoss::new(&spec, &far, &pen, KernelSpec::new(KernelKind::Epanechnikov, 0.1).unwrap(), QuadratureGrid::midpoint(64).unwrap()).unwrap();
        assert!(compact.weight_matrix(&state).iter().all(|v| *v == 0.0));
        let h = compact.hessian(&state);
        let gd = compact.data_gradient(&state);
        for ((r, c2), v) in h.indexed_iter() {
            let expect = if r == c2 && !state.is_anchor(r) { gd[r] } else { 0.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn approaches_exact_gradient_as_bandwidth_shrinks() {
        let (spec, data, state) = setup(34, 30);
        let pen = PenaltyConfig::zero(spec.dim());
        let ws = GradientWorkspace::new(&spec, &data).unwrap();
        let exact = gradient_r(&state, &data, &pen, &ws).unwrap();
        let grid = QuadratureGrid::midpoint(2048).unwrap();
        let mut prev = f64::INFINITY;
        let err_at = |h: f64| {
            let g = smoothed_gradient(&spec, &state, &data, &pen, KernelSpec::gaussian(h).unwrap(), grid.clone()).unwrap();
            g.iter().zip(&exact).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()))
        };
        for h in [0.5, 0.1, 0.02, 0.004] {
            let err = err_at(h);
            assert!(err <= prev, "h={h}: {err} > {prev}");
            prev = err;
        }
        let tiny = err_at(1e-4);
        assert!(tiny < 1e-3, "{tiny}");
    }

    #[test]
    fn hessian_matches_second_differences_and_w_is_psd() {
        let (spec, data, state) = setup(35, 25);
        let pen = PenaltyConfig::zero(spec.dim());
        let loss = SmoothedLoss::new(&spec, &data, &pen, KernelSpec::gaussian(0.3).unwrap(), QuadratureGrid::midpoint(128).unwrap()).unwrap();
        let w = loss.weight_matrix(&state);
        assert!(crate::linalg::symmetric_eigenvalues(&w)[0] >= -1e-10);
        let h = loss.hessian(&state);
        for ((r, c), v) in h.indexed_iter() {
            assert_abs_diff_eq!(*v, h[[c, r]], epsilon = 1e-13);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let v: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |s: f64| {
                let b: Vec<f64> = state.beta.iter().zip(&v).map(|(a, d)| a + s * d).collect();
                loss.data_value(&map_beta(&b, spec.k_x()).unwrap()).unwrap()
            };
            let e = 1e-3;
            let second = (f(e) - 2.0 * f(0.0) + f(-e)) / (e * e);
            let va = ndarray::Array1::from(v.clone());
            let quad = va.dot(&h.dot(&va));
            assert!((second - quad).abs() <= 1e-3 * quad.abs().max(1e-3), "{second} vs {quad}");
        }
    }

    #[test]
    fn grid_refinement_is_stable() {
        let (spec, data, state) = setup(36, 30);
        let pen = PenaltyConfig::zero(spec.dim());
        let k = KernelSpec::gaussian(0.1).unwrap();
        let a = smoothed_gradient(&spec, &state, &data, &pen, k, QuadratureGrid::midpoint(512).unwrap()).unwrap();
        let b = smoothed_gradient(&spec, &state, &data, &pen, k, QuadratureGrid::midpoint(1024).unwrap()).unwrap();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "{}", diff / norm);
    }
}
