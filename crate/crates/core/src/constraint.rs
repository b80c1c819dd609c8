//! Shape-constrained reparametrization of the tensor-product sheet.
//!
//! Coefficients are ordered τ-major: block `j` (length `K_1`) holds the
//! x-coefficients attached to the `j`-th τ basis function. The first block of
//! `β̃` equals `β`; every later block is `exp(β)`. Cumulative block sums
//! `γ = (Σ_τ ⊗ I) β̃` are therefore nondecreasing in the τ direction, and so is
//! `Q(τ, x) = (N_τ(τ) ⊗ N_x(x))ᵀ γ`.

use ndarray::{Array1, Array2};

use crate::error::{Result, SheetError};
use crate::linalg::kron;
use crate::splines::{difference_matrix, KnotVector, LocalRow};

/// Largest exponent fed to `exp` in the monotone blocks.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SheetSpec {
    pub tau_basis: KnotVector,
    pub x_basis: KnotVector,
}

impl SheetSpec {
    pub fn new(tau_basis: KnotVector, x_basis: KnotVector) -> Result<Self> {
        if tau_basis.domain() != (0.0, 1.0) {
            return Err(SheetError::invalid("the τ basis must live on [0, 1]"));
        }
        Ok(SheetSpec { tau_basis, x_basis })
    }

    /// Equally spaced bases with `k_tau` and `k_x` functions of the given orders
    /// on `[0, 1] × [0, 1]`.
    pub fn uniform(k_tau: usize, order_tau: usize, k_x: usize, order_x: usize) -> Result<Self> {
        if k_tau < order_tau || k_x < order_x {
            return Err(SheetError::invalid(format!(
                "basis sizes ({k_tau}, {k_x}) must be at least the orders ({order_tau}, {order_x})"
            )));
        }
        SheetSpec::new(
            KnotVector::new(k_tau - order_tau, order_tau, (0.0, 1.0))?,
            KnotVector::new(k_x - order_x, order_x, (0.0, 1.0))?,
        )
    }

    pub fn k_tau(&self) -> usize {
        self.tau_basis.basis_count()
    }

    pub fn k_x(&self) -> usize {
        self.x_basis.basis_count()
    }

    /// Total coefficient count `K_τ K_1`.
    pub fn dim(&self) -> usize {
        self.k_tau() * self.k_x()
    }

    /// τ-direction coefficients of the curve at a fixed x row:
    /// `c_j = Σ_k γ_{jk} N_k(x)`, so `Q(τ, x) = Σ_j c_j N_j(τ)`.
    pub fn tau_coefficients(&self, gamma: &[f64], x_row: &LocalRow) -> Vec<f64> {
        let k1 = self.k_x();
        (0..self.k_tau())
            .map(|j| x_row.dot(&gamma[j * k1..(j + 1) * k1]))
            .collect()
    }
}

/// Unconstrained parameters with their derived monotone coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    pub beta: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub gamma: Vec<f64>,
    k_x: usize,
}

impl CoefficientState {
    pub fn k_x(&self) -> usize {
        self.k_x
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Diagonal of `dβ̃/dβ`.
    pub fn jacobian_diag(&self) -> Vec<f64> {
        jacobian_c(self)
    }

    /// Whether index `j` sits in the anchor (identity) block.
    pub fn is_anchor(&self, j: usize) -> bool {
        j < self.k_x
    }
}

pub fn build_sigma(k_tau: usize, k_x: usize) -> Result<Array2<f64>> {
    if k_tau == 0 || k_x == 0 {
        return Err(SheetError::invalid("Σ needs positive block counts"));
    }
    let sigma_tau = Array2::from_shape_fn((k_tau, k_tau), |(i, j)| if i >= j { 1.0 } else { 0.0 });
    Ok(kron(&sigma_tau, &Array2::eye(k_x)))
}

/// `γ = (Σ_τ ⊗ I) v` as running block sums.
pub fn cumulative_blocks(v: &[f64], k_x: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    for idx in k_x..out.len() {
        out[idx] += out[idx - k_x];
    }
    out
}

/// `(Σ_τ ⊗ I)ᵀ v` as reverse running block sums.
pub fn cumulative_blocks_transpose(v: &[f64], k_x: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    for idx in (0..out.len().saturating_sub(k_x)).rev() {
        out[idx] += out[idx + k_x];
    }
    out
}

pub fn map_beta(beta: &[f64], k_x: usize) -> Result<CoefficientState> {
    if k_x == 0 || beta.is_empty() || !beta.len().is_multiple_of(k_x) {
        return Err(SheetError::invalid(format!(
            "coefficient length {} is not a positive multiple of K_1 = {k_x}",
            beta.len()
        )));
    }
    let beta_tilde: Vec<f64> = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| if j < k_x { b } else { b.min(EXP_CLAMP).exp() })
        .collect();
    let gamma = cumulative_blocks(&beta_tilde, k_x);
    Ok(CoefficientState {
        beta: beta.to_vec(),
        beta_tilde,
        gamma,
        k_x,
    })
}

/// State from monotone increments `β̃` directly; positive entries are required
/// outside the anchor block.
pub fn state_from_beta_tilde(beta_tilde: &[f64], k_x: usize) -> Result<CoefficientState> {
    let beta: Vec<f64> = beta_tilde
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            if j < k_x {
                Ok(b)
            } else if b > 0.0 {
                Ok(b.ln())
            } else {
                Err(SheetError::invalid(format!(
                    "increment {j} must be positive, got {b}"
                )))
            }
        })
        .collect::<Result<_>>()?;
    map_beta(&beta, k_x)
}

/// State whose increments carry no sign constraint (`β = β̃`), used by
/// unconstrained comparison fits. Sheets built this way may cross.
pub fn free_state(beta_tilde: &[f64], k_x: usize) -> Result<CoefficientState> {
    if k_x == 0 || beta_tilde.is_empty() || !beta_tilde.len().is_multiple_of(k_x) {
        return Err(SheetError::invalid(format!(
            "coefficient length {} is not a positive multiple of K_1 = {k_x}",
            beta_tilde.len()
        )));
    }
    Ok(CoefficientState {
        beta: beta_tilde.to_vec(),
        beta_tilde: beta_tilde.to_vec(),
        gamma: cumulative_blocks(beta_tilde, k_x),
        k_x,
    })
}

pub fn jacobian_c(state: &CoefficientState) -> Vec<f64> {
    state
        .beta_tilde
        .iter()
        .enumerate()
        .map(|(j, &bt)| {
            if j < state.k_x {
                1.0
            } else if state.beta[j] > EXP_CLAMP {
                0.0
            } else {
                bt
            }
        })
        .collect()
}

/// Dense tensor row `N_τ(τ) ⊗ N_x(x)`.
pub fn tensor_row(spec: &SheetSpec, tau: f64, x: f64) -> Result<Vec<f64>> {
    let rt = spec.tau_basis.eval_row(tau)?;
    let rx = spec.x_basis.eval_row(x)?;
    Ok(rt
        .iter()
        .flat_map(|a| rx.iter().map(move |b| a * b))
        .collect())
}

/// Roughness penalty `S = λ_τ D_τᵀD_τ + λ_11 D_11ᵀD_11 + λ_12 D_12ᵀD_12` on `β`.
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub lambda_tau: f64,
    pub lambda_11: f64,
    pub lambda_12: f64,
    pub s: Array2<f64>,
}

impl PenaltyConfig {
    pub fn zero(dim: usize) -> Self {
        PenaltyConfig {
            lambda_tau: 0.0,
            lambda_11: 0.0,
            lambda_12: 0.0,
            s: Array2::zeros((dim, dim)),
        }
    }

    /// `βᵀ S β`
    pub fn value(&self, beta: &[f64]) -> f64 {
        let b = Array1::from(beta.to_vec());
        b.dot(&self.s.dot(&b))
    }

    /// `2 S β`, the gradient of [`PenaltyConfig::value`].
    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let b = Array1::from(beta.to_vec());
        (self.s.dot(&b) * 2.0).to_vec()
    }
}

pub fn build_penalty(
    spec: &SheetSpec,
    lambda_tau: f64,
    lambda_11: f64,
    lambda_12: f64,
) -> Result<PenaltyConfig> {
    let (kt, k1) = (spec.k_tau(), spec.k_x());
    for (name, v) in [("λ_τ", lambda_tau), ("λ_11", lambda_11), ("λ_12", lambda_12)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(SheetError::invalid(format!("{name} must be finite and ≥ 0, got {v}")));
        }
    }
    if kt < 3 {
        return Err(SheetError::invalid(format!("K_τ = {kt} is too small for the τ penalty (need ≥ 3)")));
    }
    if (lambda_11 > 0.0 && k1 < 3) || (lambda_12 > 0.0 && k1 < 2) {
        return Err(SheetError::invalid(format!("K_1 = {k1} is too small for the x penalties (need ≥ 3)")));
    }
    let dim = kt * k1;
    let mut s = Array2::zeros((dim, dim));

    // F: first differences without the first row
    let d1 = difference_matrix(kt, 1)?;
    let f = d1.slice(ndarray::s![1.., ..]).to_owned();
    let d_tau = kron(&f, &Array2::eye(k1));
    s.scaled_add(lambda_tau, &d_tau.t().dot(&d_tau));

    let mut e = Array2::zeros((kt, kt));
    e[[0, 0]] = 1.0;
    if k1 >= 3 {
        let d11 = kron(&e, &difference_matrix(k1, 2)?);
        s.scaled_add(lambda_11, &d11.t().dot(&d11));
    }
    if k1 >= 2 {
        let rest = Array2::<f64>::eye(kt) - &e;
        let d12 = kron(&rest, &difference_matrix(k1, 1)?);
        s.scaled_add(lambda_12, &d12.t().dot(&d12));
    }
    Ok(PenaltyConfig {
        lambda_tau,
        lambda_11,
        lambda_12,
        s,
    })
}

/// `Q(τ, x)` on a grid; result is `taus.len() × xs.len()`.
pub fn eval_sheet(
    spec: &SheetSpec,
    state: &CoefficientState,
    taus: &[f64],
    xs: &[f64],
) -> Result<Array2<f64>> {
    let nt = crate::splines::eval_basis(&spec.tau_basis, taus)?.values;
    let nx = crate::splines::eval_basis(&spec.x_basis, xs)?.values;
    let gamma = Array2::from_shape_vec((spec.k_tau(), spec.k_x()), state.gamma.clone())
        .map_err(|e| SheetError::invalid(e.to_string()))?;
    Ok(nt.dot(&gamma).dot(&nx.t()))
}
