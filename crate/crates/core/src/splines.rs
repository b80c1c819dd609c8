//! B-spline bases on equally spaced knots.
//!
//! Knots continue with spacing `h` beyond both ends of the domain, so every
//! basis function is a translate of the same cardinal B-spline. Index `j` of
//! an order-`m` basis is supported on `[t_j, t_{j+m}]`, where `t_0 = a - (m-1)h`
//! and `t_{m-1} = a`. Exactly `K0 + m` functions are nonzero on `[a, b]`.
//!
//! Integrals of the basis use the order-raising identity
//! `∫_{-∞}^u B_{j,m} = (t_{j+m} - t_j)/m · Σ_{i≥j} B_{i,m+1}(u)`, evaluated on the
//! same extended grid.

use ndarray::Array2;

use crate::error::{Result, SheetError};

/// Equally spaced knot grid for one covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    interior_count: usize,
    order: usize,
    lo: f64,
    hi: f64,
    spacing: f64,
    knots: Vec<f64>,
}

/// Nonzero values of a basis row: entries `values[r]` belong to function `first + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRow {
    pub first: usize,
    pub values: Vec<f64>,
}

impl LocalRow {
    /// `Σ_j N_j(x) c_j` over the nonzero entries.
    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(&coef[self.first..self.first + self.values.len()])
            .map(|(v, c)| v * c)
            .sum()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        out[self.first..self.first + self.values.len()].copy_from_slice(&self.values);
        out
    }
}

/// Basis functions evaluated at a set of abscissae; row `i` holds `N_j(points[i])`.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: Array2<f64>,
    pub points: Vec<f64>,
}

/// Diagonal integration factors for the order-raising identity and the
/// raised-order bases they multiply.
#[derive(Debug, Clone)]
pub struct IntegrationMatrices {
    /// `(t_{i+m} - t_i)/m`
    pub g1: Vec<f64>,
    /// `(t_{i+m+1} - t_i)/(m+1)`
    pub g2: Vec<f64>,
    kv: KnotVector,
}

pub fn build_knots(interior_count: usize, order: usize, domain: (f64, f64)) -> Result<KnotVector> {
    KnotVector::new(interior_count, order, domain)
}

impl KnotVector {
    pub fn new(interior_count: usize, order: usize, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if order < 1 {
            return Err(SheetError::invalid("spline order must be at least 1"));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(SheetError::invalid(format!(
                "degenerate spline domain [{lo}, {hi}]"
            )));
        }
        let spacing = (hi - lo) / (interior_count as f64 + 1.0);
        let mut kv = KnotVector {
            interior_count,
            order,
            lo,
            hi,
            spacing,
            knots: Vec::new(),
        };
        let count = kv.basis_count() + order;
        kv.knots = (0..count as isize).map(|i| kv.knot(i)).collect();
        Ok(kv)
    }

    /// Knot `t_i` of the extended grid; valid for any signed index.
    pub fn knot(&self, i: isize) -> f64 {
        let k = i - (self.order as isize - 1);
        if k == 0 {
            self.lo
        } else if k == self.interior_count as isize + 1 {
            self.hi
        } else {
            self.lo + k as f64 * self.spacing
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    pub fn basis_count(&self) -> usize {
        self.interior_count + self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// The padded knot sequence `t_0 .. t_{K+m-1}` for the order-`m` basis.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if x.is_nan() || x < self.lo || x > self.hi {
            return Err(SheetError::DomainViolation {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`; with `close_right` the right
    /// endpoint of the domain maps into the last interior span.
    fn span(&self, x: f64, close_right: bool) -> isize {
        let m1 = self.order as isize - 1;
        let last_inside = m1 + self.interior_count as isize;
        if close_right && x >= self.hi {
            return last_inside;
        }
        let mut s = m1 + ((x - self.lo) / self.spacing).floor() as isize;
        s = s.clamp(m1, last_inside + 1);
        while s > m1 && x < self.knot(s) {
            s -= 1;
        }
        while s <= last_inside && x >= self.knot(s + 1) {
            s += 1;
        }
        s
    }

    /// Nonzero order-`m` basis values at `x`.
    pub fn eval_local(&self, x: f64) -> Result<LocalRow> {
        self.check_domain(x)?;
        Ok(self.eval_local_unchecked(x))
    }

    pub(crate) fn eval_local_unchecked(&self, x: f64) -> LocalRow {
        let span = self.span(x, true);
        let values = local_basis(|i| self.knot(i), self.order, span, x);
        LocalRow {
            first: (span + 1 - self.order as isize) as usize,
            values,
        }
    }

    /// `Σ_j coef_j N_j(x)` for `x` in the domain (not checked).
    pub(crate) fn combination_unchecked(&self, coef: &[f64], x: f64) -> f64 {
        if self.order > STACK_ORDER {
            return self.eval_local_unchecked(x).dot(coef);
        }
        let span = self.span(x, true);
        let mut n = [0.0; STACK_ORDER];
        let mut left = [0.0; STACK_ORDER];
        let mut right = [0.0; STACK_ORDER];
        local_basis_into(|i| self.knot(i), self.order, span, x, &mut n, &mut left, &mut right);
        let first = (span + 1 - self.order as isize) as usize;
        n[..self.order].iter().zip(&coef[first..]).map(|(a, b)| a * b).sum()
    }

    /// Full row `N(x)` of length `K`.
    pub fn eval_row(&self, x: f64) -> Result<Vec<f64>> {
        Ok(self.eval_local(x)?.to_dense(self.basis_count()))
    }

    /// Values of the raised-order basis (order `m + raise`) on the same grid,
    /// restricted to indices `0..K`. Functions with index `>= K` vanish on `[a, b]`.
    fn raised_row(&self, raise: usize, u: f64) -> Vec<f64> {
        let order = self.order + raise;
        let span = self.span(u, false);
        let vals = local_basis(|i| self.knot(i), order, span, u);
        let k = self.basis_count() as isize;
        let mut out = vec![0.0; self.basis_count()];
        let first = span + 1 - order as isize;
        for (r, v) in vals.into_iter().enumerate() {
            let idx = first + r as isize;
            if (0..k).contains(&idx) {
                out[idx as usize] = v;
            }
        }
        out
    }

    pub fn integration_matrices(&self) -> IntegrationMatrices {
        let m = self.order as isize;
        let k = self.basis_count() as isize;
        let g1 = (0..k)
            .map(|i| (self.knot(i + m) - self.knot(i)) / m as f64)
            .collect();
        let g2 = (0..k)
            .map(|i| (self.knot(i + m + 1) - self.knot(i)) / (m + 1) as f64)
            .collect();
        IntegrationMatrices {
            g1,
            g2,
            kv: self.clone(),
        }
    }
}

/// Cox-de Boor triangle for the `order` functions nonzero on span `span`,
/// i.e. indices `span-order+1 ..= span`. A zero denominator contributes zero.
/// Largest order evaluated without heap allocation.
const STACK_ORDER: usize = 12;

/// De Boor triangle into caller-provided buffers of length `≥ order`.
fn local_basis_into(
    knot: impl Fn(isize) -> f64,
    order: usize,
    span: isize,
    x: f64,
    n: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    let p = order - 1;
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knot(span + 1 - j as isize);
        right[j] = knot(span + j as isize) - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
}

fn local_basis(knot: impl Fn(isize) -> f64, order: usize, span: isize, x: f64) -> Vec<f64> {
    let mut n = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    local_basis_into(knot, order, span, x, &mut n, &mut left, &mut right);
    n
}

/// Suffix sums `Σ_{i≥j} v_i`, i.e. `Σ_τᵀ v` for the lower-triangular ones matrix.
fn suffix_sums(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut acc = 0.0;
    for j in (0..v.len()).rev() {
        acc += v[j];
        out[j] = acc;
    }
    out
}

impl IntegrationMatrices {
    /// `∫_{-∞}^u N_j`, i.e. `G1 Σᵀ N^{[m+1]}(u)`.
    pub fn antiderivative(&self, u: f64) -> Vec<f64> {
        let raised = suffix_sums(&self.kv.raised_row(1, u));
        raised.iter().zip(&self.g1).map(|(s, g)| s * g).collect()
    }

    /// `∫_{-∞}^u ∫_{-∞}^s N_j`, i.e. `G1 Σᵀ G2 Σᵀ N^{[m+2]}(u)`.
    pub fn second_antiderivative(&self, u: f64) -> Vec<f64> {
        let inner: Vec<f64> = suffix_sums(&self.kv.raised_row(2, u))
            .iter()
            .zip(&self.g2)
            .map(|(s, g)| s * g)
            .collect();
        suffix_sums(&inner)
            .iter()
            .zip(&self.g1)
            .map(|(s, g)| s * g)
            .collect()
    }
}

pub fn eval_basis(kv: &KnotVector, points: &[f64]) -> Result<BasisMatrix> {
    let k = kv.basis_count();
    let mut values = Array2::zeros((points.len(), k));
    for (i, &x) in points.iter().enumerate() {
        let row = kv.eval_local(x)?;
        for (r, v) in row.values.iter().enumerate() {
            values[[i, row.first + r]] = *v;
        }
    }
    Ok(BasisMatrix {
        values,
        points: points.to_vec(),
    })
}

/// `∫_a^upper N_k(t) dt` for every basis function.
pub fn integrate_basis_prefix(kv: &KnotVector, upper: f64) -> Result<Vec<f64>> {
    kv.check_domain(upper)?;
    let im = kv.integration_matrices();
    Ok(prefix_with(&im, upper))
}

pub(crate) fn prefix_with(im: &IntegrationMatrices, upper: f64) -> Vec<f64> {
    let at_lo = im.antiderivative(im.kv.lo);
    let at_up = im.antiderivative(upper);
    at_up.iter().zip(&at_lo).map(|(u, l)| u - l).collect()
}

/// `∫_0^1 t N_k(t) dt` by parts: `[t F(t)]_0^1 - [F2(t)]_0^1`.
pub fn integrate_tau_weighted(kv: &KnotVector) -> Result<Vec<f64>> {
    if kv.domain() != (0.0, 1.0) {
        return Err(SheetError::invalid(
            "first-moment integrals require the unit domain [0, 1]",
        ));
    }
    let im = kv.integration_matrices();
    let (a, b) = kv.domain();
    let f_b = im.antiderivative(b);
    let f_a = im.antiderivative(a);
    let f2_b = im.second_antiderivative(b);
    let f2_a = im.second_antiderivative(a);
    Ok((0..kv.basis_count())
        .map(|j| b * f_b[j] - a * f_a[j] - (f2_b[j] - f2_a[j]))
        .collect())
}

/// `q`-th order difference operator `Δ_{K,q}` of shape `(K-q) × K`.
pub fn difference_matrix(k: usize, q: usize) -> Result<Array2<f64>> {
    if q == 0 || q >= k {
        return Err(SheetError::invalid(format!(
            "difference order {q} must satisfy 0 < q < {k}"
        )));
    }
    let first = |size: usize| {
        let mut d = Array2::zeros((size - 1, size));
        for r in 0..size - 1 {
            d[[r, r]] = -1.0;
            d[[r, r + 1]] = 1.0;
        }
        d
    };
    let mut d = first(k);
    for step in 2..=q {
        d = first(k - step + 1).dot(&d);
    }
    Ok(d)
}
