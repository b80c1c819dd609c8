//! Dense linear-algebra helpers. Factorizations are delegated to `nalgebra`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{Result, SheetError};

pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

pub(crate) fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_nalgebra(m).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// 2-norm condition number `σ_max / σ_min`; infinite when singular.
pub fn condition_number(m: &Array2<f64>) -> f64 {
    let sv = to_nalgebra(m).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Weighted, penalized least squares with lower bounds on a subset of the unknowns:
///
/// minimize `Σ_i w_i (y_i - a_iᵀ z)² + zᵀ P z` subject to `z_j ≥ floor` for `bounded[j]`.
///
/// Solved exactly by a Lawson-Hanson style active-set method on the normal
/// equations.
#[derive(Debug, Clone)]
pub struct BoundedLsq {
    pub floor: f64,
    pub max_outer: usize,
}

impl Default for BoundedLsq {
    fn default() -> Self {
        BoundedLsq {
            floor: 1e-8,
            max_outer: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundedLsqSolution {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BoundedLsq {
    pub fn solve(
        &self,
        design: &Array2<f64>,
        response: &[f64],
        weights: Option<&[f64]>,
        penalty: &Array2<f64>,
        bounded: &[bool],
    ) -> Result<BoundedLsqSolution> {
        let (n, p) = design.dim();
        if response.len() != n || penalty.dim() != (p, p) || bounded.len() != p {
            return Err(SheetError::invalid("bounded least squares: dimension mismatch"));
        }
        let weighted = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(SheetError::invalid("bounded least squares: weight length mismatch"));
                }
                let mut d = design.clone();
                for (mut row, wi) in d.rows_mut().into_iter().zip(w) {
                    row *= *wi;
                }
                d
            }
            None => design.clone(),
        };
        let gram = weighted.t().dot(design) + penalty;
        let rhs = weighted.t().dot(&Array1::from(response.to_vec()));
        self.solve_normal(&gram, rhs.as_slice().unwrap(), bounded)
    }

    /// Same problem given the normal equations `M z = b`.
    pub fn solve_normal(&self, gram: &Array2<f64>, rhs: &[f64], bounded: &[bool]) -> Result<BoundedLsqSolution> {
        let p = rhs.len();
        let trace: f64 = (0..p).map(|i| gram[[i, i]]).sum();
        let ridge = 1e-12 * (trace / p as f64).max(1.0);
        let mut m = to_nalgebra(gram);
        for i in 0..p {
            m[(i, i)] += ridge;
        }
        let b = DVector::from_column_slice(rhs);
        let lower = |j: usize| if bounded[j] { self.floor } else { f64::NEG_INFINITY };

        let mut passive: Vec<bool> = bounded.iter().map(|&c| !c).collect();
        let mut z = DVector::from_fn(p, |j, _| if bounded[j] { self.floor } else { 0.0 });
        z = self.subproblem(&m, &b, &z, &passive)?;

        let max_outer = if self.max_outer == 0 { 3 * p + 10 } else { self.max_outer };
        let scale = b.amax().max(1.0);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < max_outer {
            iterations += 1;
            let g = &b - &m * &z;
            let candidate = (0..p)
                .filter(|&j| !passive[j])
                .max_by(|&i, &j| g[i].total_cmp(&g[j]));
            match candidate {
                Some(j) if g[j] > 1e-12 * scale => passive[j] = true,
                _ => {
                    converged = true;
                    break;
                }
            }
            loop {
                let s = self.subproblem(&m, &b, &z, &passive)?;
                let blocked: Vec<usize> = (0..p)
                    .filter(|&j| passive[j] && bounded[j] && s[j] <= lower(j))
                    .collect();
                if blocked.is_empty() {
                    z = s;
                    break;
                }
                let alpha = blocked
                    .iter()
                    .map(|&j| (z[j] - lower(j)) / (z[j] - s[j]))
                    .fold(1.0f64, f64::min)
                    .max(0.0);
                z = &z + (&s - &z) * alpha;
                for j in 0..p {
                    if passive[j] && bounded[j] && z[j] <= lower(j) * (1.0 + 1e-12) + 1e-300 {
                        passive[j] = false;
                        z[j] = lower(j);
                    }
                }
            }
        }
        let z: Vec<f64> = z.iter().copied().collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SheetError::numeric("bounded least squares produced non-finite coefficients"));
        }
        Ok(BoundedLsqSolution {
            z,
            iterations,
            converged,
        })
    }

    /// Minimize over the passive coordinates with the rest held at their bounds.
    fn subproblem(
        &self,
        m: &DMatrix<f64>,
        b: &DVector<f64>,
        z: &DVector<f64>,
        passive: &[bool],
    ) -> Result<DVector<f64>> {
        let idx: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
        let fixed: Vec<usize> = (0..passive.len()).filter(|&j| !passive[j]).collect();
        let mut out = z.clone();
        for &j in &fixed {
            out[j] = self.floor;
        }
        if idx.is_empty() {
            return Ok(out);
        }
        let mpp = DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])]);
        let rhs = DVector::from_fn(idx.len(), |r, _| {
            b[idx[r]] - fixed.iter().map(|&f| m[(idx[r], f)] * self.floor).sum::<f64>()
        });
        let sol = match mpp.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => mpp
                .lu()
                .solve(&rhs)
                .ok_or_else(|| SheetError::numeric("singular least-squares subproblem"))?,
        };
        for (r, &j) in idx.iter().enumerate() {
            out[j] = sol[r];
        }
        Ok(out)
    }
}
