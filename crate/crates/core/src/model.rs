//! Fitted sheets and their JSON file format.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::constraint::{build_penalty, eval_sheet, free_state, map_beta, CoefficientState, PenaltyConfig, SheetSpec};
use crate::error::{Result, SheetError};
use crate::optim::{FitReport, StopReason};
use crate::splines::KnotVector;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub tau: f64,
    pub x11: f64,
    pub x12: f64,
}

impl Lambdas {
    pub fn uniform(lambda: f64) -> Self {
        Lambdas {
            tau: lambda,
            x11: lambda,
            x12: lambda,
        }
    }

    pub fn penalty(&self, spec: &SheetSpec) -> Result<PenaltyConfig> {
        build_penalty(spec, self.tau, self.x11, self.x12)
    }
}

/// Affine map from data covariates onto the unit interval the x basis uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub lo: f64,
    pub hi: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap { lo: 0.0, hi: 1.0 };

    /// Map sending the observed range of `xs` onto `[0, 1]`.
    pub fn fit(xs: &[f64]) -> Result<Self> {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(SheetError::InsufficientData(
                "covariate needs at least two distinct finite values".into(),
            ));
        }
        Ok(AffineMap { lo, hi })
    }

    pub fn to_unit(&self, x: f64) -> Result<f64> {
        let u = (x - self.lo) / (self.hi - self.lo);
        // absorb rounding at the ends of the fitted range
        let slack = 1e-12;
        if !(u >= -slack && u <= 1.0 + slack) {
            return Err(SheetError::DomainViolation {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(u.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub method: String,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: Option<StopReason>,
    pub final_loss: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub init_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct SheetModel {
    pub spec: SheetSpec,
    pub state: CoefficientState,
    /// False for comparison fits whose increments were left unconstrained.
    pub monotone: bool,
    pub lambdas: Lambdas,
    pub x_map: AffineMap,
    pub diagnostics: Diagnostics,
}

impl SheetModel {
    pub fn from_report(
        spec: &SheetSpec,
        report: &FitReport,
        lambdas: Lambdas,
        x_map: AffineMap,
        method: &str,
    ) -> Self {
        let converged = !matches!(report.stop_reason, StopReason::MaxIters | StopReason::StepFloor);
        SheetModel {
            spec: spec.clone(),
            state: report.final_state.clone(),
            monotone: true,
            lambdas,
            x_map,
            diagnostics: Diagnostics {
                method: method.to_string(),
                iterations: report.iterations,
                converged,
                stop_reason: Some(report.stop_reason),
                final_loss: Some(report.final_loss()),
                final_grad_norm: Some(report.final_grad_norm()),
                init_fallback: report.init_fallback,
            },
        }
    }

    /// `Q̂(τ, x)` with `x` in data units.
    pub fn quantile(&self, tau: f64, x: f64) -> Result<f64> {
        Ok(self.grid(&[tau], &[x])?[[0, 0]])
    }

    /// `Q̂` on a grid with `x` in data units; `taus.len() × xs.len()`.
    pub fn grid(&self, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        let unit: Vec<f64> = xs.iter().map(|&x| self.x_map.to_unit(x)).collect::<Result<_>>()?;
        eval_sheet(&self.spec, &self.state, taus, &unit)
    }

    /// `Q̂` on a grid with `x` already on the unit scale.
    pub fn grid_unit(&self, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        eval_sheet(&self.spec, &self.state, taus, xs)
    }

    pub fn to_file(&self) -> ModelFile {
        let basis = |kv: &KnotVector| BasisFile {
            interior_count: kv.interior_count(),
            order: kv.order(),
            domain: [kv.domain().0, kv.domain().1],
        };
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            tau_basis: basis(&self.spec.tau_basis),
            x_basis: basis(&self.spec.x_basis),
            monotone: self.monotone,
            beta_bits: self.state.beta.iter().map(|b| format!("{:016x}", b.to_bits())).collect(),
            beta: self.state.beta.clone(),
            lambdas: self.lambdas,
            x_map: self.x_map,
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(SheetError::invalid(format!(
                "unsupported model schema version {} (expected {MODEL_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let basis = |b: &BasisFile| KnotVector::new(b.interior_count, b.order, (b.domain[0], b.domain[1]));
        let spec = SheetSpec::new(basis(&file.tau_basis)?, basis(&file.x_basis)?)?;
        let beta: Vec<f64> = file
            .beta_bits
            .iter()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|e| SheetError::invalid(format!("bad coefficient encoding {h:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if beta.len() != spec.dim() {
            return Err(SheetError::invalid(format!(
                "model holds {} coefficients but the bases need {}",
                beta.len(),
                spec.dim()
            )));
        }
        let state = if file.monotone {
            map_beta(&beta, spec.k_x())?
        } else {
            free_state(&beta, spec.k_x())?
        };
        Ok(SheetModel {
            spec,
            state,
            monotone: file.monotone,
            lambdas: file.lambdas,
            x_map: file.x_map,
            diagnostics: file.diagnostics,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| SheetError::Parse {
            path: "<model>".into(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| SheetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SheetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| SheetError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisFile {
    pub interior_count: usize,
    pub order: usize,
    pub domain: [f64; 2],
}

/// On-disk model. `beta_bits` holds the IEEE-754 bit patterns of `beta` in
/// hex and is authoritative; `beta` is a readable copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub tau_basis: BasisFile,
    pub x_basis: BasisFile,
    pub monotone: bool,
    pub beta_bits: Vec<String>,
    pub beta: Vec<f64>,
    pub lambdas: Lambdas,
    pub x_map: AffineMap,
    pub diagnostics: Diagnostics,
}
