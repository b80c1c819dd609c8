//! Non-crossing quantile sheets.
//!
//! A quantile sheet `Q(τ, x)` describes every conditional quantile curve at
//! once. Here it is a tensor-product B-spline in `(τ, x)` whose coefficients
//! are reparametrized so that `Q` is nondecreasing in `τ` for any parameter
//! vector, which rules out quantile crossing by construction. Fitting
//! minimizes the pinball loss integrated over `τ ∈ [0, 1]`, either exactly or
//! after convolution smoothing.

pub mod baselines;
pub mod cli;
pub mod constraint;
pub mod error;
pub mod linalg;
pub mod loss_exact;
pub mod loss_smoothed;
pub mod model;
pub mod optim;
pub mod simulation;
pub mod splines;

#[cfg(test)]
#[path = "../tests/common/mod.rs"]
mod test_support;

pub use error::{Result, SheetError};
