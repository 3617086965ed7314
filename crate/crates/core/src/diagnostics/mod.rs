//! Surrogate quality diagnostics: centred R², BIC, the Harvey–Collier
//! linearity test, best-subset benchmarks and tail-surface profiling.

mod harvey_collier;
mod subset;
mod tail;

pub use harvey_collier::{harvey_collier, LinearityTestResult};
pub use subset::{best_subset, SubsetSelection, EXHAUSTIVE_LIMIT};
pub use tail::{tail_profile, ProbabilityBin, TailBin, TailObservation, TailProfile};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::linalg::{self, RankPolicy};

/// `βᵀXᵀXβ / yᵀy` on centred data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteredRSquared {
    pub value: f64,
    /// `yᵀy = 0`: R² is undefined and reported as 0.
    pub degenerate: bool,
}

/// Subtracts column means from `x` and the mean from `y`.
pub fn center(x: &DMatrix<f64>, y: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let means: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).sum() / n).collect();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j]);
    let ym = y.iter().sum::<f64>() / n;
    (xc, y.iter().map(|v| v - ym).collect())
}

pub fn r_squared_centered(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> Result<CenteredRSquared> {
    if x.nrows() != y.len() || x.ncols() != beta.len() {
        return Err(LampError::param("design, response and coefficients have inconsistent shapes"));
    }
    let yty: f64 = y.iter().map(|v| v * v).sum();
    if yty == 0.0 {
        return Ok(CenteredRSquared { value: 0.0, degenerate: true });
    }
    let explained: f64 = (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum::<f64>().powi(2)).sum();
    Ok(CenteredRSquared { value: explained / yty, degenerate: false })
}

/// Gaussian BIC from a residual sum of squares: `n ln(RSS/n) + k ln n`.
/// A zero RSS yields negative infinity.
pub fn bic_from_rss(n: usize, rss: f64, k: usize) -> Result<f64> {
    if n <= k {
        return Err(LampError::param(format!("BIC needs more observations ({n}) than parameters ({k})")));
    }
    if !(rss >= 0.0) {
        return Err(LampError::param("RSS must be non-negative"));
    }
    if rss == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let n_f = n as f64;
    Ok(n_f * (rss / n_f).ln() + k as f64 * n_f.ln())
}

/// Fits `y` on `x` with an intercept and returns its BIC with `k` parameters.
pub fn bic(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<f64> {
    let n = y.len();
    if n <= k {
        return Err(LampError::param(format!("BIC needs more observations ({n}) than parameters ({k})")));
    }
    let fit = linalg::fit_affine(x, y, 0.0, RankPolicy::MinimumNorm)?;
    let scale: f64 = 1.0 + y.iter().map(|v| v * v).sum::<f64>();
    let rss = if fit.rss <= 1e-24 * scale { 0.0 } else { fit.rss };
    bic_from_rss(n, rss, k)
}
