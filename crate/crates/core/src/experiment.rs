//! Synthetic radius sweep: compares the closed-form MSE curve with the
//! empirical error of the local linear surrogate on a known surface.

use serde::{Deserialize, Serialize};

use crate::curvature::{mse_curve, optimal_radius, truncate_samples, RadiusOutcome, SymmetricMatrix, TruncationNorm};
use crate::error::{LampError, Result};
use crate::gateway::mock::{splitmix64, MockSurface};
use crate::probe::{apply_jitter, fit_surrogate, predict, sample_jitters, ProbeSample, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub surface: MockSurface,
    pub w0: Vec<f64>,
    /// Perturbations per fit; the seed sample is added on top.
    pub m: usize,
    pub trials: usize,
    pub deltas: Vec<f64>,
    pub seed: u64,
}

impl SweepConfig {
    /// Quadratic bowl in five dimensions with noise sd 0.02.
    pub fn default_quadratic() -> Self {
        let d = 5;
        let hessian: Vec<Vec<f64>> =
            (0..d).map(|i| (0..d).map(|j| if i == j { -0.8 } else { 0.1 }).collect()).collect();
        let w0 = vec![0.5; d];
        let surface =
            MockSurface::quadratic(vec![0.4, -0.3, 0.2, 0.1, -0.2], 0.5, hessian, w0.clone()).with_noise(0.02, 11);
        Self { surface, w0, m: 50, trials: 200, deltas: (1..=19).map(|i| i as f64 / 20.0).collect(), seed: 1 }
    }
}

/// One row of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub mse_theory: f64,
    /// Mean squared error of the surrogate value at `w0` over trials.
    pub mse_empirical: f64,
    /// Mean R² of the fit on every sample.
    pub r2_before: f64,
    /// Mean R² after truncating to `δ*` (equal to `r2_before` when `δ ≤ δ*`).
    pub r2_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub delta_star: RadiusOutcome,
    /// `‖diag(w0) H diag(w0)‖_F` of the surface.
    pub hessian_frobenius: f64,
    pub sigma2: f64,
    pub rows: Vec<SweepRow>,
}

/// Variance of a standard normal truncated to ±3.
fn truncated_normal_variance() -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = Normal::standard();
    1.0 - 2.0 * 3.0 * n.pdf(3.0) / (2.0 * n.cdf(3.0) - 1.0)
}

pub fn radius_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.surface.validate()?;
    let w0 = WeightVector::new(config.w0.clone())?;
    let d = w0.dim();
    if config.surface.dim() != d {
        return Err(LampError::param("surface and w0 dimensions differ"));
    }
    if config.trials == 0 || config.deltas.is_empty() {
        return Err(LampError::param("trials and deltas must be non-empty"));
    }
    let n = config.m + 1;
    let hessian = SymmetricMatrix::from_dense(&config.surface.analytic_hessian(w0.as_slice())?)?;
    let h_norm = hessian.congruent_diagonal(w0.as_slice()).frobenius();
    let sigma2 = config.surface.noise_sd.powi(2) * truncated_normal_variance();
    let delta_star = optimal_radius(d, n, sigma2, h_norm)?;
    let truth = config.surface.mean(w0.as_slice())?;

    let mut rows = Vec::with_capacity(config.deltas.len());
    for (k, &delta) in config.deltas.iter().enumerate() {
        let (mut se, mut r2b, mut r2a) = (0.0, 0.0, 0.0);
        for t in 0..config.trials {
            let stream = splitmix64(config.seed ^ splitmix64(((k as u64) << 32) | t as u64));
            let jitters = sample_jitters(d, delta, config.m, stream)?;
            let observe = |w: &WeightVector, j: usize| -> Result<f64> {
                Ok(config.surface.mean(w.as_slice())? + config.surface.noise(stream.wrapping_add(j as u64)))
            };
            let mut samples = vec![ProbeSample::seed(w0.clone(), observe(&w0, 0)?)];
            for (j, eps) in jitters.into_iter().enumerate() {
                let w = apply_jitter(&w0, &eps)?.weights;
                let y = observe(&w, j + 1)?;
                samples.push(ProbeSample { index: j + 1, weights: w, probability: y, jitter: Some(eps) });
            }
            let fit = fit_surrogate(&samples, 0.0)?;
            se += (predict(&fit, &w0)?.raw - truth).powi(2);
            r2b += fit.r_squared;
            r2a += match delta_star {
                RadiusOutcome::Optimal(r) if r < delta => match truncate_samples(&samples, r, TruncationNorm::Sup) {
                    Ok((kept, _)) => fit_surrogate(&kept, 0.0)?.r_squared,
                    Err(LampError::InsufficientData { .. }) => fit.r_squared,
                    Err(e) => return Err(e),
                },
                _ => fit.r_squared,
            };
        }
        let trials = config.trials as f64;
        rows.push(SweepRow {
            delta,
            mse_theory: mse_curve(delta, h_norm, sigma2, n, d)?,
            mse_empirical: se / trials,
            r2_before: r2b / trials,
            r2_after: r2a / trials,
        });
    }
    Ok(SweepResult { delta_star, hessian_frobenius: h_norm, sigma2, rows })
}
