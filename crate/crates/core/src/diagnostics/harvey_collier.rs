// Harvey–Collier test for functional form.
//
// H0: the regression is linear in the regressors. Observations are ordered by
// the fitted values of the full fit, recursive residuals are computed from an
// expanding-window least-squares fit, and a one-sample t-test checks that
// their mean is zero (df = n - p - 1, p = regressors + intercept).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{LampError, Result};
use crate::linalg::{self, RankPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityTestResult {
    /// t-statistic of the mean recursive residual (signed).
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
    pub alpha: f64,
    pub degrees_of_freedom: usize,
}

pub fn harvey_collier(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<LinearityTestResult> {
    let n = y.len();
    let d = x.ncols();
    let p = d + 1;
    if x.nrows() != n {
        return Err(LampError::param("design and response lengths differ"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LampError::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if n < d + 3 {
        return Err(LampError::InsufficientData { required: d + 3, available: n, hint: None });
    }

    let full = linalg::fit_affine(x, y, 0.0, RankPolicy::Strict)
        .map_err(|e| LampError::TestUnavailable(format!("full fit failed: {e}")))?;
    let fitted: Vec<f64> = (0..n).map(|i| full.predict_row(&x.row(i).iter().cloned().collect::<Vec<_>>())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitted[a].total_cmp(&fitted[b]).then(a.cmp(&b)));

    // design with intercept, rows in test order
    let z = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(order[i], j - 1)] });
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let mut residuals = Vec::with_capacity(n - p);
    for r in p..n {
        let window = z.rows(0, r).into_owned();
        let qr = window.clone().qr();
        let rmat = qr.r();
        let diag_max = (0..p).map(|i| rmat[(i, i)].abs()).fold(0.0, f64::max);
        if (0..p).any(|i| rmat[(i, i)].abs() <= 1e-10 * diag_max.max(f64::MIN_POSITIVE)) {
            return Err(LampError::TestUnavailable(format!("expanding window of {r} observations is singular")));
        }
        let qty = qr.q().transpose() * DVector::from_column_slice(&ys[..r]);
        let b = rmat
            .solve_upper_triangular(&qty)
            .ok_or_else(|| LampError::TestUnavailable("triangular solve failed".into()))?;
        let xr = z.row(r).transpose();
        // xᵀ(WᵀW)⁻¹x = ‖R⁻ᵀx‖²
        let v = rmat
            .transpose()
            .solve_lower_triangular(&xr)
            .ok_or_else(|| LampError::TestUnavailable("triangular solve failed".into()))?;
        let leverage = v.norm_squared();
        residuals.push((ys[r] - xr.dot(&b)) / (1.0 + leverage).sqrt());
    }

    let m = residuals.len();
    let df = m - 1;
    let y_scale = {
        let mean = y.iter().sum::<f64>() / n as f64;
        y.iter().map(|v| (v - mean).abs()).fold(1.0, f64::max)
    };
    let max_abs = residuals.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
    if max_abs <= 1e-9 * y_scale {
        return Ok(LinearityTestResult {
            statistic: 0.0,
            p_value: 1.0,
            rejected: false,
            alpha,
            degrees_of_freedom: df,
        });
    }
    let mean = residuals.iter().sum::<f64>() / m as f64;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / df as f64;
    let statistic = mean / (var.sqrt() / (m as f64).sqrt());
    let dist =
        StudentsT::new(0.0, 1.0, df as f64).map_err(|e| LampError::TestUnavailable(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.sf(statistic.abs())).clamp(0.0, 1.0);
    Ok(LinearityTestResult { statistic, p_value, rejected: p_value < alpha, alpha, degrees_of_freedom: df })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noiseless_linear_data_is_not_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 2, |_, _| rng.random_range(0.0..1.0));
        let y: Vec<f64> = (0..30).map(|i| 0.3 + 0.5 * x[(i, 0)] - 0.2 * x[(i, 1)]).collect();
        let r = harvey_collier(&x, &y, 0.05).unwrap();
        assert!(r.statistic.abs() < 1e-6);
        assert!(r.p_value > 0.999);
        assert!(!r.rejected);
    }

    #[test]
    fn quadratic_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let x = DMatrix::<f64>::from_fn(60, 1, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..60).map(|i| x[(i, 0)].powi(2) + noise.sample(&mut rng)).collect();
        let r = harvey_collier(&x, &y, 0.05).unwrap();
        assert!(r.rejected, "p = {}", r.p_value);
    }

    #[test]
    fn rejection_flag_matches_p_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.3).unwrap();
        for _ in 0..20 {
            let x = DMatrix::from_fn(25, 2, |_, _| rng.random_range(0.0..1.0));
            let y: Vec<f64> = (0..25).map(|i| x[(i, 0)] + noise.sample(&mut rng)).collect();
            let r = harvey_collier(&x, &y, 0.1).unwrap();
            assert_eq!(r.rejected, r.p_value < 0.1);
            assert_eq!(r.degrees_of_freedom, 25 - 3 - 1);
        }
    }

    #[test]
    fn too_few_observations() {
        let x = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        assert!(matches!(
            harvey_collier(&x, &[1.0, 2.0, 3.0, 4.0], 0.05),
            Err(LampError::InsufficientData { required: 5, .. })
        ));
    }

    #[test]
    fn singular_design_is_unavailable() {
        let x = DMatrix::from_fn(10, 2, |i, j| (i as f64) * (j + 1) as f64);
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert!(matches!(harvey_collier(&x, &y, 0.05), Err(LampError::TestUnavailable(_))));
    }
}
