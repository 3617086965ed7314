//! Small dense least-squares routines shared by the surrogate, curvature and
//! diagnostics modules.
//!
//! Every fit carries an explicit, unpenalised intercept. The slope
//! coefficients are obtained from the thin SVD of the column-centred design,
//! which gives ridge solutions for `lambda > 0` and the minimum-norm
//! least-squares solution when the design is rank deficient.

use nalgebra::{DMatrix, DVector};

use crate::error::{LampError, Result};

/// What to do when the centred design does not have full column rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankPolicy {
    /// Fail with [`LampError::SingularFit`] naming the dependent columns.
    Strict,
    /// Return the minimum-norm solution and flag it.
    MinimumNorm,
}

/// Result of an affine least-squares fit `y ≈ intercept + X b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Residual sum of squares on the fitted rows.
    pub rss: f64,
    /// Total sum of squares around the mean of `y`.
    pub tss: f64,
    /// Numerical rank of the centred design.
    pub rank: usize,
    pub n: usize,
}

impl AffineFit {
    /// `1 - RSS/TSS`, clamped to `[0, 1]`; zero when `y` is constant.
    pub fn r_squared(&self) -> f64 {
        if self.tss <= 0.0 {
            return 0.0;
        }
        (1.0 - self.rss / self.tss).clamp(0.0, 1.0)
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Builds an `n × p` matrix from row slices.
pub fn matrix_from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<DMatrix<f64>> {
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != cols {
            return Err(LampError::param(format!("row {i} has {} entries, expected {cols}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(LampError::param(format!("non-finite entry at row {i}, column {j}")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i].as_ref()[j]))
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows().max(1) as f64;
    (0..x.ncols()).map(|j| x.column(j).sum() / n).collect()
}

/// Indices of columns that are (numerically) linear combinations of the
/// intercept and the columns before them. Uses modified Gram–Schmidt on the
/// centred columns, so a constant column is reported as collinear with the
/// intercept.
pub fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let means = column_means(x);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    let scale = (0..x.ncols()).map(|j| x.column(j).amax()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..x.ncols() {
        let mut v: DVector<f64> = x.column(j).map(|e| e - means[j]);
        let original = v.norm();
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let residual = v.norm();
        let tiny = 1e-12 * scale * (x.nrows() as f64).sqrt();
        if original <= tiny || residual <= 1e-9 * original {
            dependent.push(j);
        } else {
            basis.push(v / residual);
        }
    }
    dependent
}

/// Fits `y ≈ intercept + X b` minimising `‖y - intercept - Xb‖² + lambda‖b‖²`.
pub fn fit_affine(x: &DMatrix<f64>, y: &[f64], lambda: f64, policy: RankPolicy) -> Result<AffineFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(LampError::param(format!("design has {n} rows but response has {} entries", y.len())));
    }
    if n == 0 {
        return Err(LampError::InsufficientData { required: 1, available: 0, hint: None });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LampError::param(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(LampError::param("design or response contains non-finite values"));
    }

    let y_mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();

    if p == 0 {
        return Ok(AffineFit { intercept: y_mean, coefficients: Vec::new(), rss: tss, tss, rank: 0, n });
    }

    if lambda == 0.0 && policy == RankPolicy::Strict {
        let dependent = collinear_columns(x);
        if !dependent.is_empty() {
            return Err(LampError::SingularFit { columns: dependent });
        }
    }

    let means = column_means(x);
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let svd = xc.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0_f64, f64::max);
    let tol = (n.max(p) as f64) * f64::EPSILON * s_max;

    let mut beta = DVector::<f64>::zeros(p);
    let mut rank = 0;
    for k in 0..s.len() {
        let sk = s[k];
        if sk > tol {
            rank += 1;
        }
        let factor = if lambda > 0.0 {
            sk / (sk * sk + lambda)
        } else if sk > tol {
            1.0 / sk
        } else {
            continue;
        };
        let coef = u.column(k).dot(&yc) * factor;
        beta.axpy(coef, &v_t.row(k).transpose(), 1.0);
    }

    let intercept = y_mean - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let mut rss = 0.0;
    for i in 0..n {
        let fitted = intercept + (0..p).map(|j| beta[j] * x[(i, j)]).sum::<f64>();
        rss += (y[i] - fitted).powi(2);
    }

    Ok(AffineFit { intercept, coefficients: beta.iter().cloned().collect(), rss, tss, rank, n })
}
