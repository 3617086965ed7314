//! Local curvature of the decision surface and the MSE-optimal perturbation
//! radius.
//!
//! The quadratic fit regresses probabilities on the displacements
//! `δ_i = w̃_i - w0` and their pairwise products, giving a gradient and a
//! Hessian of the second-order expansion
//! `y ≈ c + gᵀδ + ½ δᵀHδ`. The radius trades the curvature bias
//! `‖H‖²_F δ⁴ / 36` against the variance `σ² / (n δ^d)` of a uniform kernel.

use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::linalg::{self, RankPolicy};
use crate::probe::{ProbeSample, WeightVector};

/// Symmetric matrix stored as its packed upper triangle (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; dim * (dim + 1) / 2] }
    }

    /// Builds from a dense matrix, reading only the upper triangle.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (a, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(LampError::param("hessian must be square"));
            }
            for b in a..dim {
                m.set(a, b, row[b]);
            }
        }
        Ok(m)
    }

    fn offset(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        a * self.dim - a * (a + 1) / 2 + b
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.upper[self.offset(a, b)]
    }

    pub fn set(&mut self, a: usize, b: usize, value: f64) {
        let k = self.offset(a, b);
        self.upper[k] = value;
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|a| (0..self.dim).map(|b| self.get(a, b)).collect()).collect()
    }

    pub fn frobenius(&self) -> f64 {
        let mut sum = 0.0;
        for a in 0..self.dim {
            for b in 0..self.dim {
                sum += self.get(a, b).powi(2);
            }
        }
        sum.sqrt()
    }

    /// `D H D` for `D = diag(scale)`.
    pub fn congruent_diagonal(&self, scale: &[f64]) -> SymmetricMatrix {
        let mut out = self.clone();
        for a in 0..self.dim {
            for b in a..self.dim {
                out.set(a, b, self.get(a, b) * scale[a] * scale[b]);
            }
        }
        out
    }

    /// `xᵀ H x`
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for a in 0..self.dim {
            for b in 0..self.dim {
                sum += x[a] * self.get(a, b) * x[b];
            }
        }
        sum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub gradient: Vec<f64>,
    pub hessian: SymmetricMatrix,
    pub hessian_frobenius: f64,
    pub residual_variance: f64,
    pub n_samples: usize,
    pub dim: usize,
}

impl CurvatureEstimate {
    /// Frobenius norm of the Hessian expressed in relative-jitter
    /// coordinates, i.e. of `diag(w0) H diag(w0)`. This is the curvature
    /// seen by the `U(-δ, δ)` kernel on `ε` when `w̃ = w0 ⊙ (1 + ε)`.
    pub fn jitter_space_frobenius(&self, center: &WeightVector) -> Result<f64> {
        if center.dim() != self.dim {
            return Err(LampError::param("center dimension does not match the curvature estimate"));
        }
        Ok(self.hessian.congruent_diagonal(center.as_slice()).frobenius())
    }
}

/// Minimum sample count for a quadratic fit in `d` dimensions.
pub fn quadratic_min_samples(d: usize) -> usize {
    1 + d + d * (d + 1) / 2 + 1
}

/// Second-order least-squares fit around `center`.
pub fn fit_quadratic(samples: &[ProbeSample], center: &WeightVector) -> Result<CurvatureEstimate> {
    let d = center.dim();
    let required = quadratic_min_samples(d);
    if samples.len() < required {
        return Err(LampError::InsufficientData {
            required,
            available: samples.len(),
            hint: Some(format!("a quadratic fit in {d} dimensions needs {required} samples")),
        });
    }
    let n_monomials = d * (d + 1) / 2;
    let p = d + n_monomials;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.weights.dim() != d {
            return Err(LampError::param("sample dimension does not match center"));
        }
        let delta: Vec<f64> = s.weights.as_slice().iter().zip(center.as_slice()).map(|(w, c)| w - c).collect();
        let mut row = Vec::with_capacity(p);
        row.extend_from_slice(&delta);
        for a in 0..d {
            for b in a..d {
                row.push(delta[a] * delta[b]);
            }
        }
        rows.push(row);
    }
    let x = linalg::matrix_from_rows(&rows, p)?;
    let y: Vec<f64> = samples.iter().map(|s| s.probability).collect();
    let fit = linalg::fit_affine(&x, &y, 0.0, RankPolicy::Strict)?;

    let mut hessian = SymmetricMatrix::zeros(d);
    let mut k = d;
    for a in 0..d {
        for b in a..d {
            let c = fit.coefficients[k];
            hessian.set(a, b, if a == b { 2.0 * c } else { c });
            k += 1;
        }
    }
    let dof = samples.len() - (1 + p);
    Ok(CurvatureEstimate {
        gradient: fit.coefficients[..d].to_vec(),
        hessian_frobenius: hessian.frobenius(),
        hessian,
        residual_variance: fit.rss / dof as f64,
        n_samples: samples.len(),
        dim: d,
    })
}

/// `MSE(δ) = ‖H‖²_F δ⁴ / 36 + σ² / (n δ^d)`.
pub fn mse_curve(delta: f64, hessian_frobenius: f64, sigma2: f64, n: usize, d: usize) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(LampError::param(format!("radius must be positive, got {delta}")));
    }
    if n == 0 || d == 0 {
        return Err(LampError::param("n and d must be at least 1"));
    }
    if !(hessian_frobenius >= 0.0) || !(sigma2 >= 0.0) {
        return Err(LampError::param("curvature and variance must be non-negative"));
    }
    let bias2 = hessian_frobenius.powi(2) * delta.powi(4) / 36.0;
    let variance = sigma2 / (n as f64 * delta.powi(d as i32));
    Ok(bias2 + variance)
}

/// Outcome of the closed-form radius selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RadiusOutcome {
    /// Finite MSE minimiser.
    Optimal(f64),
    /// Zero curvature: the MSE decreases monotonically, keep the probe radius.
    FlatSurface,
    /// Zero residual variance: the minimiser collapses to radius 0.
    Noiseless,
}

impl RadiusOutcome {
    pub fn radius(&self) -> Option<f64> {
        match self {
            RadiusOutcome::Optimal(r) => Some(*r),
            RadiusOutcome::Noiseless => Some(0.0),
            RadiusOutcome::FlatSurface => None,
        }
    }
}

/// `δ* = (9 d σ² / (n ‖H‖²_F))^{1/(4+d)}`.
pub fn optimal_radius(d: usize, n: usize, sigma2: f64, hessian_frobenius: f64) -> Result<RadiusOutcome> {
    if d == 0 || n == 0 {
        return Err(LampError::param("n and d must be at least 1"));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(LampError::param(format!("residual variance must be finite and >= 0, got {sigma2}")));
    }
    if !(hessian_frobenius >= 0.0) || !hessian_frobenius.is_finite() {
        return Err(LampError::param(format!("hessian norm must be finite and >= 0, got {hessian_frobenius}")));
    }
    if hessian_frobenius == 0.0 {
        return Ok(RadiusOutcome::FlatSurface);
    }
    if sigma2 == 0.0 {
        return Ok(RadiusOutcome::Noiseless);
    }
    let ratio = 9.0 * d as f64 * sigma2 / (n as f64 * hessian_frobenius.powi(2));
    Ok(RadiusOutcome::Optimal(ratio.powf(1.0 / (4.0 + d as f64))))
}

/// How a sample's jitter is compared with the truncation radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationNorm {
    #[default]
    Sup,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub kept: usize,
    pub discarded: usize,
    /// `n / (n - k)`
    pub inflation_factor: f64,
    /// `None` when no finite optimal radius exists.
    pub delta_star: Option<f64>,
    pub delta_used: f64,
    pub norm: TruncationNorm,
}

impl TruncationReport {
    pub fn untruncated(n: usize, delta_used: f64, delta_star: Option<f64>, norm: TruncationNorm) -> Self {
        Self { kept: n, discarded: 0, inflation_factor: 1.0, delta_star, delta_used, norm }
    }
}

/// Variance inflation `n / (n - k)` from discarding `k` of `n` samples.
pub fn inflation_factor(n: usize, k: usize) -> f64 {
    n as f64 / (n - k) as f64
}

/// Keeps the seed sample and every sample whose jitter norm is `<= delta_star`.
pub fn truncate_samples(
    samples: &[ProbeSample],
    delta_star: f64,
    norm: TruncationNorm,
) -> Result<(Vec<ProbeSample>, TruncationReport)> {
    if !(delta_star >= 0.0) {
        return Err(LampError::param(format!("truncation radius must be >= 0, got {delta_star}")));
    }
    let d = samples.first().map(|s| s.weights.dim()).unwrap_or(0);
    let delta_used = samples.iter().filter_map(|s| s.jitter.as_ref().map(|j| j.scale)).fold(0.0, f64::max);
    let kept: Vec<ProbeSample> = samples
        .iter()
        .filter(|s| match &s.jitter {
            None => true,
            Some(j) => {
                let size = match norm {
                    TruncationNorm::Sup => j.sup_norm(),
                    TruncationNorm::Euclidean => j.euclidean_norm(),
                };
                size <= delta_star
            }
        })
        .cloned()
        .collect();
    if kept.len() < d + 2 {
        return Err(LampError::InsufficientData {
            required: d + 2,
            available: kept.len(),
            hint: Some(format!("re-probe with a radius at or below {delta_star:.4}")),
        });
    }
    let n = samples.len();
    let k = n - kept.len();
    let report = TruncationReport {
        kept: kept.len(),
        discarded: k,
        inflation_factor: inflation_factor(n, k),
        delta_star: Some(delta_star),
        delta_used,
        norm,
    };
    Ok((kept, report))
}
