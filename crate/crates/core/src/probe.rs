//! Weight-space perturbation and the local linear surrogate.
//!
//! A probe starts from the model's self-reported importance weights `w0`,
//! draws multiplicative jitters `w0 ⊙ (1 + ε)` with `ε ~ U(-δ, δ)^d`, and
//! regresses the model's reported probabilities on the perturbed weights.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::linalg::{self, RankPolicy};

/// Default number of perturbations per probe.
pub const DEFAULT_PERTURBATIONS: usize = 50;

/// Importance weights, one per factor. Entries are finite; no sum constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LampError::param("weight vector must have at least one entry"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LampError::param(format!("weight {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance to another vector of the same length.
    pub fn distance(&self, other: &WeightVector) -> Result<f64> {
        check_len(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }
}

impl AsRef<[f64]> for WeightVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LampError::param(format!("length mismatch: expected {expected}, got {got}")));
    }
    Ok(())
}

/// One relative perturbation `ε` drawn from `U(-scale, scale)^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterVector {
    pub epsilon: Vec<f64>,
    pub scale: f64,
}

impl JitterVector {
    pub fn zeros(dim: usize, scale: f64) -> Self {
        Self { epsilon: vec![0.0; dim], scale }
    }

    pub fn sup_norm(&self) -> f64 {
        self.epsilon.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.epsilon.iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

/// A perturbed weight vector together with the probability the model
/// reported for it. Index 0 is the unperturbed seed observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub index: usize,
    pub weights: WeightVector,
    pub probability: f64,
    pub jitter: Option<JitterVector>,
}

impl ProbeSample {
    pub fn seed(weights: WeightVector, probability: f64) -> Self {
        Self { index: 0, weights, probability, jitter: None }
    }

    pub fn is_seed(&self) -> bool {
        self.jitter.is_none()
    }
}

/// Fitted local surrogate `p ≈ intercept + βᵀw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub r_squared: f64,
    /// RSS / (n - rank - 1); zero when no residual degrees of freedom remain.
    pub residual_variance: f64,
    pub n_samples: usize,
    pub ridge_lambda: f64,
    /// Set when the fit fell back to the minimum-norm solution.
    #[serde(default)]
    pub rank_deficient: bool,
}

impl SurrogateModel {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_norm(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    /// Unclamped affine prediction.
    pub fn raw(&self, w: &[f64]) -> Result<f64> {
        check_len(self.dim(), w.len())?;
        Ok(self.intercept + self.beta.iter().zip(w).map(|(b, x)| b * x).sum::<f64>())
    }

    /// Intercept-only restriction of this surrogate (the mean baseline).
    pub fn intercept_only(&self) -> SurrogateModel {
        SurrogateModel { beta: vec![0.0; self.dim()], r_squared: 0.0, ..self.clone() }
    }

    pub(crate) fn from_fit(fit: &linalg::AffineFit, lambda: f64) -> Self {
        let dof = fit.n as i64 - fit.rank as i64 - 1;
        let residual_variance = if dof > 0 { fit.rss / dof as f64 } else { 0.0 };
        SurrogateModel {
            intercept: fit.intercept,
            beta: fit.coefficients.clone(),
            r_squared: fit.r_squared(),
            residual_variance,
            n_samples: fit.n,
            ridge_lambda: lambda,
            rank_deficient: fit.rank < fit.coefficients.len(),
        }
    }
}

/// Surrogate output clamped to a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub raw: f64,
    pub clamped: bool,
}

/// Result of [`apply_jitter`]; `clamped` lists coordinates that went negative.
#[derive(Debug, Clone, PartialEq)]
pub struct JitteredWeights {
    pub weights: WeightVector,
    pub clamped: Vec<usize>,
}

impl JitteredWeights {
    pub fn is_degenerate(&self) -> bool {
        !self.clamped.is_empty()
    }
}

/// Draws `m` jitter vectors of dimension `d` from `U(-delta, delta)`.
pub fn sample_jitters(d: usize, delta: f64, m: usize, seed: u64) -> Result<Vec<JitterVector>> {
    if d == 0 || m == 0 {
        return Err(LampError::param(format!("dimension and count must be positive (d={d}, m={m})")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(LampError::param(format!("perturbation radius must be positive, got {delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m)
        .map(|_| JitterVector { epsilon: (0..d).map(|_| rng.random_range(-delta..=delta)).collect(), scale: delta })
        .collect())
}

/// `w ⊙ (1 + ε)`, clamped at zero.
pub fn apply_jitter(w0: &WeightVector, eps: &JitterVector) -> Result<JitteredWeights> {
    check_len(w0.dim(), eps.epsilon.len())?;
    let mut clamped = Vec::new();
    let values = w0
        .as_slice()
        .iter()
        .zip(&eps.epsilon)
        .enumerate()
        .map(|(i, (w, e))| {
            let v = w * (1.0 + e);
            if v < 0.0 {
                clamped.push(i);
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(JitteredWeights { weights: WeightVector::new(values)?, clamped })
}

/// Fits the surrogate on `samples` with ridge penalty `lambda` on the slopes.
pub fn fit_surrogate(samples: &[ProbeSample], lambda: f64) -> Result<SurrogateModel> {
    let d = samples.first().map(|s| s.weights.dim()).ok_or(LampError::InsufficientData {
        required: 3,
        available: 0,
        hint: None,
    })?;
    if samples.len() < d + 2 {
        return Err(LampError::InsufficientData { required: d + 2, available: samples.len(), hint: None });
    }
    let (x, y) = design(samples)?;
    let fit = linalg::fit_affine(&x, &y, lambda, RankPolicy::Strict)?;
    Ok(SurrogateModel::from_fit(&fit, lambda))
}

/// Design matrix (rows = perturbed weights) and response vector.
pub fn design(samples: &[ProbeSample]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let d = samples.first().map(|s| s.weights.dim()).unwrap_or(0);
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.weights.as_slice()).collect();
    let x = linalg::matrix_from_rows(&rows, d)?;
    let y = samples.iter().map(|s| s.probability).collect();
    Ok((x, y))
}

/// Surrogate prediction at `w`, clamped to `[0, 1]`.
pub fn predict(model: &SurrogateModel, w: &WeightVector) -> Result<Prediction> {
    let raw = model.raw(w.as_slice())?;
    let probability = raw.clamp(0.0, 1.0);
    Ok(Prediction { probability, raw, clamped: probability != raw })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn samples_from(rows: &[Vec<f64>], f: impl Fn(&[f64]) -> f64) -> Vec<ProbeSample> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| ProbeSample {
                index: i,
                weights: wv(r),
                probability: f(r),
                jitter: (i > 0).then(|| JitterVector::zeros(r.len(), 0.1)),
            })
            .collect()
    }

    fn generic_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn apply_jitter_elementwise() {
        let out = apply_jitter(&wv(&[0.4, 0.6]), &JitterVector { epsilon: vec![0.1, -0.05], scale: 0.1 }).unwrap();
        assert!((out.weights.as_slice()[0] - 0.44).abs() < 1e-15);
        assert!((out.weights.as_slice()[1] - 0.57).abs() < 1e-15);
        assert!(!out.is_degenerate());
    }

    #[test]
    fn zero_jitter_is_identity() {
        let w = wv(&[0.3, 0.2, 0.9]);
        let out = apply_jitter(&w, &JitterVector::zeros(3, 0.2)).unwrap();
        assert_eq!(out.weights, w);
    }

    #[test]
    fn oversized_jitter_clamps_with_warning() {
        let out = apply_jitter(&wv(&[0.1]), &JitterVector { epsilon: vec![-1.5], scale: 1.6 }).unwrap();
        assert_eq!(out.weights.as_slice(), &[0.0]);
        assert_eq!(out.clamped, vec![0]);
    }

    #[test]
    fn apply_jitter_length_mismatch() {
        assert!(apply_jitter(&wv(&[0.1, 0.2]), &JitterVector::zeros(3, 0.1)).is_err());
    }

    #[test]
    fn jitters_are_seeded_and_bounded() {
        let a = sample_jitters(3, 0.2, 100, 7).unwrap();
        let b = sample_jitters(3, 0.2, 100, 7).unwrap();
        assert_eq!(a, b);
        let bits =
            |v: &[JitterVector]| -> Vec<u64> { v.iter().flat_map(|j| j.epsilon.iter().map(|e| e.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert!(a.iter().all(|j| j.epsilon.len() == 3 && j.sup_norm() <= 0.2));
        assert_ne!(a, sample_jitters(3, 0.2, 100, 8).unwrap());
    }

    #[test]
    fn jitter_variance_matches_uniform() {
        let draws = sample_jitters(1, 0.3, 100_000, 11).unwrap();
        let xs: Vec<f64> = draws.iter().map(|j| j.epsilon[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = 0.3_f64.powi(2) / 3.0;
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn sample_jitters_rejects_bad_parameters() {
        assert!(sample_jitters(0, 0.1, 1, 0).is_err());
        assert!(sample_jitters(2, 0.0, 1, 0).is_err());
        assert!(sample_jitters(2, -0.1, 1, 0).is_err());
        assert!(sample_jitters(2, 0.1, 0, 0).is_err());
    }

    #[test]
    fn noiseless_linear_recovery() {
        let rows = generic_rows(10, 2, 3);
        let s = samples_from(&rows, |w| 2.0 * w[0] + 3.0 * w[1] + 0.1);
        let m = fit_surrogate(&s, 0.0).unwrap();
        assert!((m.beta[0] - 2.0).abs() < 1e-9);
        assert!((m.beta[1] - 3.0).abs() < 1e-9);
        assert!((m.intercept - 0.1).abs() < 1e-9);
        assert!((m.r_squared - 1.0).abs() < 1e-9);
        assert_eq!(m.n_samples, 10);
    }

    #[test]
    fn huge_ridge_shrinks_to_mean() {
        let rows = generic_rows(10, 2, 3);
        let s = samples_from(&rows, |w| 2.0 * w[0] + 3.0 * w[1] + 0.1);
        let m = fit_surrogate(&s, 1e9).unwrap();
        let mean = s.iter().map(|s| s.probability).sum::<f64>() / s.len() as f64;
        assert!(m.beta_norm() < 1e-6);
        assert!((m.intercept - mean).abs() < 1e-6);
    }

    #[test]
    fn too_few_samples() {
        let rows = generic_rows(3, 2, 1);
        let s = samples_from(&rows, |w| w[0]);
        assert!(matches!(fit_surrogate(&s, 0.0), Err(LampError::InsufficientData { required: 4, available: 3, .. })));
    }

    #[test]
    fn collinear_design_names_columns() {
        let rows: Vec<Vec<f64>> = generic_rows(8, 2, 5).into_iter().map(|r| vec![r[0], r[1], 2.0 * r[0]]).collect();
        let s = samples_from(&rows, |w| w[0] + w[1]);
        match fit_surrogate(&s, 0.0) {
            Err(LampError::SingularFit { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("expected singular fit, got {other:?}"),
        }
        // ridge makes it well posed
        assert!(fit_surrogate(&s, 0.1).is_ok());
    }

    #[test]
    fn predict_examples() {
        let m = SurrogateModel {
            intercept: 0.1,
            beta: vec![2.0, 3.0],
            r_squared: 1.0,
            residual_variance: 0.0,
            n_samples: 10,
            ridge_lambda: 0.0,
            rank_deficient: false,
        };
        let p = predict(&m, &wv(&[0.1, 0.1])).unwrap();
        assert!((p.probability - 0.6).abs() < 1e-12 && !p.clamped);

        let mean = SurrogateModel { intercept: 0.97, beta: vec![0.0, 0.0], ..m.clone() };
        assert_eq!(predict(&mean, &wv(&[0.8, 0.3])).unwrap().probability, 0.97);

        let steep = SurrogateModel { intercept: 0.0, beta: vec![5.0, 5.0], ..m.clone() };
        let p = predict(&steep, &wv(&[0.5, 0.5])).unwrap();
        assert_eq!(p.raw, 5.0);
        assert_eq!(p.probability, 1.0);
        assert!(p.clamped);

        assert!(predict(&m, &wv(&[0.1])).is_err());
    }

    #[test]
    fn weight_vector_rejects_non_finite() {
        assert!(WeightVector::new(vec![0.1, f64::NAN]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
    }
}
