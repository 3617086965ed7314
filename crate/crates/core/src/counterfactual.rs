//! Out-of-sample checks of a fitted surrogate.
//!
//! The input is rewritten so that its factors shift by known amounts, the
//! model re-reports weights and a probability for each rewrite, and the
//! surrogate's prediction at the re-reported weights is scored against the
//! model's probability with the Brier score. Naive and token-deletion
//! baselines are scored on the same cases.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::gateway::Gateway;
use crate::linalg::{self, RankPolicy};
use crate::probe::{predict, sample_jitters, SurrogateModel, WeightVector};
use crate::session::AuditSession;

/// Default number of rewrites per session.
pub const DEFAULT_REWRITES: usize = 20;
/// Default number of masked variants for the token baseline.
pub const DEFAULT_TOKEN_VARIANTS: usize = 50;
/// Support of the per-variant token deletion probability.
pub const DELETION_RANGE: (f64, f64) = (0.10, 0.30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCase {
    pub original_text: String,
    /// Requested change per factor, aligned with the factor set.
    pub deltas: Vec<f64>,
    pub rewritten_text: String,
    /// Weights the model reports for the rewritten text.
    pub w_rewritten: WeightVector,
    pub p_model: f64,
    pub p_surrogate: f64,
}

/// `(p_model − p_surrogate)²`.
pub fn brier(p_model: f64, p_surrogate: f64) -> Result<f64> {
    for (name, p) in [("p_model", p_model), ("p_surrogate", p_surrogate)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(LampError::param(format!("{name} = {p} is outside [0, 1]")));
        }
    }
    Ok((p_model - p_surrogate).powi(2))
}

/// Euclidean distance between the weight vectors and whether it stays
/// within `delta·√d`.
pub fn factor_distance_check(w0: &WeightVector, w_rewritten: &WeightVector, delta: f64) -> Result<(f64, bool)> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(LampError::param(format!("radius must be finite and >= 0, got {delta}")));
    }
    let distance = w0.distance(w_rewritten)?;
    let bound = delta * (w0.dim() as f64).sqrt();
    Ok((distance, distance <= bound))
}

/// Product-moment correlation; `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(LampError::param(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(LampError::param("correlation needs at least two pairs"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Mean and sample standard deviation of one method's Brier scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MethodScore {
    pub fn from_scores(scores: &[f64]) -> Self {
        let n = scores.len();
        if n == 0 {
            return Self { mean: 0.0, sd: 0.0, n };
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let sd =
            if n > 1 { (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, sd, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub surrogate: MethodScore,
    /// Intercept-only restriction of the surrogate.
    pub mean_baseline: MethodScore,
    /// Always 0.5.
    pub uniform_baseline: MethodScore,
    /// Seeded fair coin over {0, 1}.
    pub random_baseline: MethodScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_surrogate: Option<MethodScore>,
    /// Correlation of surrogate and model probabilities; `None` when undefined.
    pub pearson_r: Option<f64>,
    pub n_cases: usize,
    pub factor_distance_violations: usize,
    /// Radius used for the distance bound `radius·√d`.
    pub radius: f64,
}

/// Linear surrogate over binary token-presence features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSurrogate {
    /// Distinct whitespace tokens in first-occurrence order.
    pub tokens: Vec<String>,
    pub model: SurrogateModel,
    pub deletion_probabilities: Vec<f64>,
    pub failed_queries: usize,
}

impl TokenSurrogate {
    pub fn features(&self, text: &str) -> Vec<f64> {
        let present: Vec<&str> = text.split_whitespace().collect();
        self.tokens.iter().map(|t| if present.contains(&t.as_str()) { 1.0 } else { 0.0 }).collect()
    }

    pub fn predict_text(&self, text: &str) -> Result<f64> {
        Ok(self.model.raw(&self.features(text))?.clamp(0.0, 1.0))
    }
}

/// One masked variant: the per-variant deletion probability and which token
/// occurrences survive.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVariant {
    pub deletion_probability: f64,
    pub kept: Vec<bool>,
}

/// Draws `m` masks over `n_tokens` token occurrences.
pub fn mask_variants(n_tokens: usize, m: usize, seed: u64) -> Vec<MaskedVariant> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let q = rng.random_range(DELETION_RANGE.0..=DELETION_RANGE.1);
            let kept = (0..n_tokens).map(|_| !rng.random_bool(q)).collect();
            MaskedVariant { deletion_probability: q, kept }
        })
        .collect()
}

/// Fits the token-deletion baseline for `text` from `m` masked variants.
pub async fn token_surrogate(gateway: &Gateway, text: &str, m: usize, seed: u64) -> Result<TokenSurrogate> {
    let occurrences: Vec<&str> = text.split_whitespace().collect();
    if occurrences.len() < 2 {
        return Err(LampError::param("token baseline needs at least two whitespace-delimited tokens"));
    }
    if m < 2 {
        return Err(LampError::param("token baseline needs at least two variants"));
    }
    let mut tokens: Vec<String> = Vec::new();
    let mut column: HashMap<&str, usize> = HashMap::new();
    for t in &occurrences {
        if !column.contains_key(t) {
            column.insert(t, tokens.len());
            tokens.push(t.to_string());
        }
    }
    let variants = mask_variants(occurrences.len(), m, seed);
    let texts: Vec<String> = variants
        .iter()
        .map(|v| occurrences.iter().zip(&v.kept).filter(|(_, k)| **k).map(|(t, _)| *t).collect::<Vec<_>>().join(" "))
        .collect();
    let futures = texts
        .iter()
        .enumerate()
        .map(|(i, t)| async move {
            let mut rec = Vec::new();
            (gateway.explain_rec(t, i, &mut rec).await.map(|r| r.probability), rec)
        })
        .collect();
    let answers = gateway.traced_batch(futures).await;

    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut failed = 0;
    for (variant, answer) in variants.iter().zip(answers) {
        match answer {
            Ok(p) => {
                let mut row = vec![0.0; tokens.len()];
                for (t, k) in occurrences.iter().zip(&variant.kept) {
                    if *k {
                        row[column[t]] = 1.0;
                    }
                }
                rows.push(row);
                y.push(p);
            }
            Err(_) => failed += 1,
        }
    }
    if y.len() < 2 {
        return Err(LampError::InsufficientData {
            required: 2,
            available: y.len(),
            hint: Some("token baseline queries failed".into()),
        });
    }
    let x = linalg::matrix_from_rows(&rows, tokens.len())?;
    let fit = linalg::fit_affine(&x, &y, 0.0, RankPolicy::MinimumNorm)?;
    Ok(TokenSurrogate {
        tokens,
        model: SurrogateModel::from_fit(&fit, 0.0),
        deletion_probabilities: variants.iter().map(|v| v.deletion_probability).collect(),
        failed_queries: failed,
    })
}

/// Rewrites `text` `count` times with factor shifts `w0 ⊙ ε`, `ε ~ U(−radius, radius)^d`,
/// and re-extracts weights and probability from each rewrite. Returns the
/// completed cases and a message for every rewrite that failed.
#[allow(clippy::too_many_arguments)]
pub async fn generate_rewrites(
    gateway: &Gateway,
    text: &str,
    factors: &[String],
    w0: &WeightVector,
    surrogate: &SurrogateModel,
    radius: f64,
    count: usize,
    seed: u64,
) -> Result<(Vec<RewriteCase>, Vec<String>)> {
    if count == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let jitters = sample_jitters(w0.dim(), radius, count, seed)?;
    let deltas: Vec<Vec<f64>> =
        jitters.iter().map(|j| w0.as_slice().iter().zip(&j.epsilon).map(|(w, e)| w * e).collect()).collect();
    let futures = deltas
        .iter()
        .map(|delta| async move {
            let mut rec = Vec::new();
            let result = async {
                let rewritten = gateway.rewrite_rec(text, factors, delta, &mut rec).await?;
                let (p_model, weights) = gateway.explain_fixed_rec(&rewritten, factors, &mut rec).await?;
                let w_rewritten = WeightVector::new(weights)?;
                let p_surrogate = predict(surrogate, &w_rewritten)?.probability;
                Ok(RewriteCase {
                    original_text: text.to_string(),
                    deltas: delta.clone(),
                    rewritten_text: rewritten,
                    w_rewritten,
                    p_model,
                    p_surrogate,
                })
            }
            .await;
            (result, rec)
        })
        .collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in gateway.traced_batch(futures).await.into_iter().enumerate() {
        match r {
            Ok(c) => cases.push(c),
            Err(e) => failures.push(format!("rewrite {i}: {e}")),
        }
    }
    if cases.is_empty() {
        return Err(LampError::Rewrite(format!("all {count} rewrites failed: {}", failures.join("; "))));
    }
    Ok((cases, failures))
}

/// Scores `cases` for the surrogate and every baseline.
pub fn evaluate_cases(
    surrogate: &SurrogateModel,
    w0: &WeightVector,
    radius: f64,
    cases: &[RewriteCase],
    token: Option<&TokenSurrogate>,
    seed: u64,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(LampError::param("no rewrite cases to evaluate"));
    }
    let mean_model = surrogate.intercept_only();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut mb, mut ub, mut rb, mut tb) = (vec![], vec![], vec![], vec![], vec![]);
    let mut violations = 0;
    for case in cases {
        let p = case.p_model;
        let p_s = predict(surrogate, &case.w_rewritten)?.probability;
        s.push(brier(p, p_s)?);
        mb.push(brier(p, predict(&mean_model, &case.w_rewritten)?.probability)?);
        ub.push(brier(p, 0.5)?);
        let coin = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        rb.push(brier(p, coin)?);
        if let Some(t) = token {
            tb.push(brier(p, t.predict_text(&case.rewritten_text)?)?);
        }
        if !factor_distance_check(w0, &case.w_rewritten, radius)?.1 {
            violations += 1;
        }
    }
    let pearson_r = if cases.len() >= 2 {
        let ps: Vec<f64> = cases.iter().map(|c| c.p_surrogate).collect();
        let pm: Vec<f64> = cases.iter().map(|c| c.p_model).collect();
        pearson(&ps, &pm)?
    } else {
        None
    };
    Ok(EvalReport {
        surrogate: MethodScore::from_scores(&s),
        mean_baseline: MethodScore::from_scores(&mb),
        uniform_baseline: MethodScore::from_scores(&ub),
        random_baseline: MethodScore::from_scores(&rb),
        token_surrogate: token.map(|_| MethodScore::from_scores(&tb)),
        pearson_r,
        n_cases: cases.len(),
        factor_distance_violations: violations,
        radius,
    })
}

/// Scores rewrites against the final surrogate of `session`.
pub fn evaluate(
    session: &AuditSession,
    cases: &[RewriteCase],
    token: Option<&TokenSurrogate>,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_cases(&session.surrogate, &session.seed.w0, session.validity_radius(), cases, token, seed)
}
