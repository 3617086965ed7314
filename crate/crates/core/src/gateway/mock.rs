//! Deterministic stand-in for a live model.
//!
//! A [`MockModel`] answers every query from a synthetic decision surface with
//! known derivatives. Replies are pure functions of the query and the sample
//! index, so whole audits are reproducible bit for bit.

use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatBackend, ChatRequest, Query};
use crate::error::{LampError, Result};
use crate::factors::normalize_factor;
use crate::probe::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceFamily {
    /// `b + aᵀw`
    Linear,
    /// `b + aᵀ(w − c) + ½(w − c)ᵀH(w − c)`
    Quadratic,
    /// `1 / (1 + exp(−(aᵀw + b)))`
    Sigmoid,
}

/// Synthetic decision surface with additive truncated Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSurface {
    pub family: SurfaceFamily,
    pub a: Vec<f64>,
    pub b: f64,
    /// Planted Hessian of the quadratic family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<Vec<Vec<f64>>>,
    /// Expansion point of the quadratic family; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard normal draw truncated to ±3, keyed by `(seed, index)`.
fn keyed_noise(seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)));
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MockSurface {
    pub fn linear(a: Vec<f64>, b: f64) -> Self {
        Self { family: SurfaceFamily::Linear, a, b, hessian: None, center: None, noise_sd: 0.0, seed: 0 }
    }

    pub fn sigmoid(a: Vec<f64>, b: f64) -> Self {
        Self { family: SurfaceFamily::Sigmoid, ..Self::linear(a, b) }
    }

    pub fn quadratic(a: Vec<f64>, b: f64, hessian: Vec<Vec<f64>>, center: Vec<f64>) -> Self {
        Self { family: SurfaceFamily::Quadratic, hessian: Some(hessian), center: Some(center), ..Self::linear(a, b) }
    }

    pub fn with_noise(mut self, noise_sd: f64, seed: u64) -> Self {
        self.noise_sd = noise_sd;
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(LampError::param("mock surface needs at least one coefficient"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(LampError::param("noise_sd must be finite and non-negative"));
        }
        if self.a.iter().chain([&self.b]).any(|v| !v.is_finite()) {
            return Err(LampError::param("mock surface coefficients must be finite"));
        }
        if let Some(h) = &self.hessian {
            if h.len() != d || h.iter().any(|r| r.len() != d) {
                return Err(LampError::param(format!("hessian must be {d}x{d}")));
            }
            for i in 0..d {
                for j in 0..i {
                    if h[i][j] != h[j][i] {
                        return Err(LampError::param("hessian must be symmetric"));
                    }
                }
            }
        }
        if self.center.as_ref().is_some_and(|c| c.len() != d) {
            return Err(LampError::param(format!("center must have length {d}")));
        }
        if self.family == SurfaceFamily::Quadratic && self.hessian.is_none() {
            return Err(LampError::param("quadratic surface needs a hessian"));
        }
        Ok(())
    }

    /// Noise-free surface value, before clamping.
    pub fn mean(&self, w: &[f64]) -> Result<f64> {
        if w.len() != self.dim() {
            return Err(LampError::param(format!(
                "weights have length {}, surface has dimension {}",
                w.len(),
                self.dim()
            )));
        }
        let dot = |v: &[f64]| self.a.iter().zip(v).map(|(a, x)| a * x).sum::<f64>();
        Ok(match self.family {
            SurfaceFamily::Linear => self.b + dot(w),
            SurfaceFamily::Sigmoid => sigmoid(dot(w) + self.b),
            SurfaceFamily::Quadratic => {
                let h = self.hessian.as_ref().ok_or_else(|| LampError::param("quadratic surface needs a hessian"))?;
                let u: Vec<f64> = match &self.center {
                    Some(c) => w.iter().zip(c).map(|(x, c)| x - c).collect(),
                    None => w.to_vec(),
                };
                let quad: f64 = (0..u.len()).map(|i| (0..u.len()).map(|j| u[i] * h[i][j] * u[j]).sum::<f64>()).sum();
                self.b + dot(&u) + 0.5 * quad
            }
        })
    }

    /// Analytic Hessian of the noise-free surface at `w`.
    pub fn analytic_hessian(&self, w: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        Ok(match self.family {
            SurfaceFamily::Linear => vec![vec![0.0; d]; d],
            SurfaceFamily::Quadratic => self.hessian.clone().expect("validated"),
            SurfaceFamily::Sigmoid => {
                let p = self.mean(w)?;
                let s = p * (1.0 - p) * (1.0 - 2.0 * p);
                (0..d).map(|i| (0..d).map(|j| s * self.a[i] * self.a[j]).collect()).collect()
            }
        })
    }

    /// Noise term for `sample_index`: `noise_sd · z`, `z` standard normal truncated at ±3.
    pub fn noise(&self, sample_index: u64) -> f64 {
        if self.noise_sd == 0.0 {
            0.0
        } else {
            self.noise_sd * keyed_noise(self.seed, sample_index)
        }
    }
}

/// Surface value at `w` plus the noise keyed by `sample_index`, clamped to `[0, 1]`.
pub fn mock_predict(surface: &MockSurface, w: &WeightVector, sample_index: u64) -> Result<f64> {
    Ok((surface.mean(w.as_slice())? + surface.noise(sample_index)).clamp(0.0, 1.0))
}

/// Probability driven by the presence of one whitespace token, for
/// token-deletion baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRule {
    pub token: String,
    pub present: f64,
    pub absent: f64,
}

/// Injected misbehaviour.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// Relabel sample indices that fail on every attempt.
    pub fail_relabel: Vec<usize>,
    /// First attempt of every request returns prose without JSON.
    pub malformed_first_attempt: bool,
    /// Relabel replies omit the probability key.
    pub omit_probability: bool,
    /// Relabel replies carry a probability of 1.7.
    pub out_of_range_probability: bool,
    /// Fixed-factor explain replies list the factors in reverse order.
    pub permute_fixed_factors: bool,
    /// Fixed-factor explain replies reword the factor at this position.
    pub rename_fixed_factor: Option<usize>,
}

/// A complete simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModel {
    pub surface: MockSurface,
    /// Factor names, one per surface coordinate.
    pub factors: Vec<String>,
    /// Importance weights reported for the unmodified text.
    pub w0: Vec<f64>,
    /// Factor lists returned by successive free-form explains (cycled);
    /// `factors` when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explain_pools: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_rule: Option<TokenRule>,
    #[serde(default)]
    pub faults: FaultPlan,
    /// Simulated response time per request.
    #[serde(default)]
    pub latency_ms: u64,
}

const MARKER_OPEN: &str = " [[rewrite:";
const MARKER_CLOSE: &str = "]]";

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl MockModel {
    pub fn new(surface: MockSurface, factors: Vec<String>, w0: Vec<f64>) -> Result<Self> {
        let model = Self {
            surface,
            factors,
            w0,
            explain_pools: Vec::new(),
            token_rule: None,
            faults: FaultPlan::default(),
            latency_ms: 0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.surface.validate()?;
        let d = self.surface.dim();
        if self.factors.len() != d || self.w0.len() != d {
            return Err(LampError::param(format!(
                "mock needs {d} factors and weights, has {} and {}",
                self.factors.len(),
                self.w0.len()
            )));
        }
        if self.w0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LampError::param("mock w0 must be finite and non-negative"));
        }
        Ok(())
    }

    /// Built-in configurations: `sigmoid`, `linear`, `quadratic`.
    pub fn preset(name: &str) -> Option<Self> {
        let factors: Vec<String> =
            ["praise for the acting", "engaging plot", "memorable soundtrack", "strong direction", "slow pacing"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let w0 = vec![0.3, 0.2, 0.2, 0.2, 0.1];
        let a = vec![6.0, 5.0, 3.0, 4.0, -5.0];
        let surface = match name {
            "sigmoid" => {
                // centred at p = 0.85
                let dot: f64 = a.iter().zip(&w0).map(|(a, w)| a * w).sum();
                MockSurface::sigmoid(a, (0.85f64 / 0.15).ln() - dot).with_noise(0.01, 7)
            }
            // centred at p = 0.5 with every perturbation at δ = 0.3 inside (0, 1)
            "linear" => MockSurface::linear(vec![2.0, 1.5, 1.0, 1.5, -2.0], -0.7).with_noise(0.01, 7),
            "quadratic" => {
                let h = vec![
                    vec![-2.0, 0.5, 0.0, 0.0, 0.0],
                    vec![0.5, -1.5, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, -1.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, -1.0, 0.2],
                    vec![0.0, 0.0, 0.0, 0.2, -0.5],
                ];
                MockSurface::quadratic(vec![0.4, 0.3, 0.2, 0.3, -0.3], 0.6, h, w0.clone()).with_noise(0.01, 7)
            }
            _ => return None,
        };
        Some(Self::new(surface, factors, w0).expect("preset is valid"))
    }

    pub fn from_json(source: &str) -> Result<Self> {
        let model: MockModel = serde_json::from_str(source)?;
        model.validate()?;
        Ok(model)
    }

    fn factor_index(&self, name: &str) -> Option<usize> {
        let key = normalize_factor(name);
        self.factors.iter().position(|f| normalize_factor(f) == key)
    }

    /// Splits a rewrite marker off `text`, returning the base text and deltas.
    fn decode(&self, text: &str) -> (String, Option<Vec<f64>>) {
        let Some(start) = text.rfind(MARKER_OPEN) else {
            return (text.to_string(), None);
        };
        let body = &text[start + MARKER_OPEN.len()..];
        let Some(end) = body.find(MARKER_CLOSE) else {
            return (text.to_string(), None);
        };
        let mut deltas = vec![0.0; self.factors.len()];
        for part in body[..end].split(',').filter(|s| !s.is_empty()) {
            if let Some((i, v)) = part.split_once('=') {
                if let (Ok(i), Ok(v)) = (i.parse::<usize>(), v.parse::<f64>()) {
                    if i < deltas.len() {
                        deltas[i] += v;
                    }
                }
            }
        }
        (text[..start].to_string(), Some(deltas))
    }

    /// Weights the mock associates with `text`: `w0` plus decoded rewrite deltas.
    pub fn text_weights(&self, text: &str) -> Vec<f64> {
        match self.decode(text).1 {
            Some(deltas) => self.w0.iter().zip(deltas).map(|(w, d)| (w + d).max(0.0)).collect(),
            None => self.w0.clone(),
        }
    }

    /// Probability the mock reports when explaining `text`.
    pub fn text_probability(&self, text: &str) -> Result<f64> {
        if let Some(rule) = &self.token_rule {
            let present = text.split_whitespace().any(|t| t == rule.token);
            let base = if present { rule.present } else { rule.absent };
            return Ok((base + self.surface.noise(fnv1a(text))).clamp(0.0, 1.0));
        }
        let (_, deltas) = self.decode(text);
        let index = if deltas.is_some() { fnv1a(text) } else { 0 };
        mock_predict(&self.surface, &WeightVector::new(self.text_weights(text))?, index)
    }

    fn reply(&self, request: &ChatRequest) -> Result<String> {
        if self.faults.malformed_first_attempt && request.attempt == 0 {
            return Ok("Let me think about this carefully. The answer seems fairly clear.".into());
        }
        let body = match &request.query {
            Query::Explain { text, fixed_factors, repeat } => {
                let p = self.text_probability(text)?;
                let w = self.text_weights(text);
                let weight_of = |name: &str, fallback: usize| {
                    self.factor_index(name).map(|j| w[j]).unwrap_or(self.w0[fallback % self.w0.len()])
                };
                let mut listed: Vec<(String, f64)> = match fixed_factors {
                    Some(fixed) => {
                        fixed.iter().map(|f| (f.clone(), self.factor_index(f).map(|j| w[j]).unwrap_or(0.0))).collect()
                    }
                    None => {
                        let pool = if self.explain_pools.is_empty() {
                            &self.factors
                        } else {
                            &self.explain_pools[repeat % self.explain_pools.len()]
                        };
                        pool.iter().enumerate().map(|(i, f)| (f.clone(), weight_of(f, i))).collect()
                    }
                };
                if fixed_factors.is_some() {
                    if self.faults.permute_fixed_factors {
                        listed.reverse();
                    }
                    if let Some(k) = self.faults.rename_fixed_factor {
                        if let Some(entry) = listed.get_mut(k) {
                            entry.0 = format!("{} (reworded)", entry.0);
                        }
                    }
                }
                let factors: Vec<_> = listed.iter().map(|(f, w)| json!({"factor": f, "importance": w})).collect();
                json!({"probability": p, "factors": factors})
            }
            Query::Aggregate { pool, n_target, .. } => {
                let mut seen = Vec::new();
                let mut out = Vec::new();
                for f in pool {
                    let key = normalize_factor(f);
                    if !seen.contains(&key) {
                        seen.push(key);
                        out.push(f.clone());
                    }
                    if out.len() == *n_target {
                        break;
                    }
                }
                json!({"factors": out})
            }
            Query::Relabel { factors, weights, sample_index, .. } => {
                if self.faults.fail_relabel.contains(sample_index) {
                    return Err(LampError::Endpoint(format!("injected failure at sample {sample_index}")));
                }
                if self.faults.omit_probability {
                    return Ok(json!({"classification": "positive"}).to_string());
                }
                if self.faults.out_of_range_probability {
                    return Ok(json!({"classification": "positive", "probability": 1.7}).to_string());
                }
                let mut w = self.w0.clone();
                for (f, v) in factors.iter().zip(weights) {
                    if let Some(j) = self.factor_index(f) {
                        w[j] = *v;
                    }
                }
                let p = mock_predict(&self.surface, &WeightVector::new(w)?, *sample_index as u64)?;
                let label = if p >= 0.5 { "positive" } else { "negative" };
                json!({"classification": label, "probability": p})
            }
            Query::Rewrite { text, factors, deltas } => {
                let (base, previous) = self.decode(text);
                let mut total = previous.unwrap_or_else(|| vec![0.0; self.factors.len()]);
                for (f, d) in factors.iter().zip(deltas) {
                    if let Some(j) = self.factor_index(f) {
                        total[j] += d;
                    }
                }
                let encoded: Vec<String> =
                    total.iter().enumerate().filter(|(_, d)| **d != 0.0).map(|(i, d)| format!("{i}={d}")).collect();
                let rewritten = format!("{base}{MARKER_OPEN}{}{MARKER_CLOSE}", encoded.join(","));
                json!({"rewritten_prompt": rewritten})
            }
        };
        Ok(body.to_string())
    }
}

#[async_trait]
impl ChatBackend for MockModel {
    async fn complete(&self, request: &ChatRequest) -> Result<String> {
        if self.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.latency_ms)).await;
        }
        self.reply(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn linear_arithmetic() {
        let s = MockSurface::linear(vec![0.2, 0.3], 0.1);
        assert!((mock_predict(&s, &wv(&[1.0, 1.0]), 0).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_at_zero_logit() {
        let s = MockSurface::sigmoid(vec![1.0; 5], -2.5);
        assert_eq!(mock_predict(&s, &wv(&[0.5; 5]), 0).unwrap(), 0.5);
    }

    #[test]
    fn deterministic_and_keyed_noise() {
        let s = MockSurface::sigmoid(vec![1.0, -1.0], 0.0).with_noise(0.05, 3);
        let w = wv(&[0.4, 0.1]);
        assert_eq!(mock_predict(&s, &w, 9).unwrap().to_bits(), mock_predict(&s, &w, 9).unwrap().to_bits());
        assert_ne!(mock_predict(&s, &w, 9).unwrap(), mock_predict(&s, &w, 10).unwrap());
    }

    #[test]
    fn noise_is_truncated_and_roughly_standard() {
        let s = MockSurface::linear(vec![0.0], 0.5).with_noise(1.0, 11);
        let draws: Vec<f64> = (0..20_000).map(|i| s.noise(i)).collect();
        assert!(draws.iter().all(|z| z.abs() <= 3.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.03);
        // variance of a standard normal truncated at ±3 is ≈ 0.9733
        assert!((var - 0.9733).abs() < 0.03, "{var}");
    }

    #[test]
    fn outputs_are_clamped() {
        let s = MockSurface::linear(vec![2.0], 0.0);
        assert_eq!(mock_predict(&s, &wv(&[1.0]), 0).unwrap(), 1.0);
        let s = MockSurface::linear(vec![-2.0], 0.0);
        assert_eq!(mock_predict(&s, &wv(&[1.0]), 0).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let s = MockSurface::linear(vec![0.2, 0.3], 0.1);
        assert!(mock_predict(&s, &wv(&[1.0]), 0).is_err());
    }

    #[test]
    fn sigmoid_hessian_matches_finite_differences() {
        let s = MockSurface::sigmoid(vec![2.0, -1.0, 0.5], 0.3);
        let w = [0.2, 0.4, 0.1];
        let h = s.analytic_hessian(&w).unwrap();
        let e = 1e-4;
        for i in 0..3 {
            for j in 0..3 {
                let f = |di: f64, dj: f64| {
                    let mut x = w;
                    x[i] += di;
                    x[j] += dj;
                    s.mean(&x).unwrap()
                };
                let fd = (f(e, e) - f(e, -e) - f(-e, e) + f(-e, -e)) / (4.0 * e * e);
                assert!((fd - h[i][j]).abs() < 1e-6, "{i}{j}: {fd} vs {}", h[i][j]);
            }
        }
    }

    #[test]
    fn quadratic_surface_formula() {
        let h = vec![vec![2.0, 1.0], vec![1.0, -1.0]];
        let s = MockSurface::quadratic(vec![0.5, 0.0], 0.2, h, vec![0.1, 0.1]);
        let v = s.mean(&[0.3, 0.2]).unwrap();
        let (u0, u1) = (0.2, 0.1);
        let expected = 0.2 + 0.5 * u0 + 0.5 * (2.0 * u0 * u0 + 2.0 * u0 * u1 - u1 * u1);
        assert!((v - expected).abs() < 1e-15);
        assert!(MockSurface { hessian: None, ..s.clone() }.validate().is_err());
        let asym = MockSurface::quadratic(vec![0.0, 0.0], 0.0, vec![vec![1.0, 2.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert!(asym.validate().is_err());
    }

    #[test]
    fn rewrite_marker_round_trip() {
        let m = MockModel::preset("sigmoid").unwrap();
        let req = ChatRequest {
            query: Query::Rewrite {
                text: "A fine film.".into(),
                factors: m.factors.clone(),
                deltas: vec![0.01, 0.0, -0.02, 0.0, 0.005],
            },
            messages: vec![],
            model: "mock".into(),
            temperature: 0.0,
            attempt: 0,
        };
        let raw = m.reply(&req).unwrap();
        let rewritten = super::super::parse::parse_rewrite(&raw).unwrap();
        assert!(rewritten.starts_with("A fine film."));
        let w = m.text_weights(&rewritten);
        let expected = [0.31, 0.2, 0.18, 0.2, 0.105];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(m.text_weights("A fine film."), m.w0);
    }

    #[test]
    fn preset_round_trips_through_json() {
        for name in ["sigmoid", "linear", "quadratic"] {
            let m = MockModel::preset(name).unwrap();
            let back = MockModel::from_json(&serde_json::to_string(&m).unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert!(MockModel::preset("nope").is_none());
    }

    #[test]
    fn sigmoid_preset_is_centred() {
        let m = MockModel::preset("sigmoid").unwrap();
        assert!((m.surface.mean(&m.w0).unwrap() - 0.85).abs() < 1e-12);
    }
}
