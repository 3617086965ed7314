//! Factor elicitation, meta-aggregation and seed weights.

use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::gateway::Gateway;
use crate::probe::WeightVector;

/// Default number of free-form explain queries.
pub const DEFAULT_REPEATS: usize = 10;
/// Default size of the aggregated factor set.
pub const DEFAULT_N_TARGET: usize = 5;

/// Case-folded, whitespace-collapsed factor text without terminal punctuation.
pub fn normalize_factor(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches(['.', '!', '?', ';', ':', ',']).trim_end().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorSource {
    Raw,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    pub factors: Vec<String>,
    pub source: FactorSource,
    /// Raw factors consumed to build this set, counted before deduplication.
    pub pool_size: usize,
}

impl FactorSet {
    pub fn new(factors: Vec<String>, source: FactorSource, pool_size: usize) -> Result<Self> {
        let set = Self { factors, source, pool_size };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(LampError::param("factor set is empty"));
        }
        let mut seen = Vec::with_capacity(self.factors.len());
        for (i, f) in self.factors.iter().enumerate() {
            let key = normalize_factor(f);
            if key.is_empty() {
                return Err(LampError::param(format!("factor {i} is empty")));
            }
            if seen.contains(&key) {
                return Err(LampError::param(format!("factor `{f}` appears twice")));
            }
            seen.push(key);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }
}

/// Deduplicated factors from repeated explain queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPool {
    pub factors: Vec<String>,
    /// Factor count before deduplication.
    pub pool_size: usize,
    /// Explain queries that failed and contributed nothing.
    pub failed_queries: usize,
}

/// Keeps the first occurrence of each normalised factor text.
pub fn dedup_factors<'a>(factors: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for f in factors {
        let key = normalize_factor(f);
        if !key.is_empty() && !seen.contains(&key) {
            seen.push(key);
            out.push(f.trim().to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedObservation {
    pub w0: WeightVector,
    /// Probability reported for the unperturbed input.
    pub p0: f64,
}

/// Issues `repeats` free-form explain queries and pools their factors in query order.
pub async fn elicit_factor_pool(gateway: &Gateway, text: &str, repeats: usize) -> Result<FactorPool> {
    if repeats == 0 {
        return Err(LampError::param("repeats must be at least 1"));
    }
    let responses = gateway.explain_repeats(text, repeats).await;
    let mut raw = Vec::new();
    let mut failed = 0;
    let mut last_error = None;
    for r in responses {
        match r {
            Ok(resp) => raw.extend(resp.factors.into_iter().map(|(f, _)| f)),
            Err(e) => {
                failed += 1;
                last_error = Some(e);
            }
        }
    }
    if failed == repeats {
        let cause = last_error.map(|e| e.to_string()).unwrap_or_default();
        return Err(LampError::Elicitation(format!("all {repeats} explain queries failed; last: {cause}")));
    }
    Ok(FactorPool {
        factors: dedup_factors(raw.iter().map(String::as_str)),
        pool_size: raw.len(),
        failed_queries: failed,
    })
}

/// Outcome of [`meta_aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub factors: FactorSet,
    pub warning: Option<String>,
}

/// Asks the model to consolidate `pool` into at most `n_target` themes.
pub async fn meta_aggregate(gateway: &Gateway, text: &str, pool: &[String], n_target: usize) -> Result<Aggregation> {
    if pool.is_empty() {
        return Err(LampError::param("factor pool is empty"));
    }
    if n_target == 0 {
        return Err(LampError::param("n_target must be at least 1"));
    }
    let returned = gateway.aggregate(text, pool, n_target).await.map_err(|e| match e {
        LampError::Parse { reason, .. } => LampError::Aggregation(reason),
        other => other,
    })?;
    let mut factors = dedup_factors(returned.iter().map(String::as_str));
    let mut warning = None;
    if factors.len() > n_target {
        factors.truncate(n_target);
    } else if factors.len() < n_target {
        warning = Some(format!(
            "aggregation returned {} distinct factors, fewer than the {n_target} requested",
            factors.len()
        ));
    }
    if factors.is_empty() {
        return Err(LampError::Aggregation("no factors returned".into()));
    }
    Ok(Aggregation { factors: FactorSet::new(factors, FactorSource::Aggregated, pool.len())?, warning })
}

/// Explains `text` with the factor list fixed, yielding `w0` and `p0`.
pub async fn seed_weights(gateway: &Gateway, text: &str, factors: &FactorSet) -> Result<SeedObservation> {
    let (p0, weights) = gateway.explain_fixed(text, &factors.factors).await?;
    Ok(SeedObservation { w0: WeightVector::new(weights)?, p0 })
}
