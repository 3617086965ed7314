//! End-to-end audit: elicit factors, probe, fit, pick the radius, truncate,
//! diagnose and optionally evaluate on counterfactual rewrites.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::counterfactual::{self, DEFAULT_REWRITES, DEFAULT_TOKEN_VARIANTS};
use crate::curvature::{
    fit_quadratic, optimal_radius, quadratic_min_samples, truncate_samples, RadiusOutcome, TruncationNorm,
    TruncationReport,
};
use crate::diagnostics::{bic, harvey_collier, r_squared_centered};
use crate::error::{LampError, Result};
use crate::factors::{elicit_factor_pool, meta_aggregate, seed_weights, DEFAULT_N_TARGET, DEFAULT_REPEATS};
use crate::gateway::mock::splitmix64;
use crate::gateway::Gateway;
use crate::probe::{apply_jitter, design, fit_surrogate, sample_jitters, ProbeSample, DEFAULT_PERTURBATIONS};
use crate::session::{
    AuditSession, DraftSession, DroppedSample, Evaluation, ProbeParameters, SessionDiagnostics, SCHEMA_VERSION,
};

/// Timestamp used when the configuration does not pin one.
pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub delta: f64,
    pub m: usize,
    pub repeats: usize,
    pub n_target: usize,
    pub lambda: f64,
    pub seed: u64,
    pub evaluate: bool,
    pub rewrite_count: usize,
    pub truncation_norm: TruncationNorm,
    /// Significance level of the linearity test.
    pub alpha: f64,
    /// Also fit the token-deletion baseline during evaluation.
    pub token_baseline: bool,
    pub token_variants: usize,
    /// Recorded as the session timestamp; the current time when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            m: DEFAULT_PERTURBATIONS,
            repeats: DEFAULT_REPEATS,
            n_target: DEFAULT_N_TARGET,
            lambda: 0.0,
            seed: 0,
            evaluate: false,
            rewrite_count: DEFAULT_REWRITES,
            truncation_norm: TruncationNorm::Sup,
            alpha: 0.05,
            token_baseline: false,
            token_variants: DEFAULT_TOKEN_VARIANTS,
            created_at: None,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LampError::param(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.m == 0 {
            return Err(LampError::param("m must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(LampError::param("repeats must be at least 1"));
        }
        if self.n_target == 0 {
            return Err(LampError::param("n_target must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LampError::param(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LampError::param(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.evaluate && self.rewrite_count == 0 {
            return Err(LampError::param("rewrite_count must be at least 1 when evaluating"));
        }
        if self.evaluate && self.token_baseline && self.token_variants < 2 {
            return Err(LampError::param("token_variants must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Elicit,
    Aggregate,
    Seed,
    Probe,
    Fit,
    Curvature,
    Truncate,
    Diagnostics,
    Evaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Validate => "validate",
            Stage::Elicit => "elicit",
            Stage::Aggregate => "aggregate",
            Stage::Seed => "seed",
            Stage::Probe => "probe",
            Stage::Fit => "fit",
            Stage::Curvature => "curvature",
            Stage::Truncate => "truncate",
            Stage::Diagnostics => "diagnostics",
            Stage::Evaluate => "evaluate",
        };
        f.write_str(name)
    }
}

/// An aborted audit: the failing stage, its error and a draft of the
/// completed stages.
#[derive(Debug)]
pub struct AuditFailure {
    pub stage: Stage,
    pub error: LampError,
    pub draft: Box<DraftSession>,
}

impl fmt::Display for AuditFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "audit failed during {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for AuditFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Deterministic session id derived from configuration, text and endpoint.
pub fn session_id(config: &AuditConfig, text: &str, gateway: &Gateway) -> Result<String> {
    let mut settings = serde_json::to_value(config)?;
    if let Some(map) = settings.as_object_mut() {
        map.remove("created_at");
    }
    let material = serde_json::json!({
        "config": settings,
        "endpoint": gateway.endpoint(),
        "task": gateway.task(),
        "text": text,
    });
    let digest = Sha256::digest(crate::session::to_canonical_json(&material)?.as_bytes());
    Ok(hex::encode(&digest[..8]))
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

struct Run<'a> {
    gateway: &'a Gateway,
    id: String,
    created_at: String,
    text: &'a str,
    partial: Map<String, Value>,
}

impl Run<'_> {
    fn keep<T: Serialize>(&mut self, key: &str, value: &T) {
        if let Ok(v) = serde_json::to_value(value) {
            self.partial.insert(key.to_string(), v);
        }
    }

    fn fail(&mut self, stage: Stage, error: LampError) -> AuditFailure {
        let draft = DraftSession {
            schema_version: SCHEMA_VERSION.to_string(),
            id: self.id.clone(),
            created_at: self.created_at.clone(),
            stage: stage.to_string(),
            error: error.to_string(),
            task: self.gateway.task().id.clone(),
            text: self.text.to_string(),
            endpoint: self.gateway.endpoint().clone(),
            partial: std::mem::take(&mut self.partial),
            transcript: self.gateway.take_transcript(),
        };
        AuditFailure { stage, error, draft: Box::new(draft) }
    }
}

/// Runs the full audit of `text` against `gateway`. The configuration is
/// validated before any request is sent.
pub async fn run_audit(
    config: &AuditConfig,
    text: &str,
    gateway: &Gateway,
) -> std::result::Result<AuditSession, AuditFailure> {
    let id = session_id(config, text, gateway).unwrap_or_default();
    let created_at = config.created_at.clone().unwrap_or_else(now_rfc3339);
    let mut run = Run { gateway, id, created_at, text, partial: Map::new() };
    macro_rules! stage {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(run.fail($stage, err)),
            }
        };
    }

    stage!(Stage::Validate, config.validate());
    if text.trim().is_empty() {
        return Err(run.fail(Stage::Validate, LampError::param("input text is empty")));
    }
    gateway.take_transcript();
    let mut warnings = Vec::new();

    let pool = stage!(Stage::Elicit, elicit_factor_pool(gateway, text, config.repeats).await);
    if pool.failed_queries > 0 {
        warnings.push(format!("{} of {} explain queries failed", pool.failed_queries, config.repeats));
    }
    run.keep("pool", &pool);

    let aggregation = stage!(Stage::Aggregate, meta_aggregate(gateway, text, &pool.factors, config.n_target).await);
    warnings.extend(aggregation.warning);
    let factors = aggregation.factors;
    run.keep("factors", &factors);
    let d = factors.dim();
    if config.m < d + 2 {
        let err = LampError::param(format!("m = {} is below d + 2 = {} for {d} factors", config.m, d + 2));
        return Err(run.fail(Stage::Validate, err));
    }

    let seed = stage!(Stage::Seed, seed_weights(gateway, text, &factors).await);
    run.keep("seed", &seed);

    let jitters = stage!(Stage::Probe, sample_jitters(d, config.delta, config.m, config.seed));
    let mut weight_list = vec![seed.w0.as_slice().to_vec()];
    for (j, eps) in jitters.iter().enumerate() {
        let perturbed = stage!(Stage::Probe, apply_jitter(&seed.w0, eps));
        if perturbed.is_degenerate() {
            warnings.push(format!("perturbation {} clamped weights {:?} at zero", j + 1, perturbed.clamped));
        }
        weight_list.push(perturbed.weights.into_inner());
    }
    let results = stage!(Stage::Probe, gateway.batch_relabel(text, &factors.factors, &weight_list).await);
    let mut samples = Vec::with_capacity(results.len());
    let mut dropped = Vec::new();
    for r in results {
        let weights = stage!(Stage::Probe, crate::probe::WeightVector::new(weight_list[r.index].clone()));
        match (r.index, r.outcome) {
            (0, Ok(p)) => samples.push(ProbeSample::seed(weights, p)),
            (0, Err(reason)) => {
                warnings.push(format!("relabel at the seed weights failed ({reason}); using the seed probability"));
                samples.push(ProbeSample::seed(weights, seed.p0));
            }
            (i, Ok(p)) => {
                samples.push(ProbeSample { index: i, weights, probability: p, jitter: Some(jitters[i - 1].clone()) })
            }
            (i, Err(reason)) => dropped.push(DroppedSample { index: i, reason }),
        }
    }
    run.keep("samples", &samples);
    run.keep("dropped", &dropped);

    let surrogate_initial = stage!(Stage::Fit, fit_surrogate(&samples, config.lambda));
    run.keep("surrogate_initial", &surrogate_initial);

    if samples.len() < quadratic_min_samples(d) {
        let err = LampError::InsufficientData {
            required: quadratic_min_samples(d),
            available: samples.len(),
            hint: Some("the curvature fit needs more perturbations".into()),
        };
        return Err(run.fail(Stage::Curvature, err));
    }
    let curvature = stage!(Stage::Curvature, fit_quadratic(&samples, &seed.w0));
    let jitter_norm = stage!(Stage::Curvature, curvature.jitter_space_frobenius(&seed.w0));
    let radius = stage!(Stage::Curvature, optimal_radius(d, samples.len(), curvature.residual_variance, jitter_norm));
    run.keep("curvature", &curvature);
    run.keep("radius", &radius);

    let (kept, truncation, surrogate) = match radius {
        RadiusOutcome::Optimal(r) if r > 0.0 && r < config.delta => {
            match truncate_samples(&samples, r, config.truncation_norm) {
                Ok((kept, report)) => {
                    let refit = stage!(Stage::Truncate, fit_surrogate(&kept, config.lambda));
                    (kept, report, refit)
                }
                Err(LampError::InsufficientData { required, available, .. }) => {
                    warnings.push(format!(
                        "truncating to δ* = {r:.4} would leave {available} samples (need {required}); \
                         kept all samples, re-probe with δ ≤ {r:.4} for a tighter fit"
                    ));
                    let report =
                        TruncationReport::untruncated(samples.len(), config.delta, Some(r), config.truncation_norm);
                    (samples.clone(), report, surrogate_initial.clone())
                }
                Err(e) => return Err(run.fail(Stage::Truncate, e)),
            }
        }
        other => {
            if other == RadiusOutcome::Noiseless {
                warnings.push("quadratic fit has no residual noise; samples were not truncated".into());
            }
            let report = TruncationReport::untruncated(
                samples.len(),
                config.delta,
                other.radius().filter(|r| *r > 0.0),
                config.truncation_norm,
            );
            (samples.clone(), report, surrogate_initial.clone())
        }
    };
    run.keep("truncation", &truncation);
    run.keep("surrogate", &surrogate);

    let (x, y) = stage!(Stage::Diagnostics, design(&kept));
    let bic_parameters = d + 1;
    let bic_value = bic(&x, &y, bic_parameters).ok();
    let (hc, hc_note) = match harvey_collier(&x, &y, config.alpha) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (xc, yc) = crate::diagnostics::center(&x, &y);
    let centered = stage!(Stage::Diagnostics, r_squared_centered(&xc, &yc, &surrogate.beta));
    let diagnostics = SessionDiagnostics {
        bic: bic_value,
        bic_parameters,
        harvey_collier: hc,
        harvey_collier_note: hc_note,
        centered_r_squared: centered,
    };

    let mut session = AuditSession {
        schema_version: SCHEMA_VERSION.to_string(),
        id: run.id.clone(),
        created_at: run.created_at.clone(),
        endpoint: gateway.endpoint().clone(),
        task: gateway.task().id.clone(),
        text: text.to_string(),
        factors,
        seed,
        probe: ProbeParameters {
            delta: config.delta,
            m: config.m,
            lambda: config.lambda,
            seed: config.seed,
            truncation_norm: config.truncation_norm,
        },
        samples,
        dropped,
        surrogate_initial,
        surrogate,
        curvature,
        radius,
        truncation,
        diagnostics,
        evaluation: None,
        transcript: Vec::new(),
        warnings: Vec::new(),
    };

    if config.evaluate {
        let evaluation = stage!(Stage::Evaluate, evaluate_session(config, &session, gateway, &mut warnings).await);
        session.evaluation = Some(evaluation);
    }
    session.warnings = warnings;
    session.transcript = gateway.take_transcript();
    Ok(session)
}

async fn evaluate_session(
    config: &AuditConfig,
    session: &AuditSession,
    gateway: &Gateway,
    warnings: &mut Vec<String>,
) -> Result<Evaluation> {
    let token = if config.token_baseline {
        match counterfactual::token_surrogate(gateway, &session.text, config.token_variants, sub_seed(config.seed, 1))
            .await
        {
            Ok(t) => Some(t),
            Err(e) => {
                warnings.push(format!("token baseline skipped: {e}"));
                None
            }
        }
    } else {
        None
    };
    run_evaluation(session, gateway, config.rewrite_count, config.seed, token).await
}

/// Generates rewrites for a finished session and scores them.
pub async fn run_evaluation(
    session: &AuditSession,
    gateway: &Gateway,
    rewrite_count: usize,
    seed: u64,
    token: Option<counterfactual::TokenSurrogate>,
) -> Result<Evaluation> {
    let (cases, failures) = counterfactual::generate_rewrites(
        gateway,
        &session.text,
        &session.factors.factors,
        &session.seed.w0,
        &session.surrogate,
        session.validity_radius(),
        rewrite_count,
        sub_seed(seed, 2),
    )
    .await?;
    let report = counterfactual::evaluate(session, &cases, token.as_ref(), sub_seed(seed, 3))?;
    Ok(Evaluation { report, cases, token_baseline: token, failures })
}
