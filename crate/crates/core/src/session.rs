//! Audit session records: canonical JSON persistence, an append-only index
//! and human-readable reports.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::counterfactual::{EvalReport, RewriteCase, TokenSurrogate};
use crate::curvature::{CurvatureEstimate, RadiusOutcome, TruncationNorm, TruncationReport};
use crate::diagnostics::{CenteredRSquared, LinearityTestResult, TailObservation};
use crate::error::{LampError, Result};
use crate::factors::{FactorSet, SeedObservation};
use crate::gateway::{ModelEndpoint, TranscriptEntry};
use crate::probe::{ProbeSample, SurrogateModel};

pub const SCHEMA_VERSION: &str = "1";
const INDEX_FILE: &str = "index.jsonl";
const EXCERPT_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParameters {
    /// Sampling radius of the relative jitter.
    pub delta: f64,
    /// Number of perturbations.
    pub m: usize,
    /// Ridge penalty on the surrogate slopes.
    pub lambda: f64,
    pub seed: u64,
    pub truncation_norm: TruncationNorm,
}

/// A perturbation whose relabel failed after retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub index: usize,
    pub reason: String,
}

/// BIC is `None` when the model has at least as many parameters as samples;
/// a perfect fit serialises as the string `"-inf"`.
mod bic_format {
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if *x == f64::NEG_INFINITY => s.serialize_str("-inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Value::deserialize(d)? {
            Value::Null => Ok(None),
            Value::String(s) if s == "-inf" => Ok(Some(f64::NEG_INFINITY)),
            Value::Number(n) => Ok(n.as_f64()),
            other => Err(serde::de::Error::custom(format!("invalid BIC value {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDiagnostics {
    #[serde(with = "bic_format")]
    pub bic: Option<f64>,
    /// Parameter count used for the BIC penalty (slopes plus intercept).
    pub bic_parameters: usize,
    pub harvey_collier: Option<LinearityTestResult>,
    /// Why the linearity test was skipped, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harvey_collier_note: Option<String>,
    pub centered_r_squared: CenteredRSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub cases: Vec<RewriteCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_baseline: Option<TokenSurrogate>,
    #[serde(default)]
    pub failures: Vec<String>,
}

/// Complete record of one audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSession {
    pub schema_version: String,
    pub id: String,
    pub created_at: String,
    pub endpoint: ModelEndpoint,
    pub task: String,
    pub text: String,
    pub factors: FactorSet,
    pub seed: SeedObservation,
    pub probe: ProbeParameters,
    /// Every relabelled sample, seed first, before truncation.
    pub samples: Vec<ProbeSample>,
    pub dropped: Vec<DroppedSample>,
    /// Fit on all samples.
    pub surrogate_initial: SurrogateModel,
    /// Fit on the samples kept after truncation.
    pub surrogate: SurrogateModel,
    pub curvature: CurvatureEstimate,
    pub radius: RadiusOutcome,
    pub truncation: TruncationReport,
    pub diagnostics: SessionDiagnostics,
    pub evaluation: Option<Evaluation>,
    pub transcript: Vec<TranscriptEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AuditSession {
    pub fn dim(&self) -> usize {
        self.factors.dim()
    }

    /// Radius inside which the surrogate is trusted: `min(δ*, δ)`, or `δ`
    /// when no positive optimum exists.
    pub fn validity_radius(&self) -> f64 {
        match self.radius {
            RadiusOutcome::Optimal(r) if r > 0.0 => r.min(self.probe.delta),
            _ => self.probe.delta,
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            created_at: self.created_at.clone(),
            task: self.task.clone(),
            excerpt: self.text.chars().take(EXCERPT_CHARS).collect(),
            r_squared: self.surrogate.r_squared,
            delta_star: self.radius.radius(),
            seed_probability: self.seed.p0,
            factor_count: self.dim(),
        }
    }

    /// Checks structural invariants, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |field: String, reason: &str| LampError::CorruptSession { field, reason: reason.to_string() };
        let unit = |field: String, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(corrupt(field, &format!("{p} is outside [0, 1]")))
            }
        };
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(corrupt("id".into(), "must be non-empty and alphanumeric"));
        }
        self.factors.validate().map_err(|e| corrupt("factors.factors".into(), &e.to_string()))?;
        let d = self.dim();
        if self.seed.w0.dim() != d {
            return Err(corrupt("seed.w0".into(), "length differs from the factor count"));
        }
        unit("seed.p0".into(), self.seed.p0)?;
        if !(self.probe.delta > 0.0 && self.probe.delta < 1.0) {
            return Err(corrupt("probe.delta".into(), "must lie in (0, 1)"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.weights.dim() != d {
                return Err(corrupt(format!("samples[{i}].weights"), "length differs from the factor count"));
            }
            unit(format!("samples[{i}].probability"), s.probability)?;
        }
        for (name, model) in [("surrogate_initial", &self.surrogate_initial), ("surrogate", &self.surrogate)] {
            if model.dim() != d {
                return Err(corrupt(format!("{name}.beta"), "length differs from the factor count"));
            }
            unit(format!("{name}.r_squared"), model.r_squared)?;
        }
        if self.curvature.dim != d || self.curvature.gradient.len() != d {
            return Err(corrupt("curvature".into(), "dimension differs from the factor count"));
        }
        if self.truncation.kept + self.truncation.discarded != self.samples.len() {
            return Err(corrupt("truncation".into(), "kept + discarded differs from the sample count"));
        }
        if let Some(ev) = &self.evaluation {
            for (i, c) in ev.cases.iter().enumerate() {
                if c.w_rewritten.dim() != d || c.deltas.len() != d {
                    return Err(corrupt(format!("evaluation.cases[{i}]"), "length differs from the factor count"));
                }
                unit(format!("evaluation.cases[{i}].p_model"), c.p_model)?;
                unit(format!("evaluation.cases[{i}].p_surrogate"), c.p_surrogate)?;
            }
            let r = &ev.report;
            for (name, score) in [
                ("surrogate", Some(r.surrogate)),
                ("mean_baseline", Some(r.mean_baseline)),
                ("uniform_baseline", Some(r.uniform_baseline)),
                ("random_baseline", Some(r.random_baseline)),
                ("token_surrogate", r.token_surrogate),
            ] {
                if let Some(s) = score {
                    unit(format!("evaluation.report.{name}.mean"), s.mean)?;
                }
            }
        }
        Ok(())
    }
}

impl TailObservation for AuditSession {
    fn seed_probability(&self) -> f64 {
        self.seed.p0
    }
    fn beta_norm(&self) -> f64 {
        self.surrogate.beta_norm()
    }
    fn r_squared(&self) -> f64 {
        self.surrogate.r_squared
    }
}

/// Listing entry, one line of the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub created_at: String,
    pub task: String,
    pub excerpt: String,
    pub r_squared: f64,
    pub delta_star: Option<f64>,
    pub seed_probability: f64,
    pub factor_count: usize,
}

/// Record left behind when an audit aborts part-way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftSession {
    pub schema_version: String,
    pub id: String,
    pub created_at: String,
    pub stage: String,
    pub error: String,
    pub task: String,
    pub text: String,
    pub endpoint: ModelEndpoint,
    /// Whatever stages completed, keyed by stage name.
    pub partial: Map<String, Value>,
    pub transcript: Vec<TranscriptEntry>,
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Pretty JSON with recursively sorted keys and shortest round-trip floats.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&sort_keys(serde_json::to_value(value)?))?;
    s.push('\n');
    Ok(s)
}

/// Replaces `path` with `contents` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LampError::Io(e.error))?;
    Ok(())
}

/// Writes `session` as canonical JSON, atomically replacing `path`.
pub fn save_session(session: &AuditSession, path: &Path) -> Result<()> {
    session.validate()?;
    write_atomic(path, &to_canonical_json(session)?)
}

/// Reads, version-checks and validates a session file.
pub fn load_session(path: &Path) -> Result<AuditSession> {
    parse_session(&fs::read_to_string(path)?)
}

pub fn parse_session(source: &str) -> Result<AuditSession> {
    let value: Value = serde_json::from_str(source)
        .map_err(|e| LampError::CorruptSession { field: "<document>".into(), reason: e.to_string() })?;
    match value.get("schema_version") {
        None => return Err(LampError::Migration("schema_version is missing".into())),
        Some(Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(other) => {
            return Err(LampError::Migration(format!(
                "schema_version {other} is not supported (expected \"{SCHEMA_VERSION}\")"
            )))
        }
    }
    let session: AuditSession = serde_json::from_value(value)
        .map_err(|e| LampError::CorruptSession { field: "<document>".into(), reason: e.to_string() })?;
    session.validate()?;
    Ok(session)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub rank: usize,
    pub index: usize,
    pub factor: String,
    pub coefficient: f64,
    pub initial_weight: f64,
}

/// Stable machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub created_at: String,
    pub task: String,
    pub model: String,
    pub seed_probability: f64,
    pub intercept: f64,
    pub factors: Vec<FactorRow>,
    pub r_squared: f64,
    pub r_squared_initial: f64,
    pub delta: f64,
    pub radius: RadiusOutcome,
    pub truncation: TruncationReport,
    pub diagnostics: SessionDiagnostics,
    pub dropped_samples: usize,
    pub evaluation: Option<EvalReport>,
}

/// Factor indices ordered by decreasing `|β|`, ties by index.
pub fn coefficient_order(beta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..beta.len()).collect();
    idx.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
    idx
}

pub fn build_report(session: &AuditSession) -> Report {
    let factors = coefficient_order(&session.surrogate.beta)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| FactorRow {
            rank: rank + 1,
            index: i,
            factor: session.factors.factors[i].clone(),
            coefficient: session.surrogate.beta[i],
            initial_weight: session.seed.w0.as_slice()[i],
        })
        .collect();
    Report {
        id: session.id.clone(),
        created_at: session.created_at.clone(),
        task: session.task.clone(),
        model: session.endpoint.model_name.clone(),
        seed_probability: session.seed.p0,
        intercept: session.surrogate.intercept,
        factors,
        r_squared: session.surrogate.r_squared,
        r_squared_initial: session.surrogate_initial.r_squared,
        delta: session.probe.delta,
        radius: session.radius,
        truncation: session.truncation.clone(),
        diagnostics: session.diagnostics.clone(),
        dropped_samples: session.dropped.len(),
        evaluation: session.evaluation.as_ref().map(|e| e.report.clone()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub fn emit_report(session: &AuditSession, format: ReportFormat) -> Result<String> {
    let report = build_report(session);
    if format == ReportFormat::Json {
        return to_canonical_json(&report);
    }
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("# Audit {}", report.id));
    line(String::new());
    line(format!("- Task: {}", report.task));
    line(format!("- Model: {}", report.model));
    line(format!("- Created: {}", report.created_at));
    line(format!("- Seed probability: {:.4}", report.seed_probability));
    line(String::new());
    line("## Surrogate coefficients".into());
    line(String::new());
    line("| Rank | Factor | Coefficient | Initial weight |".into());
    line("|---:|---|---:|---:|".into());
    for f in &report.factors {
        line(format!("| {} | {} | {:+.4} | {:.4} |", f.rank, f.factor, f.coefficient, f.initial_weight));
    }
    line(String::new());
    line(format!("Intercept: {:.4}", report.intercept));
    line(String::new());
    line("## Fit".into());
    line(String::new());
    line(format!("- R² (after truncation): {:.4}", report.r_squared));
    line(format!("- R² (all samples): {:.4}", report.r_squared_initial));
    line(format!("- Sampling radius δ: {:.4}", report.delta));
    let radius = match report.radius {
        RadiusOutcome::Optimal(r) => format!("{r:.4}"),
        RadiusOutcome::FlatSurface => "unbounded (no measurable curvature)".into(),
        RadiusOutcome::Noiseless => "unbounded (no residual noise)".into(),
    };
    line(format!("- Optimal radius δ*: {radius}"));
    let t = &report.truncation;
    line(format!(
        "- Truncation: kept {}, discarded {}, variance inflation {:.4}",
        t.kept, t.discarded, t.inflation_factor
    ));
    if report.dropped_samples > 0 {
        line(format!("- Failed relabels dropped: {}", report.dropped_samples));
    }
    line(String::new());
    line("## Diagnostics".into());
    line(String::new());
    let d = &report.diagnostics;
    let bic = match d.bic {
        None => "undefined".to_string(),
        Some(b) if b == f64::NEG_INFINITY => "-inf (perfect fit)".to_string(),
        Some(b) => format!("{b:.4}"),
    };
    line(format!("- BIC (k = {}): {bic}", d.bic_parameters));
    line(format!("- Centred R²: {:.4}", d.centered_r_squared.value));
    match (&d.harvey_collier, &d.harvey_collier_note) {
        (Some(hc), _) => line(format!(
            "- Harvey–Collier: t = {:.4}, p = {:.4}, {}",
            hc.statistic,
            hc.p_value,
            if hc.rejected { "linearity rejected" } else { "linearity not rejected" }
        )),
        (None, Some(note)) => line(format!("- Harvey–Collier: not computed ({note})")),
        (None, None) => line("- Harvey–Collier: not computed".into()),
    }
    line(String::new());
    line("## Counterfactual evaluation".into());
    line(String::new());
    match &report.evaluation {
        None => line("not evaluated".into()),
        Some(ev) => {
            line("| Method | Mean Brier | SD |".into());
            line("|---|---:|---:|".into());
            let mut rows = vec![
                ("surrogate", ev.surrogate),
                ("mean baseline", ev.mean_baseline),
                ("uniform baseline", ev.uniform_baseline),
                ("random baseline", ev.random_baseline),
            ];
            if let Some(t) = ev.token_surrogate {
                rows.push(("token surrogate", t));
            }
            for (name, s) in rows {
                line(format!("| {name} | {:.4} | {:.4} |", s.mean, s.sd));
            }
            line(String::new());
            line(format!("- Cases: {}", ev.n_cases));
            line(format!("- Pearson r (surrogate vs model): {}", fmt_opt(ev.pearson_r)));
            line(format!(
                "- Outside the δ√d factor-distance bound (δ = {:.4}): {}",
                ev.radius, ev.factor_distance_violations
            ));
        }
    }
    Ok(out)
}

/// Directory of session files plus `index.jsonl`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
        return Err(LampError::param(format!("invalid session id `{id}`")));
    }
    Ok(())
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str) -> Result<PathBuf> {
        check_id(id)?;
        Ok(self.dir.join(format!("{id}.json")))
    }

    /// Writes the session file and appends its summary to the index.
    pub fn save(&self, session: &AuditSession) -> Result<PathBuf> {
        let path = self.path_for(&session.id)?;
        save_session(session, &path)?;
        let mut index = OpenOptions::new().create(true).append(true).open(self.dir.join(INDEX_FILE))?;
        index.lock()?;
        let written = serde_json::to_string(&session.summary())
            .map_err(LampError::from)
            .and_then(|line| writeln!(index, "{line}").map_err(LampError::from));
        index.unlock()?;
        written?;
        Ok(path)
    }

    pub fn save_draft(&self, draft: &DraftSession) -> Result<PathBuf> {
        check_id(&draft.id)?;
        let dir = self.dir.join("drafts");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", draft.id));
        write_atomic(&path, &to_canonical_json(draft)?)?;
        Ok(path)
    }

    pub fn load(&self, id: &str) -> Result<AuditSession> {
        load_session(&self.path_for(id)?)
    }

    /// Index entries, latest entry per id, in order of first appearance.
    pub fn list(&self) -> Result<Vec<SessionSummary>> {
        let path = self.dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<SessionSummary> = Vec::new();
        for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SessionSummary = serde_json::from_str(&line).map_err(|e| LampError::CorruptSession {
                field: format!("{INDEX_FILE}:{}", n + 1),
                reason: e.to_string(),
            })?;
            match out.iter_mut().find(|s| s.id == entry.id) {
                Some(existing) => *existing = entry,
                None => out.push(entry),
            }
        }
        Ok(out)
    }
}
