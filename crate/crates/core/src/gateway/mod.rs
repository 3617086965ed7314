//! Access to the audited model: prompt rendering, strict reply parsing,
//! retries with repair instructions and bounded-concurrency batches.
//!
//! Every backend call passes through one shared semaphore, so concurrent
//! batches issued by the same [`Gateway`] never exceed `max_in_flight`
//! requests in total.

pub mod mock;
pub mod parse;
pub mod prompts;
pub mod remote;

use std::future::Future;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::error::{LampError, Result};
use crate::factors::normalize_factor;
pub use parse::{ExplainResponse, ParseIssue};
pub use prompts::{ChatMessage, PromptSet, Role, TaskTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Remote,
    Mock,
}

/// Connection and retry settings for the audited model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_name: String,
    /// Temperature for relabel, aggregation, seeding and rewrite queries.
    pub temperature: f64,
    /// Temperature for the repeated free-form explain queries.
    pub explain_temperature: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl ModelEndpoint {
    pub fn mock(model_name: impl Into<String>) -> Self {
        Self {
            kind: EndpointKind::Mock,
            base_url: None,
            model_name: model_name.into(),
            temperature: 0.0,
            explain_temperature: 0.7,
            max_retries: 2,
            max_in_flight: 8,
        }
    }

    pub fn remote(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self { kind: EndpointKind::Remote, base_url: Some(base_url.into()), ..Self::mock(model_name) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(LampError::param("max_in_flight must be at least 1"));
        }
        for (name, t) in [("temperature", self.temperature), ("explain_temperature", self.explain_temperature)] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(LampError::param(format!("{name} must be finite and non-negative")));
            }
        }
        if self.kind == EndpointKind::Remote && self.base_url.as_deref().is_none_or(str::is_empty) {
            return Err(LampError::param("remote endpoint needs a base URL"));
        }
        Ok(())
    }
}

/// Structured form of a request. Remote backends only see the rendered
/// messages; the mock answers from this payload directly.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Explain { text: String, fixed_factors: Option<Vec<String>>, repeat: usize },
    Aggregate { text: String, pool: Vec<String>, n_target: usize },
    Relabel { text: String, factors: Vec<String>, weights: Vec<f64>, sample_index: usize },
    Rewrite { text: String, factors: Vec<String>, deltas: Vec<f64> },
}

impl Query {
    pub fn template(&self) -> &'static str {
        match self {
            Query::Explain { .. } => "explain",
            Query::Aggregate { .. } => "aggregate",
            Query::Relabel { .. } => "relabel",
            Query::Rewrite { .. } => "rewrite",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub query: Query,
    pub messages: Vec<ChatMessage>,
    pub model: String,
    pub temperature: f64,
    /// Zero for the first attempt, incremented on each retry.
    pub attempt: u32,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Returns the assistant's reply text.
    async fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallOutcome {
    Ok,
    Failed,
}

/// One logical request as recorded in a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template: String,
    /// sha256 of the first attempt's messages.
    pub prompt_hash: String,
    pub retries: u32,
    pub outcome: CallOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<ChatMessage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

/// Outcome of one relabel in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub index: usize,
    pub outcome: std::result::Result<f64, String>,
}

pub(crate) type Recorder = Vec<TranscriptEntry>;

pub struct Gateway {
    endpoint: ModelEndpoint,
    task: TaskTemplate,
    prompts: PromptSet,
    backend: Arc<dyn ChatBackend>,
    permits: Semaphore,
    transcript: Mutex<Vec<TranscriptEntry>>,
    embed_exchanges: bool,
}

fn hash_messages(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialise");
    hex::encode(Sha256::digest(&bytes))
}

fn repair_instruction(raw: &str, reason: &str) -> String {
    format!(
        "Your previous reply could not be used ({reason}). It was:\n{raw}\n\
         Reply again with only the JSON object in the requested format."
    )
}

impl Gateway {
    pub fn new(endpoint: ModelEndpoint, task: TaskTemplate, backend: Arc<dyn ChatBackend>) -> Result<Self> {
        endpoint.validate()?;
        task.validate()?;
        Ok(Self {
            permits: Semaphore::new(endpoint.max_in_flight),
            endpoint,
            task,
            prompts: PromptSet::default(),
            backend,
            transcript: Mutex::new(Vec::new()),
            embed_exchanges: false,
        })
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    /// Stores full messages and replies in the transcript, not only hashes.
    pub fn embed_exchanges(mut self, on: bool) -> Self {
        self.embed_exchanges = on;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn task(&self) -> &TaskTemplate {
        &self.task
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    pub fn take_transcript(&self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut *self.transcript.lock().expect("transcript lock"))
    }

    pub(crate) fn record(&self, entries: Recorder) {
        self.transcript.lock().expect("transcript lock").extend(entries);
    }

    async fn call<T>(
        &self,
        query: Query,
        messages: Vec<ChatMessage>,
        temperature: f64,
        parse: impl Fn(&str) -> std::result::Result<T, ParseIssue>,
        rec: &mut Recorder,
    ) -> Result<T> {
        let template = query.template().to_string();
        let prompt_hash = hash_messages(&messages);
        let mut current = messages.clone();
        let mut last_raw = String::new();
        let mut last_issue: Option<ParseIssue> = None;
        let mut last_endpoint: Option<String> = None;
        let entry = |attempt: u32, outcome, raw: &str| TranscriptEntry {
            template: template.clone(),
            prompt_hash: prompt_hash.clone(),
            retries: attempt,
            outcome,
            messages: self.embed_exchanges.then(|| messages.clone()),
            response: self.embed_exchanges.then(|| raw.to_string()),
        };

        for attempt in 0..=self.endpoint.max_retries {
            let request = ChatRequest {
                query: query.clone(),
                messages: current.clone(),
                model: self.endpoint.model_name.clone(),
                temperature,
                attempt,
            };
            let reply = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                self.backend.complete(&request).await
            };
            match reply {
                Err(e) => {
                    last_endpoint = Some(match e {
                        LampError::Endpoint(msg) => msg,
                        other => other.to_string(),
                    });
                    last_issue = None;
                }
                Ok(raw) => match parse(&raw) {
                    Ok(value) => {
                        rec.push(entry(attempt, CallOutcome::Ok, &raw));
                        return Ok(value);
                    }
                    Err(ParseIssue::Invalid(reason)) => {
                        rec.push(entry(attempt, CallOutcome::Failed, &raw));
                        return Err(LampError::Validation(reason));
                    }
                    Err(issue) => {
                        current = messages.clone();
                        current.push(ChatMessage::new(Role::User, repair_instruction(&raw, &issue.describe())));
                        last_raw = raw;
                        last_issue = Some(issue);
                        last_endpoint = None;
                    }
                },
            }
        }
        let attempts = self.endpoint.max_retries + 1;
        rec.push(entry(self.endpoint.max_retries, CallOutcome::Failed, &last_raw));
        Err(match (last_issue, last_endpoint) {
            (_, Some(msg)) => LampError::Endpoint(msg),
            (Some(ParseIssue::Misaligned(unmatched)), _) => LampError::Alignment { unmatched },
            (Some(issue), _) => LampError::Parse { attempts, reason: issue.describe(), last_raw },
            (None, None) => LampError::Endpoint("no attempt was made".into()),
        })
    }

    async fn traced<T>(&self, fut: impl Future<Output = (Result<T>, Recorder)>) -> Result<T> {
        let (r, rec) = fut.await;
        self.record(rec);
        r
    }

    /// Runs the futures concurrently (bounded by the shared semaphore) and
    /// records their transcript entries in input order.
    pub(crate) async fn traced_batch<T, F>(&self, futures: Vec<F>) -> Vec<Result<T>>
    where
        F: Future<Output = (Result<T>, Recorder)>,
    {
        let outcomes = join_all(futures).await;
        let mut results = Vec::with_capacity(outcomes.len());
        let mut log = self.transcript.lock().expect("transcript lock");
        for (r, rec) in outcomes {
            log.extend(rec);
            results.push(r);
        }
        results
    }

    pub(crate) async fn explain_rec(&self, text: &str, repeat: usize, rec: &mut Recorder) -> Result<ExplainResponse> {
        let messages = self.prompts.explain(&self.task, text, None, 5)?;
        let query = Query::Explain { text: text.to_string(), fixed_factors: None, repeat };
        self.call(query, messages, self.endpoint.explain_temperature, parse::parse_explain, rec).await
    }

    /// Free-form self-explanation of `text`.
    pub async fn classify_explain(&self, text: &str) -> Result<ExplainResponse> {
        self.traced(async {
            let mut rec = Vec::new();
            (self.explain_rec(text, 0, &mut rec).await, rec)
        })
        .await
    }

    /// `repeats` independent explain queries, concurrently.
    pub async fn explain_repeats(&self, text: &str, repeats: usize) -> Vec<Result<ExplainResponse>> {
        let futures = (0..repeats)
            .map(|r| async move {
                let mut rec = Vec::new();
                (self.explain_rec(text, r, &mut rec).await, rec)
            })
            .collect();
        self.traced_batch(futures).await
    }

    /// Explain with the factor list fixed; returns the probability and the
    /// weights re-ordered to match `factors`.
    pub(crate) async fn explain_fixed_rec(
        &self,
        text: &str,
        factors: &[String],
        rec: &mut Recorder,
    ) -> Result<(f64, Vec<f64>)> {
        let messages = self.prompts.explain(&self.task, text, Some(factors), factors.len())?;
        let query = Query::Explain { text: text.to_string(), fixed_factors: Some(factors.to_vec()), repeat: 0 };
        let wanted: Vec<String> = factors.iter().map(|f| normalize_factor(f)).collect();
        let align = |raw: &str| {
            let resp = parse::parse_explain(raw)?;
            let returned: Vec<(String, f64)> = resp.factors.iter().map(|(f, w)| (normalize_factor(f), *w)).collect();
            let mut weights = Vec::with_capacity(wanted.len());
            let mut unmatched = Vec::new();
            for (key, original) in wanted.iter().zip(factors) {
                match returned.iter().find(|(f, _)| f == key) {
                    Some((_, w)) => weights.push(*w),
                    None => unmatched.push(original.clone()),
                }
            }
            if unmatched.is_empty() {
                Ok((resp.probability, weights))
            } else {
                Err(ParseIssue::Misaligned(unmatched))
            }
        };
        self.call(query, messages, self.endpoint.temperature, align, rec).await
    }

    pub async fn explain_fixed(&self, text: &str, factors: &[String]) -> Result<(f64, Vec<f64>)> {
        self.traced(async {
            let mut rec = Vec::new();
            (self.explain_fixed_rec(text, factors, &mut rec).await, rec)
        })
        .await
    }

    pub async fn aggregate(&self, text: &str, pool: &[String], n_target: usize) -> Result<Vec<String>> {
        self.traced(async {
            let mut rec = Vec::new();
            let r = async {
                let messages = self.prompts.aggregate(&self.task, text, pool, n_target)?;
                let query = Query::Aggregate { text: text.to_string(), pool: pool.to_vec(), n_target };
                self.call(query, messages, self.endpoint.temperature, parse::parse_factor_list, &mut rec).await
            }
            .await;
            (r, rec)
        })
        .await
    }

    pub(crate) async fn relabel_rec(
        &self,
        text: &str,
        factors: &[String],
        weights: &[f64],
        sample_index: usize,
        rec: &mut Recorder,
    ) -> Result<f64> {
        let messages = self.prompts.relabel(&self.task, text, factors, weights)?;
        let query = Query::Relabel {
            text: text.to_string(),
            factors: factors.to_vec(),
            weights: weights.to_vec(),
            sample_index,
        };
        self.call(query, messages, self.endpoint.temperature, parse::parse_probability, rec).await
    }

    /// Probability reported for `text` when the factors carry `weights`.
    pub async fn relabel(&self, text: &str, factors: &[String], weights: &[f64], sample_index: usize) -> Result<f64> {
        self.traced(async {
            let mut rec = Vec::new();
            (self.relabel_rec(text, factors, weights, sample_index, &mut rec).await, rec)
        })
        .await
    }

    /// Relabels every weight vector; `result[i]` belongs to `weight_list[i]`
    /// and carries sample index `i`. Individual failures are returned, not
    /// raised; only a batch where every request fails is an error.
    pub async fn batch_relabel(
        &self,
        text: &str,
        factors: &[String],
        weight_list: &[Vec<f64>],
    ) -> Result<Vec<BatchResult>> {
        if weight_list.is_empty() {
            return Err(LampError::param("batch_relabel needs at least one weight vector"));
        }
        if let Some(bad) = weight_list.iter().position(|w| w.len() != factors.len()) {
            return Err(LampError::param(format!(
                "weight vector {bad} has length {}, expected {}",
                weight_list[bad].len(),
                factors.len()
            )));
        }
        let futures = weight_list
            .iter()
            .enumerate()
            .map(|(i, w)| async move {
                let mut rec = Vec::new();
                (self.relabel_rec(text, factors, w, i, &mut rec).await, rec)
            })
            .collect();
        let results: Vec<BatchResult> = self
            .traced_batch(futures)
            .await
            .into_iter()
            .enumerate()
            .map(|(index, r)| BatchResult { index, outcome: r.map_err(|e| e.to_string()) })
            .collect();
        if results.iter().all(|r| r.outcome.is_err()) {
            return Err(LampError::BatchFailure(results.len()));
        }
        Ok(results)
    }

    pub(crate) async fn rewrite_rec(
        &self,
        text: &str,
        factors: &[String],
        deltas: &[f64],
        rec: &mut Recorder,
    ) -> Result<String> {
        let messages = self.prompts.rewrite(&self.task, text, factors, deltas)?;
        let query = Query::Rewrite { text: text.to_string(), factors: factors.to_vec(), deltas: deltas.to_vec() };
        self.call(query, messages, self.endpoint.temperature, parse::parse_rewrite, rec).await.map_err(|e| match e {
            LampError::Parse { reason, .. } => LampError::Rewrite(reason),
            other => other,
        })
    }

    pub async fn rewrite_text(&self, text: &str, factors: &[String], deltas: &[f64]) -> Result<String> {
        self.traced(async {
            let mut rec = Vec::new();
            (self.rewrite_rec(text, factors, deltas, &mut rec).await, rec)
        })
        .await
    }
}
