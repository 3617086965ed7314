//! Chat-completion client for OpenAI-compatible endpoints.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatMessage, ChatRequest, ModelEndpoint};
use crate::error::{LampError, Result};

pub const ENV_BASE_URL: &str = "LAMP_BASE_URL";
pub const ENV_API_KEY: &str = "LAMP_API_KEY";
pub const ENV_MODEL: &str = "LAMP_MODEL";

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

pub struct RemoteBackend {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LampError::Endpoint(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.filter(|k| !k.is_empty()),
        })
    }

    /// Builds the endpoint and backend from `LAMP_BASE_URL`, `LAMP_API_KEY`
    /// and `LAMP_MODEL`; `model` overrides the environment.
    pub fn from_env(model: Option<String>) -> Result<(ModelEndpoint, Self)> {
        let base = std::env::var(ENV_BASE_URL).map_err(|_| LampError::param(format!("{ENV_BASE_URL} is not set")))?;
        let model = model
            .or_else(|| std::env::var(ENV_MODEL).ok())
            .ok_or_else(|| LampError::param(format!("no model given and {ENV_MODEL} is not set")))?;
        let backend = Self::new(&base, std::env::var(ENV_API_KEY).ok(), Duration::from_secs(120))?;
        Ok((ModelEndpoint::remote(base, model), backend))
    }
}

#[async_trait]
impl ChatBackend for RemoteBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = WireRequest { model: &request.model, messages: &request.messages, temperature: request.temperature };
        let mut http = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().await.map_err(|e| LampError::Endpoint(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Err(LampError::Endpoint(format!("HTTP {status}: {snippet}")));
        }
        let parsed: WireResponse =
            response.json().await.map_err(|e| LampError::Endpoint(format!("unexpected response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LampError::Endpoint("response has no assistant content".into()))
    }
}
