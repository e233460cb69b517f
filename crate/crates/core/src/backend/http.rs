//! Blocking client for OpenAI-compatible chat-completions servers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendKind, CompletionQuery, Transport, TransportError};

/// Environment variable that overrides every endpoint's bearer token.
pub const AUTH_TOKEN_ENV: &str = "NER_ENSEMBLE_AUTH_TOKEN";

fn default_retries() -> u32 {
    2
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub base_url: String,
    /// Model name sent on the wire; defaults to `model_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub served_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl ModelEndpoint {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            base_url: base_url.into(),
            served_model: None,
            auth: None,
            max_retries: default_retries(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

/// Builds the request body sent for `query`.
pub fn request_body(model: &str, query: &CompletionQuery) -> Value {
    serde_json::to_value(ChatRequest {
        model,
        messages: [ChatMessage {
            role: "user",
            content: &query.prompt,
        }],
        temperature: query.temperature,
        max_tokens: query.max_tokens,
    })
    .expect("plain request serializes")
}

/// Reads `choices[0].message.content` from a response body.
pub fn response_content(body: &Value) -> Option<&str> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str()
}

pub struct HttpTransport {
    endpoint: ModelEndpoint,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| TransportError::Fatal(format!("building HTTP client: {e}")))?;
        let token = std::env::var(AUTH_TOKEN_ENV)
            .ok()
            .filter(|t| !t.is_empty())
            .or_else(|| endpoint.auth.clone());
        Ok(Self {
            endpoint,
            client,
            token,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, query: &CompletionQuery) -> Result<String, TransportError> {
        let model = self.endpoint.served_model.as_deref().unwrap_or(&self.endpoint.model_id);
        let mut request = self
            .client
            .post(self.endpoint.completions_url())
            .json(&request_body(model, query));
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| TransportError::Transient(format!("{}: {e}", self.endpoint.base_url)))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(TransportError::Fatal(format!("HTTP {status}: {body}")));
        }
        let body: Value = response
            .json()
            .map_err(|e| TransportError::Transient(format!("reading response body: {e}")))?;
        response_content(&body)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }
}
