use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::mock::mock_completion;
use super::prompt::Prompt;
use super::ProviderConfig;
use crate::corpus::Turn;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("environment variable {var} for provider {model_id} is not set")]
    MissingCredential { model_id: String, var: String },
    #[error("request failed: {0}")]
    Request(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Body(String),
}

/// Something that turns a prompt into a raw text completion.
pub trait Backend: Send + Sync {
    fn complete(&self, provider: &ProviderConfig, prompt: &Prompt, turn: &Turn) -> Result<String, TransportError>;

    /// Completion requests issued so far.
    fn calls(&self) -> u64;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, provider: &ProviderConfig, prompt: &Prompt, turn: &Turn) -> Result<String, TransportError> {
        (**self).complete(provider, prompt, turn)
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

/// OpenAI-style chat-completions client. Credentials are read from the
/// environment once, at construction.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    keys: HashMap<String, String>,
    calls: AtomicU64,
}

impl HttpBackend {
    pub fn from_env(providers: &[ProviderConfig]) -> Result<Self, TransportError> {
        let mut keys = HashMap::new();
        for p in providers {
            let var = p.credential_var();
            let key = std::env::var(var).map_err(|_| TransportError::MissingCredential {
                model_id: p.model_id.clone(),
                var: var.to_string(),
            })?;
            keys.insert(p.model_id.clone(), key);
        }
        Ok(Self::with_keys(keys))
    }

    pub fn with_keys(keys: HashMap<String, String>) -> Self {
        HttpBackend {
            client: reqwest::blocking::Client::new(),
            keys,
            calls: AtomicU64::new(0),
        }
    }
}

/// Request body sent to a chat-completions endpoint.
pub fn chat_request_body(provider: &ProviderConfig, prompt: &Prompt) -> Value {
    json!({
        "model": provider.model_name,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
    })
}

/// Pulls the assistant text out of a chat-completions response.
pub fn completion_text(body: &Value) -> Result<String, TransportError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::Body("missing choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn complete(&self, provider: &ProviderConfig, prompt: &Prompt, _turn: &Turn) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let key = self
            .keys
            .get(&provider.model_id)
            .ok_or_else(|| TransportError::MissingCredential {
                model_id: provider.model_id.clone(),
                var: provider.credential_var().to_string(),
            })?;
        let body = chat_request_body(provider, prompt);
        let resp = self
            .client
            .post(&provider.endpoint)
            .timeout(Duration::from_secs_f64(provider.timeout_seconds))
            .header("Authorization", format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Request(e.to_string()))?;
        if !status.is_success() {
            let mut snippet = text;
            snippet.truncate(200);
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: snippet,
            });
        }
        let json: Value = serde_json::from_str(&text).map_err(|e| TransportError::Body(e.to_string()))?;
        completion_text(&json)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Offline backend answering with [`mock_completion`].
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            calls: AtomicU64::new(0),
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, provider: &ProviderConfig, _prompt: &Prompt, turn: &Turn) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(mock_completion(&turn.turn_id, &provider.model_id, self.seed))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
