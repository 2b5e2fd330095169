//! Per-turn emotion annotation from independent model backends.
//!
//! Every backend sees the same prompt ([`prompt`]), answers with a ranked
//! list of at most [`K_MAX`] emotions ([`response`]), and each successful or
//! failed answer is persisted in an append-only cache keyed by turn, model
//! and prompt hash ([`cache`]). [`Annotator`] ties these together with
//! retries, per-provider rate limits and bounded fan-out.

mod annotator;
pub mod backend;
pub mod cache;
pub mod mock;
pub mod prompt;
pub mod ratelimit;
pub mod response;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotator::{AnnotationFailed, AnnotationStats, Annotator, Backoff, FailureCause, Job, Outcome};
pub use backend::{Backend, HttpBackend, MockBackend, TransportError};
pub use cache::{AnnotationCache, CacheError, CacheKey, CacheRecord, CacheStatus};
pub use mock::mock_annotate;
pub use prompt::{build_prompt, build_prompt_with_context, prompt_hash, Prompt, PromptError, PROMPT_VERSION};
pub use ratelimit::RateLimiter;
pub use response::{parse_response, ParsedResponse, ResponseError, ResponseWarning};

/// Maximum number of ranked emotions kept per model answer.
pub const K_MAX: usize = 5;

pub const SCORE_MIN: u8 = 1;
pub const SCORE_MAX: u8 = 9;

/// Lowercases, trims and collapses internal whitespace so that "Curiosity"
/// and " curiosity " vote together.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankedEmotion {
    pub label: String,
    pub valence: u8,
    pub arousal: u8,
    pub learning: u8,
    /// 1-based; rank 1 is the most salient emotion.
    pub rank: u8,
}

/// One backend's ranked answer for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAnnotation {
    pub model_id: String,
    pub turn_id: String,
    pub emotions: Vec<RankedEmotion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidAnnotation {
    #[error("annotation has no emotions")]
    Empty,
    #[error("annotation has {0} emotions, more than the maximum of {K_MAX}")]
    TooMany(usize),
    #[error("rank {rank}: {field} = {value} is outside [{SCORE_MIN}, {SCORE_MAX}]")]
    Score { rank: u8, field: &'static str, value: u8 },
    #[error("emotion at position {position} has rank {rank}; ranks must run 1..K without gaps")]
    Rank { position: usize, rank: u8 },
    #[error("rank {rank}: label {label:?} is empty or not normalized")]
    Label { rank: u8, label: String },
    #[error("label {0:?} appears more than once")]
    DuplicateLabel(String),
}

impl RankedEmotion {
    pub fn scores(&self) -> [(&'static str, u8); 3] {
        [
            ("valence", self.valence),
            ("arousal", self.arousal),
            ("learning", self.learning),
        ]
    }
}

impl ModelAnnotation {
    pub fn k(&self) -> usize {
        self.emotions.len()
    }

    /// Checks every structural invariant: 1..=K_MAX emotions, contiguous
    /// ranks, in-range scores, and distinct normalized labels.
    pub fn validate(&self) -> Result<(), InvalidAnnotation> {
        if self.emotions.is_empty() {
            return Err(InvalidAnnotation::Empty);
        }
        if self.emotions.len() > K_MAX {
            return Err(InvalidAnnotation::TooMany(self.emotions.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, e) in self.emotions.iter().enumerate() {
            if usize::from(e.rank) != i + 1 {
                return Err(InvalidAnnotation::Rank {
                    position: i + 1,
                    rank: e.rank,
                });
            }
            for (field, value) in e.scores() {
                if !(SCORE_MIN..=SCORE_MAX).contains(&value) {
                    return Err(InvalidAnnotation::Score {
                        rank: e.rank,
                        field,
                        value,
                    });
                }
            }
            if e.label.is_empty() || normalize_label(&e.label) != e.label {
                return Err(InvalidAnnotation::Label {
                    rank: e.rank,
                    label: e.label.clone(),
                });
            }
            if !seen.insert(e.label.as_str()) {
                return Err(InvalidAnnotation::DuplicateLabel(e.label.clone()));
            }
        }
        Ok(())
    }
}

/// Connection settings for one annotation backend. The credential is the
/// *name* of an environment variable; secrets never appear in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub model_id: String,
    pub endpoint: String,
    pub model_name: String,
    pub credential: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
}

fn default_max_retries() -> u32 {
    2
}
fn default_rpm() -> u32 {
    60
}
fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderConfigError {
    #[error("model_id {0:?} must be non-empty and use only [A-Za-z0-9._-]")]
    ModelId(String),
    #[error("provider {0}: requests_per_minute must be at least 1")]
    RateLimit(String),
    #[error("provider {0}: timeout_seconds must be positive")]
    Timeout(String),
    #[error("provider {0}: endpoint {1:?} is not an http(s) URL")]
    Endpoint(String, String),
    #[error("provider {0}: credential must name an environment variable")]
    Credential(String),
    #[error("duplicate provider model_id {0:?}")]
    Duplicate(String),
}

impl ProviderConfig {
    /// A provider for the deterministic offline backend.
    pub fn mock(model_id: &str) -> Self {
        ProviderConfig {
            model_id: model_id.to_string(),
            endpoint: "mock://local".to_string(),
            model_name: format!("mock-{model_id}"),
            credential: String::new(),
            max_retries: 0,
            requests_per_minute: u32::MAX,
            timeout_seconds: 1.0,
        }
    }

    /// Environment variable holding the credential. `${NAME}` and `NAME`
    /// are both accepted.
    pub fn credential_var(&self) -> &str {
        let c = self.credential.trim();
        c.strip_prefix("${")
            .and_then(|s| s.strip_suffix('}'))
            .unwrap_or(c)
    }

    pub fn validate(&self, offline: bool) -> Result<(), ProviderConfigError> {
        let id_ok = !self.model_id.is_empty()
            && self
                .model_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
        if !id_ok {
            return Err(ProviderConfigError::ModelId(self.model_id.clone()));
        }
        if self.requests_per_minute < 1 {
            return Err(ProviderConfigError::RateLimit(self.model_id.clone()));
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(ProviderConfigError::Timeout(self.model_id.clone()));
        }
        if !offline {
            if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
                return Err(ProviderConfigError::Endpoint(
                    self.model_id.clone(),
                    self.endpoint.clone(),
                ));
            }
            if self.credential_var().is_empty() {
                return Err(ProviderConfigError::Credential(self.model_id.clone()));
            }
        }
        Ok(())
    }
}

/// Validates a provider list, including model_id uniqueness.
pub fn validate_providers(providers: &[ProviderConfig], offline: bool) -> Result<(), ProviderConfigError> {
    let mut seen = std::collections::HashSet::new();
    for p in providers {
        p.validate(offline)?;
        if !seen.insert(p.model_id.as_str()) {
            return Err(ProviderConfigError::Duplicate(p.model_id.clone()));
        }
    }
    Ok(())
}

impl fmt::Display for ModelAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:", self.model_id, self.turn_id)?;
        for e in &self.emotions {
            write!(f, " {}({},{},{})", e.label, e.valence, e.arousal, e.learning)?;
        }
        Ok(())
    }
}
