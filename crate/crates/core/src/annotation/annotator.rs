use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use super::backend::{Backend, TransportError};
use super::cache::{AnnotationCache, CacheKey, CacheRecord, CacheStatus};
use super::prompt::{build_prompt_with_context, prompt_hash, PromptError};
use super::ratelimit::RateLimiter;
use super::response::{parse_response, ResponseError};
use super::{ModelAnnotation, ProviderConfig};
use crate::corpus::Turn;

/// Exponential backoff between attempts: `base * 2^retry`, capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(500),
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub const NONE: Backoff = Backoff {
        base: Duration::ZERO,
        max: Duration::ZERO,
    };

    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureCause {
    Prompt(PromptError),
    Transport(TransportError),
    Response(ResponseError),
    /// A failure recorded by an earlier run.
    Cached(String),
    Cache(String),
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureCause::Prompt(e) => write!(f, "prompt: {e}"),
            FailureCause::Transport(e) => write!(f, "transport: {e}"),
            FailureCause::Response(e) => write!(f, "response: {e}"),
            FailureCause::Cached(c) => write!(f, "cached failure: {c}"),
            FailureCause::Cache(c) => write!(f, "cache: {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("annotation of turn {turn_id} by {model_id} failed after {attempts} attempt(s): {cause}")]
pub struct AnnotationFailed {
    pub model_id: String,
    pub turn_id: String,
    pub attempts: u32,
    pub cause: FailureCause,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AnnotationStats {
    /// (turn, model) pairs asked for.
    pub requested: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub truncated: u64,
}

#[derive(Default)]
struct Counters {
    requested: AtomicU64,
    cache_hits: AtomicU64,
    provider_calls: AtomicU64,
    succeeded: AtomicU64,
    failed: AtomicU64,
    truncated: AtomicU64,
}

/// One unit of work: a turn and the earlier turns shown as context.
#[derive(Debug, Clone)]
pub struct Job<'a> {
    pub turn: &'a Turn,
    pub context: Vec<&'a Turn>,
}

pub type Outcome = Result<ModelAnnotation, AnnotationFailed>;

/// Runs providers over turns with caching, retries and per-provider rate
/// limits.
pub struct Annotator<B: Backend> {
    backend: B,
    cache: AnnotationCache,
    providers: Vec<ProviderConfig>,
    limiters: HashMap<String, RateLimiter>,
    prompt_hash: String,
    context_window: usize,
    backoff: Backoff,
    retry_failed: bool,
    max_in_flight: usize,
    counters: Counters,
}

impl<B: Backend> Annotator<B> {
    pub fn new(backend: B, cache: AnnotationCache, providers: Vec<ProviderConfig>) -> Self {
        let limiters = providers
            .iter()
            .map(|p| (p.model_id.clone(), RateLimiter::per_minute(p.requests_per_minute)))
            .collect();
        Annotator {
            backend,
            cache,
            providers,
            limiters,
            prompt_hash: prompt_hash(0),
            context_window: 0,
            backoff: Backoff::default(),
            retry_failed: false,
            max_in_flight: 4,
            counters: Counters::default(),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_context_window(mut self, turns: usize) -> Self {
        self.context_window = turns;
        self.prompt_hash = prompt_hash(turns);
        self
    }

    /// Re-request pairs whose cached record is a failure.
    pub fn with_retry_failed(mut self, retry: bool) -> Self {
        self.retry_failed = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn providers(&self) -> &[ProviderConfig] {
        &self.providers
    }

    pub fn cache(&self) -> &AnnotationCache {
        &self.cache
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn prompt_hash(&self) -> &str {
        &self.prompt_hash
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn stats(&self) -> AnnotationStats {
        let c = &self.counters;
        AnnotationStats {
            requested: c.requested.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            provider_calls: c.provider_calls.load(Ordering::Relaxed),
            succeeded: c.succeeded.load(Ordering::Relaxed),
            failed: c.failed.load(Ordering::Relaxed),
            truncated: c.truncated.load(Ordering::Relaxed),
        }
    }

    pub fn cache_key(&self, turn: &Turn, provider: &ProviderConfig) -> CacheKey {
        CacheKey {
            turn_id: turn.turn_id.clone(),
            model_id: provider.model_id.clone(),
            model_name: provider.model_name.clone(),
            prompt_hash: self.prompt_hash.clone(),
        }
    }

    /// Annotates one turn with one provider.
    pub fn annotate_turn(&self, turn: &Turn, context: &[&Turn], provider: &ProviderConfig) -> Outcome {
        self.counters.requested.fetch_add(1, Ordering::Relaxed);
        let outcome = self.annotate_inner(turn, context, provider);
        match &outcome {
            Ok(_) => self.counters.succeeded.fetch_add(1, Ordering::Relaxed),
            Err(_) => self.counters.failed.fetch_add(1, Ordering::Relaxed),
        };
        outcome
    }

    fn annotate_inner(&self, turn: &Turn, context: &[&Turn], provider: &ProviderConfig) -> Outcome {
        let key = self.cache_key(turn, provider);
        let fail = |attempts, cause| AnnotationFailed {
            model_id: provider.model_id.clone(),
            turn_id: turn.turn_id.clone(),
            attempts,
            cause,
        };

        if let Some(record) = self.cache.get(&key) {
            match record.status {
                CacheStatus::Ok { .. } => {
                    self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(record.annotation().expect("ok record"));
                }
                CacheStatus::Failed { cause } if !self.retry_failed => {
                    self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Err(fail(0, FailureCause::Cached(cause)));
                }
                CacheStatus::Failed { .. } => {}
            }
        }

        let prompt = build_prompt_with_context(turn, context).map_err(|e| fail(0, FailureCause::Prompt(e)))?;
        let limiter = self.limiters.get(&provider.model_id);
        let mut attempts = 0;
        let mut last_cause = None;
        while attempts <= provider.max_retries {
            if attempts > 0 {
                std::thread::sleep(self.backoff.delay(attempts - 1));
            }
            attempts += 1;
            if let Some(l) = limiter {
                l.acquire();
            }
            self.counters.provider_calls.fetch_add(1, Ordering::Relaxed);
            let cause = match self.backend.complete(provider, &prompt, turn) {
                Err(e) => FailureCause::Transport(e),
                Ok(raw) => match parse_response(&raw) {
                    Ok(parsed) => {
                        if !parsed.warnings.is_empty() {
                            self.counters.truncated.fetch_add(1, Ordering::Relaxed);
                        }
                        let record = CacheRecord {
                            turn_id: key.turn_id.clone(),
                            model_id: key.model_id.clone(),
                            model_name: key.model_name.clone(),
                            prompt_hash: key.prompt_hash.clone(),
                            status: CacheStatus::Ok {
                                emotions: parsed.emotions,
                            },
                        };
                        let ann = record.annotation().expect("ok record");
                        self.cache
                            .put(record)
                            .map_err(|e| fail(attempts, FailureCause::Cache(e.to_string())))?;
                        return Ok(ann);
                    }
                    Err(e) if e.is_retryable() => FailureCause::Response(e),
                    Err(e) => {
                        last_cause = Some(FailureCause::Response(e));
                        break;
                    }
                },
            };
            log::debug!(
                "turn {} / {}: attempt {attempts} failed: {cause}",
                turn.turn_id,
                provider.model_id
            );
            last_cause = Some(cause);
        }

        let cause = last_cause.expect("at least one attempt");
        log::warn!("turn {} / {}: giving up: {cause}", turn.turn_id, provider.model_id);
        self.cache
            .put(CacheRecord {
                turn_id: key.turn_id,
                model_id: key.model_id,
                model_name: key.model_name,
                prompt_hash: key.prompt_hash,
                status: CacheStatus::Failed {
                    cause: cause.to_string(),
                },
            })
            .map_err(|e| fail(attempts, FailureCause::Cache(e.to_string())))?;
        Err(fail(attempts, cause))
    }

    /// Annotates every job with every provider. Providers run side by side,
    /// each with up to `max_in_flight` concurrent requests. The result is
    /// indexed `[job][provider]` in input order regardless of completion
    /// order.
    pub fn annotate_all(&self, jobs: &[Job<'_>]) -> Vec<Vec<Outcome>> {
        let mut per_provider: Vec<Vec<Option<Outcome>>> =
            self.providers.iter().map(|_| (0..jobs.len()).map(|_| None).collect()).collect();

        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (p_idx, provider) in self.providers.iter().enumerate() {
                let next = std::sync::Arc::new(AtomicUsize::new(0));
                let workers = self.max_in_flight.min(jobs.len()).max(1);
                for _ in 0..workers {
                    let next = std::sync::Arc::clone(&next);
                    handles.push((
                        p_idx,
                        scope.spawn(move || {
                            let mut done = Vec::new();
                            loop {
                                let i = next.fetch_add(1, Ordering::Relaxed);
                                let Some(job) = jobs.get(i) else { break };
                                done.push((i, self.annotate_turn(job.turn, &job.context, provider)));
                            }
                            done
                        }),
                    ));
                }
            }
            for (p_idx, handle) in handles {
                for (i, outcome) in handle.join().expect("annotation worker panicked") {
                    per_provider[p_idx][i] = Some(outcome);
                }
            }
        });

        (0..jobs.len())
            .map(|i| {
                per_provider
                    .iter_mut()
                    .map(|col| col[i].take().expect("every job visited"))
                    .collect()
            })
            .collect()
    }
}
