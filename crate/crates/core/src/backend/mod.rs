//! Uniform, cached access to chat-completion models.

pub mod cache;
pub mod http;
pub mod mock;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ModelId;

pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use http::{HttpTransport, ModelEndpoint};
pub use mock::{MockScript, MockTransport, RuleSpec, ScriptSpec};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionQuery {
    pub model_id: ModelId,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Re-query counter; 0 for the first ask.
    #[serde(default)]
    pub attempt: u32,
}

impl CompletionQuery {
    pub fn new(model_id: impl Into<ModelId>, prompt: impl Into<String>, temperature: f64) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            attempt: 0,
        }
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

/// One wire connection to a model server.
pub trait Transport: Send + Sync {
    fn send(&self, query: &CompletionQuery) -> Result<String, TransportError>;
    fn kind(&self) -> BackendKind;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("unknown model {0:?}")]
    UnknownModel(ModelId),
    #[error("model {0:?} is already registered")]
    DuplicateModel(ModelId),
    #[error("backend for {model:?} unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable {
        model: ModelId,
        attempts: u32,
        message: String,
    },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub retries: u32,
}

struct Registered {
    transport: Box<dyn Transport>,
    max_retries: u32,
}

/// Counters since construction (or the last [`Backend::reset_stats`]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub wire_calls: u64,
    pub retries: u64,
}

/// Registry of models sharing one response cache.
///
/// `complete` may be called concurrently; registration needs `&mut self`
/// and therefore happens before the backend is shared.
pub struct Backend {
    models: BTreeMap<ModelId, Registered>,
    cache: ResponseCache,
    samples_per_query: u32,
    run_index: u32,
    backoff: Duration,
    /// One lock per key being fetched, so concurrent callers asking the
    /// same question wait for a single wire call.
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    requests: AtomicU64,
    cache_hits: AtomicU64,
    wire_calls: AtomicU64,
    retries: AtomicU64,
}

impl Backend {
    pub fn new(cache: ResponseCache) -> Self {
        Self {
            models: BTreeMap::new(),
            cache,
            samples_per_query: 1,
            run_index: 0,
            backoff: Duration::from_millis(250),
            in_flight: Mutex::new(HashMap::new()),
            requests: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            wire_calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(ResponseCache::in_memory())
    }

    /// Base delay of the exponential retry backoff.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    /// With more than one sample per query, repeated runs (selected by
    /// [`Backend::set_run_index`]) get distinct cache slots.
    pub fn with_samples_per_query(mut self, samples: u32) -> Self {
        self.samples_per_query = samples.max(1);
        self
    }

    pub fn set_run_index(&mut self, run: u32) {
        self.run_index = run;
    }

    pub fn register_transport(
        &mut self,
        model_id: impl Into<ModelId>,
        transport: Box<dyn Transport>,
        max_retries: u32,
    ) -> Result<(), BackendError> {
        let model_id = model_id.into();
        if model_id.is_empty() {
            return Err(BackendError::InvalidQuery("empty model id".into()));
        }
        if self.models.contains_key(&model_id) {
            return Err(BackendError::DuplicateModel(model_id));
        }
        self.models.insert(model_id, Registered { transport, max_retries });
        Ok(())
    }

    pub fn register_mock(&mut self, model_id: impl Into<ModelId>, script: MockScript) -> Result<(), BackendError> {
        self.register_transport(model_id, Box::new(MockTransport::new(script)), 2)
    }

    pub fn register_endpoint(&mut self, endpoint: ModelEndpoint) -> Result<(), BackendError> {
        let id = endpoint.model_id.clone();
        let retries = endpoint.max_retries;
        let transport = HttpTransport::new(endpoint).map_err(|e| BackendError::BackendUnavailable {
            model: id.clone(),
            attempts: 0,
            message: e.to_string(),
        })?;
        self.register_transport(id, Box::new(transport), retries)
    }

    pub fn model_ids(&self) -> BTreeSet<ModelId> {
        self.models.keys().cloned().collect()
    }

    pub fn is_registered(&self, model_id: &str) -> bool {
        self.models.contains_key(model_id)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> BackendStats {
        BackendStats {
            requests: self.requests.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            wire_calls: self.wire_calls.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
        }
    }

    pub fn reset_stats(&self) {
        for counter in [&self.requests, &self.cache_hits, &self.wire_calls, &self.retries] {
            counter.store(0, Ordering::SeqCst);
        }
    }

    fn sample_slot(&self) -> Option<u32> {
        (self.samples_per_query > 1).then(|| self.run_index % self.samples_per_query)
    }

    /// Returns the cached answer for `query`, or asks the model and caches
    /// the answer. Transient failures are retried with exponential backoff.
    pub fn complete(&self, query: &CompletionQuery) -> Result<Completion, BackendError> {
        let registered = self
            .models
            .get(&query.model_id)
            .ok_or_else(|| BackendError::UnknownModel(query.model_id.clone()))?;
        if query.prompt.is_empty() {
            return Err(BackendError::InvalidQuery("empty prompt".into()));
        }
        if !query.temperature.is_finite() || query.temperature < 0.0 {
            return Err(BackendError::InvalidQuery(format!("temperature {}", query.temperature)));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);

        let key = cache_key(query, self.sample_slot());
        let hit = |text| {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            Ok(Completion {
                text,
                cached: true,
                retries: 0,
            })
        };
        if let Some(text) = self.cache.get(&key) {
            return hit(text);
        }
        let key_lock = self
            .in_flight
            .lock()
            .expect("in-flight map poisoned")
            .entry(key.clone())
            .or_default()
            .clone();
        let _guard = key_lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(text) = self.cache.get(&key) {
            return hit(text);
        }
        let result = self.fetch(registered, query, key.clone());
        self.in_flight.lock().expect("in-flight map poisoned").remove(&key);
        result
    }

    fn fetch(&self, registered: &Registered, query: &CompletionQuery, key: String) -> Result<Completion, BackendError> {

        let mut attempt = 0;
        let text = loop {
            self.wire_calls.fetch_add(1, Ordering::SeqCst);
            match registered.transport.send(query) {
                Ok(text) => break text,
                Err(TransportError::Transient(message)) if attempt < registered.max_retries => {
                    log::debug!("{}: retrying after {message}", query.model_id);
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                    self.retries.fetch_add(1, Ordering::SeqCst);
                }
                Err(err) => {
                    return Err(BackendError::BackendUnavailable {
                        model: query.model_id.clone(),
                        attempts: attempt + 1,
                        message: err.to_string(),
                    })
                }
            }
        };

        let entry = CacheEntry::new(key, query, text.clone(), registered.transport.kind());
        if let Err(err) = self.cache.put(entry) {
            log::warn!("failed to persist cache entry: {err}");
        }
        Ok(Completion {
            text,
            cached: false,
            retries: attempt,
        })
    }
}
