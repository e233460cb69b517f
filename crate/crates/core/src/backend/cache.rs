//! Content-addressed response cache.
//!
//! Entries live in memory and, when a directory is configured, on disk at
//! `<dir>/<first two hex chars>/<key>.json`. The key is a SHA-256 over the
//! query fields only, so the cache never depends on run order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendKind, CompletionQuery};

/// Hex SHA-256 of the fields that determine a model answer.
///
/// `sample` is only folded in when more than one sample per query is
/// requested, and `attempt` only for re-queries.
pub fn cache_key(query: &CompletionQuery, sample: Option<u32>) -> String {
    let mut doc = serde_json::json!({
        "model_id": query.model_id,
        "prompt": query.prompt,
        "temperature": query.temperature,
        "max_tokens": query.max_tokens,
    });
    if query.attempt > 0 {
        doc["attempt"] = query.attempt.into();
    }
    if let Some(sample) = sample {
        doc["sample"] = sample.into();
    }
    let bytes = serde_json::to_vec(&doc).expect("json of plain values");
    hex::encode(Sha256::digest(bytes))
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub attempt: u32,
    pub response_text: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub backend_kind: BackendKind,
}

impl CacheEntry {
    pub fn new(key: String, query: &CompletionQuery, response_text: String, backend_kind: BackendKind) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            key,
            model_id: query.model_id.clone(),
            prompt: query.prompt.clone(),
            temperature: query.temperature,
            max_tokens: query.max_tokens,
            attempt: query.attempt,
            response_text,
            created_at,
            backend_kind,
        }
    }
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn entry_path(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(hit) = self.memory.read().unwrap().get(key) {
            return Some(hit.clone());
        }
        let dir = self.dir.as_ref()?;
        let raw = fs::read(Self::entry_path(dir, key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry) if entry.key == key => {
                self.memory
                    .write()
                    .unwrap()
                    .insert(key.to_string(), entry.response_text.clone());
                Some(entry.response_text)
            }
            Ok(_) | Err(_) => {
                log::warn!("ignoring corrupt cache entry {key}");
                None
            }
        }
    }

    pub fn put(&self, entry: CacheEntry) -> std::io::Result<()> {
        if let Some(dir) = &self.dir {
            let path = Self::entry_path(dir, &entry.key);
            let parent = path.parent().expect("entry path has a parent");
            fs::create_dir_all(parent)?;
            // Write-then-rename keeps readers from seeing partial files.
            let mut tmp = tempfile_in(parent)?;
            tmp.1.write_all(&serde_json::to_vec_pretty(&entry)?)?;
            tmp.1.sync_all()?;
            drop(tmp.1);
            fs::rename(&tmp.0, &path)?;
        }
        self.memory.write().unwrap().insert(entry.key, entry.response_text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = fs::File::create(&path)?;
    Ok((path, file))
}
