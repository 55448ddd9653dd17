//! Record/replay store for service responses.
//!
//! Requests are keyed by the SHA-256 of their canonical JSON encoding. Each entry keeps the
//! response body and a latency, which virtual-time simulation consumes instead of the clock.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::transport::TransportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub response: serde_json::Value,
    pub latency_s: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Cassette {
    pub entries: BTreeMap<String, CassetteEntry>,
    /// Hashes requested during replay that had no entry, in request order.
    #[serde(skip)]
    misses: Mutex<Vec<String>>,
}

impl Clone for Cassette {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            misses: Mutex::new(self.misses()),
        }
    }
}

impl PartialEq for Cassette {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CassetteError {
    #[error("cassette io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cassette format error: {0}")]
    Format(#[from] serde_json::Error),
}

/// Stable hash of a request: hex SHA-256 of its JSON encoding with sorted object keys.
pub fn request_hash<T: Serialize>(request: &T) -> String {
    // serde_json::Value maps are ordered, which canonicalizes key order
    let value = serde_json::to_value(request).expect("requests serialize to JSON");
    let text = serde_json::to_string(&value).expect("JSON values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CassetteError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CassetteError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CassetteError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, text.as_bytes()).map_err(|source| CassetteError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert<T: Serialize>(&mut self, request: &T, response: serde_json::Value, latency_s: f64) {
        self.entries.insert(
            request_hash(request),
            CassetteEntry {
                response,
                latency_s,
            },
        );
    }

    /// Looks up a request; misses are remembered and reported as transport errors.
    pub fn lookup<T: Serialize>(&self, request: &T) -> Result<&CassetteEntry, TransportError> {
        let key = request_hash(request);
        match self.entries.get(&key) {
            Some(entry) => Ok(entry),
            None => {
                self.misses.lock().unwrap().push(key.clone());
                Err(TransportError::CassetteMiss(key))
            }
        }
    }

    pub fn misses(&self) -> Vec<String> {
        self.misses.lock().unwrap().clone()
    }

    pub fn clear_misses(&self) {
        self.misses.lock().unwrap().clear();
    }
}
