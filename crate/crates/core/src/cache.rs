//! Content-addressed result cache keyed by (dataset, plan-prefix fingerprint).
//!
//! Entries are immutable once written. On disk each entry is one JSON file
//! named after the SHA-256 of its key; a checksum over the payload detects
//! corruption, in which case the entry is evicted and treated as a miss.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::record::Record;
use crate::trace::OpRecordTrace;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset_id: String,
    pub prefix_fingerprint: String,
}

impl CacheKey {
    pub fn new(dataset_id: &str, prefix_fingerprint: &str) -> Self {
        CacheKey {
            dataset_id: dataset_id.to_string(),
            prefix_fingerprint: prefix_fingerprint.to_string(),
        }
    }

    pub fn digest(&self) -> String {
        fingerprint::of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CachePayload {
    /// Output of a plan prefix, plus the trace of its last operator so that
    /// statistics can be rebuilt without re-running it.
    Records {
        records: Vec<Record>,
        trace: Vec<OpRecordTrace>,
    },
    /// A serialized synthesized converter.
    Artifact(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub stats_fingerprint: String,
    pub payload: CachePayload,
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    checksum: String,
    entry: CacheEntry,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writes: u64,
    pub evictions: u64,
}

/// Safe for concurrent readers; writes go through a single writer lock.
#[derive(Debug)]
pub struct ResultCache {
    dir: Option<PathBuf>,
    enabled: bool,
    mem: RwLock<HashMap<CacheKey, Arc<CacheEntry>>>,
    writer: Mutex<()>,
    stats: Mutex<CacheStats>,
}

impl ResultCache {
    pub fn in_memory() -> Self {
        ResultCache {
            dir: None,
            enabled: true,
            mem: RwLock::default(),
            writer: Mutex::default(),
            stats: Mutex::default(),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResultCache {
            dir: Some(dir),
            ..Self::in_memory()
        })
    }

    /// A cache that never hits and never stores.
    pub fn disabled() -> Self {
        ResultCache {
            enabled: false,
            ..Self::in_memory()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock().unwrap()
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<CacheEntry>> {
        if !self.enabled {
            return None;
        }
        if let Some(e) = self.mem.read().unwrap().get(key) {
            self.stats.lock().unwrap().hits += 1;
            return Some(e.clone());
        }
        let found = self.dir.as_ref().and_then(|dir| self.load(dir, key));
        let mut st = self.stats.lock().unwrap();
        match found {
            Some(e) => {
                st.hits += 1;
                let e = Arc::new(e);
                self.mem.write().unwrap().insert(key.clone(), e.clone());
                Some(e)
            }
            None => {
                st.misses += 1;
                None
            }
        }
    }

    pub fn get_records(&self, key: &CacheKey) -> Option<(Vec<Record>, Vec<OpRecordTrace>)> {
        match &self.get(key)?.payload {
            CachePayload::Records { records, trace } => Some((records.clone(), trace.clone())),
            CachePayload::Artifact(_) => None,
        }
    }

    /// Stores an entry. An existing entry under the same key is left untouched.
    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let _w = self.writer.lock().unwrap();
        if self.mem.read().unwrap().contains_key(&entry.key) {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", entry.key.digest()));
            if !path.exists() {
                let stored = StoredEntry {
                    checksum: fingerprint::of(&entry.payload),
                    entry: entry.clone(),
                };
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, serde_json::to_vec(&stored)?)?;
                fs::rename(&tmp, &path)
                    .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
            }
        }
        self.mem
            .write()
            .unwrap()
            .insert(entry.key.clone(), Arc::new(entry));
        self.stats.lock().unwrap().writes += 1;
        Ok(())
    }

    pub fn put_records(
        &self,
        key: CacheKey,
        stats_fingerprint: &str,
        records: Vec<Record>,
        trace: Vec<OpRecordTrace>,
    ) -> Result<()> {
        self.put(CacheEntry {
            key,
            stats_fingerprint: stats_fingerprint.to_string(),
            payload: CachePayload::Records { records, trace },
        })
    }

    fn load(&self, dir: &Path, key: &CacheKey) -> Option<CacheEntry> {
        let path = dir.join(format!("{}.json", key.digest()));
        let bytes = fs::read(&path).ok()?;
        let valid = serde_json::from_slice::<StoredEntry>(&bytes)
            .ok()
            .filter(|s| s.entry.key == *key && s.checksum == fingerprint::of(&s.entry.payload));
        match valid {
            Some(s) => Some(s.entry),
            None => {
                log::warn!("evicting corrupted cache entry {}", path.display());
                let _w = self.writer.lock().unwrap();
                let _ = fs::remove_file(&path);
                self.stats.lock().unwrap().evictions += 1;
                None
            }
        }
    }
}
