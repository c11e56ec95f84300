//! Embedded key-value store backed by a write-ahead log.
//!
//! Every write is a batch of `(key, Some(value) | None)` pairs framed as one
//! record, so a batch is either fully replayed after a crash or not at all.
//! The log is compacted into a snapshot on open once it has grown well past
//! the live key count.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::frame::{self, SyncPolicy};

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("kv io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("kv record: {0}")]
    Codec(#[from] serde_json::Error),
}

pub type Batch = Vec<(String, Option<Value>)>;

struct Inner {
    map: BTreeMap<String, Value>,
    file: File,
    records: u64,
}

pub struct KvStore {
    path: PathBuf,
    sync: SyncPolicy,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for KvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvStore").field("path", &self.path).finish()
    }
}

impl KvStore {
    pub fn open(path: impl AsRef<Path>, sync: SyncPolicy) -> Result<Self, KvError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| KvError::Io { path: path.clone(), source };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let (frames, valid) = frame::read_all(&path).map_err(io)?;
        let mut map = BTreeMap::new();
        for f in &frames {
            let batch: Batch = serde_json::from_slice(&f.body)?;
            apply(&mut map, batch);
        }
        let mut records = frames.len() as u64;
        if records > 64 && records > 4 * map.len() as u64 {
            let mut snapshot = Vec::new();
            for (k, v) in &map {
                let batch: Batch = vec![(k.clone(), Some(v.clone()))];
                snapshot.extend(frame::encode(&serde_json::to_vec(&batch)?));
            }
            frame::write_atomic(&path, &snapshot, sync).map_err(io)?;
            records = map.len() as u64;
        } else if valid < std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0) {
            let f = OpenOptions::new().write(true).open(&path).map_err(io)?;
            f.set_len(valid).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(KvStore { path, sync, inner: Mutex::new(Inner { map, file, records }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.inner.lock().map.get(key).cloned()
    }

    pub fn get_as<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.get(key).map(serde_json::from_value).transpose().map_err(Into::into)
    }

    /// Entries whose key starts with `prefix`, in key order.
    pub fn scan(&self, prefix: &str) -> Vec<(String, Value)> {
        let inner = self.inner.lock();
        inner
            .map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn scan_as<T: DeserializeOwned>(&self, prefix: &str) -> Result<Vec<(String, T)>, KvError> {
        self.scan(prefix)
            .into_iter()
            .map(|(k, v)| Ok((k, serde_json::from_value(v)?)))
            .collect()
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), KvError> {
        self.write(vec![(key.to_string(), Some(serde_json::to_value(value)?))])
    }

    pub fn delete(&self, key: &str) -> Result<(), KvError> {
        self.write(vec![(key.to_string(), None)])
    }

    /// Durably logs the batch, then applies it in memory.
    pub fn write(&self, batch: Batch) -> Result<(), KvError> {
        if batch.is_empty() {
            return Ok(());
        }
        let bytes = frame::encode(&serde_json::to_vec(&batch)?);
        let mut inner = self.inner.lock();
        frame::write_frames(&mut inner.file, &bytes, self.sync)
            .map_err(|source| KvError::Io { path: self.path.clone(), source })?;
        inner.records += 1;
        apply(&mut inner.map, batch);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn apply(map: &mut BTreeMap<String, Value>, batch: Batch) {
    for (k, v) in batch {
        match v {
            Some(v) => {
                map.insert(k, v);
            }
            None => {
                map.remove(&k);
            }
        }
    }
}
