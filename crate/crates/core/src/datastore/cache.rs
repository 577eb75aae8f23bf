//! Content-addressed on-disk response cache.
//!
//! Layout: `<root>/<d[0..2]>/<d[2..4]>/<digest>.json`, one [`CacheEntry`]
//! per file. Entries are written to a temporary file and renamed into
//! place, so readers never observe a partial entry and the cache survives
//! interrupted runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::digest::{canonical_json, is_digest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response: Value,
    /// RFC 3339 timestamp of the first write.
    pub created_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Arc<Mutex<()>>,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ResponseCache {
            root,
            write_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, digest: &str) -> Result<PathBuf> {
        if !is_digest(digest) {
            return Err(Error::Invalid(format!("'{digest}' is not a sha256 hex digest")));
        }
        Ok(self
            .root
            .join(&digest[0..2])
            .join(&digest[2..4])
            .join(format!("{digest}.json")))
    }

    fn read_entry(&self, path: &Path) -> Result<CacheEntry> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn get(&self, digest: &str) -> Result<Option<Value>> {
        let path = self.entry_path(digest)?;
        if !path.exists() {
            return Ok(None);
        }
        let entry = self.read_entry(&path)?;
        if entry.request_digest != digest {
            return Err(Error::data(&path, "entry digest does not match its file name"));
        }
        Ok(Some(entry.response))
    }

    /// Stores a response. Storing an identical payload again is a no-op;
    /// a different payload under the same digest is a conflict.
    pub fn put(&self, digest: &str, response: &Value) -> Result<()> {
        let path = self.entry_path(digest)?;
        let _guard = self.write_lock.lock().expect("cache write lock");
        if path.exists() {
            let existing = self.read_entry(&path)?;
            if canonical_json(&existing.response) == canonical_json(response) {
                return Ok(());
            }
            return Err(Error::CacheConflict {
                digest: digest.to_string(),
            });
        }
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entry = CacheEntry {
            request_digest: digest.to_string(),
            response: response.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        serde_json::to_writer(&mut tmp, &entry).map_err(|e| Error::data(&path, e.to_string()))?;
        tmp.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let mut stats = CacheStats { entries: 0, bytes: 0 };
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let entry = entry.map_err(|e| Error::io(&dir, e))?;
                let path = entry.path();
                let meta = entry.metadata().map_err(|e| Error::io(&path, e))?;
                if meta.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|x| x == "json") {
                    stats.entries += 1;
                    stats.bytes += meta.len();
                }
            }
        }
        Ok(stats)
    }
}
