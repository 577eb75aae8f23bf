//! Digest-keyed replay of recorded model responses.
//!
//! A fixture file is JSONL, one [`FixtureRecord`] per line. Records may carry
//! the originating request for readability; when present, the digest is
//! checked against it on load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::digest::{canonical_json, digest_canonical, is_digest};
use super::{BackendError, Capability, Request, Transport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request_digest: String,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
}

impl FixtureRecord {
    pub fn from_exchange(request: &Request, response: Value) -> Self {
        FixtureRecord {
            request_digest: request.digest.clone(),
            response,
            kind: Some(request.capability),
            request: Some(request.body.clone()),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !is_digest(&self.request_digest) {
            return Err(format!("'{}' is not a sha256 hex digest", self.request_digest));
        }
        if let (Some(kind), Some(req)) = (self.kind, &self.request) {
            let expect = digest_canonical(kind.as_str(), &canonical_json(req));
            if expect != self.request_digest {
                return Err(format!(
                    "digest {} does not match the recorded request",
                    self.request_digest
                ));
            }
        }
        Ok(())
    }
}

pub fn read_fixture_records(path: &Path) -> Result<Vec<FixtureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|m| Error::data(path, format!("line {}: {m}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_fixture_records(path: &Path, records: &[FixtureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("fixture records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read-only after construction. In strict mode a miss is an error;
/// otherwise misses fall through to the fallback transport.
pub struct FixtureTransport {
    responses: HashMap<String, Value>,
    fallback: Option<Arc<dyn Transport>>,
}

impl FixtureTransport {
    pub fn strict(records: impl IntoIterator<Item = FixtureRecord>) -> Result<Self> {
        let mut responses = HashMap::new();
        for rec in records {
            match responses.get(&rec.request_digest) {
                Some(existing) if existing != &rec.response => {
                    return Err(Error::Corpus(format!(
                        "conflicting fixture responses for digest {}",
                        rec.request_digest
                    )));
                }
                _ => {
                    responses.insert(rec.request_digest, rec.response);
                }
            }
        }
        Ok(FixtureTransport {
            responses,
            fallback: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::strict(read_fixture_records(path)?)
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn Transport>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Transport for FixtureTransport {
    fn call(&self, request: &Request) -> std::result::Result<Value, BackendError> {
        if let Some(v) = self.responses.get(&request.digest) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(f) => f.call(request),
            None => Err(BackendError::MissingFixture {
                kind: request.capability,
                digest: request.digest.clone(),
            }),
        }
    }
}

/// Passes calls through and keeps every successful exchange as a record.
pub struct RecordingTransport<T> {
    inner: T,
    records: Mutex<Vec<FixtureRecord>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn take_records(&self) -> Vec<FixtureRecord> {
        std::mem::take(&mut *self.records.lock().expect("recording lock"))
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn call(&self, request: &Request) -> std::result::Result<Value, BackendError> {
        let response = self.inner.call(request)?;
        self.records
            .lock()
            .expect("recording lock")
            .push(FixtureRecord::from_exchange(request, response.clone()));
        Ok(response)
    }
}
