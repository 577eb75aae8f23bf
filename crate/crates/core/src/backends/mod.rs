//! Model-service capabilities and the transports that reach them.
//!
//! Every call goes through one shape: a typed request is serialized to
//! canonical JSON, digested, and handed to a [`Transport`], which returns a
//! raw JSON response. [`ModelClient`] owns the typed side and validates every
//! response against the domain invariants before it can reach the pipeline.
//! Transports compose: fixture replay, HTTP, on-disk caching, call counting
//! and per-capability routing are all `Transport` implementations.

pub mod digest;
pub mod fixture;
pub mod http;
pub mod scripted;
pub mod wire;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datastore::cache::ResponseCache;
use crate::model::{cosine_similarity, BoundingBox, Completion, ConceptCandidate};
use digest::{canonical_json, digest_canonical};
use wire::*;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("missing fixture for {kind} request {digest}")]
    MissingFixture { kind: Capability, digest: String },

    #[error("backend unreachable at {endpoint} after {attempts} attempts: {message}")]
    Unreachable {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("backend at {endpoint} returned HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },

    #[error("invalid backend response: {0}")]
    Validation(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("non-canonical payload: {0}")]
    NonCanonical(String),

    #[error("scripted backend has no response: {0}")]
    Script(String),

    #[error("response cache: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, BackendError::Unreachable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Detect,
    Caption,
    Complete,
    Similarity,
    Embed,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::Detect,
        Capability::Caption,
        Capability::Complete,
        Capability::Similarity,
        Capability::Embed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Capability::Detect => "detect",
            Capability::Caption => "caption",
            Capability::Complete => "complete",
            Capability::Similarity => "similarity",
            Capability::Embed => "embed",
        }
    }

    pub fn path(&self) -> String {
        format!("/v1/{}", self.as_str())
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_path(path: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.path() == path)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A serialized capability request with its canonical form and digest.
#[derive(Debug, Clone)]
pub struct Request {
    pub capability: Capability,
    pub body: Value,
    pub canonical: String,
    pub digest: String,
}

impl Request {
    pub fn new<T: Serialize>(capability: Capability, body: &T) -> Request {
        let body = serde_json::to_value(body).expect("wire requests serialize");
        Request::from_value(capability, body)
    }

    pub fn from_value(capability: Capability, body: Value) -> Request {
        let canonical = canonical_json(&body);
        let digest = digest_canonical(capability.as_str(), &canonical);
        Request {
            capability,
            body,
            canonical,
            digest,
        }
    }
}

/// Raw request/response exchange with one or more model services.
pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> Result<Value, BackendError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        (**self).call(request)
    }
}

/// Dispatches each capability to its own transport.
pub struct RoutedTransport {
    routes: [Arc<dyn Transport>; 5],
}

impl RoutedTransport {
    pub fn new(
        detect: Arc<dyn Transport>,
        caption: Arc<dyn Transport>,
        complete: Arc<dyn Transport>,
        similarity: Arc<dyn Transport>,
        embed: Arc<dyn Transport>,
    ) -> Self {
        RoutedTransport {
            routes: [detect, caption, complete, similarity, embed],
        }
    }
}

impl Transport for RoutedTransport {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        self.routes[request.capability.index()].call(request)
    }
}

/// Counts calls that reach the wrapped transport.
pub struct CountingTransport<T> {
    inner: T,
    counts: [AtomicUsize; 5],
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        CountingTransport {
            inner,
            counts: Default::default(),
        }
    }

    pub fn count(&self, capability: Capability) -> usize {
        self.counts[capability.index()].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        self.counts[request.capability.index()].fetch_add(1, Ordering::SeqCst);
        self.inner.call(request)
    }
}

/// Serves responses from the on-disk cache, falling through to the inner
/// transport on a miss and storing what it returns.
pub struct CachedTransport<T> {
    inner: T,
    cache: ResponseCache,
}

impl<T: Transport> CachedTransport<T> {
    pub fn new(inner: T, cache: ResponseCache) -> Self {
        CachedTransport { inner, cache }
    }
}

impl<T: Transport> Transport for CachedTransport<T> {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        let cache_err = |e: crate::Error| BackendError::Cache(e.to_string());
        if let Some(hit) = self.cache.get(&request.digest).map_err(cache_err)? {
            return Ok(hit);
        }
        let response = self.inner.call(request)?;
        self.cache.put(&request.digest, &response).map_err(cache_err)?;
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub want_logprobs: bool,
    pub temperature: f64,
    pub echo: bool,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32, stop: Vec<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens,
            stop,
            want_logprobs: true,
            temperature: 0.0,
            echo: false,
        }
    }

    fn to_wire(&self) -> Result<CompleteRequestWire, BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(CompleteRequestWire {
            prompt: self.prompt.clone(),
            max_tokens: self.max_tokens,
            stop: self.stop.clone(),
            logprobs: self.want_logprobs,
            temperature: self.temperature,
            echo: self.echo,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_ref: String,
    pub region: Option<BoundingBox>,
    pub guidance: Option<String>,
    pub num_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub objects: Vec<ConceptCandidate>,
    pub image_width: f64,
    pub image_height: f64,
    pub vocabulary_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Validation("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Validation("non-finite embedding value".into()));
        }
        let dim = values.len();
        Ok(EmbeddingVector { values, dim })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, BackendError> {
        cosine_similarity(&self.values, &other.values)
            .map_err(|e| BackendError::Validation(e.to_string()))
    }
}

/// Typed, validating facade over a transport. Cheap to clone and safe to
/// share across episode workers.
#[derive(Clone)]
pub struct ModelClient {
    transport: Arc<dyn Transport>,
}

impl ModelClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        ModelClient { transport }
    }

    fn exchange<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        capability: Capability,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let request = Request::new(capability, body);
        let raw = self.transport.call(&request)?;
        serde_json::from_value(raw).map_err(|e| {
            BackendError::Validation(format!("malformed {capability} response: {e}"))
        })
    }

    pub fn detect(&self, image_ref: &str) -> Result<DetectionResult, BackendError> {
        let resp: DetectResponseWire = self.exchange(
            Capability::Detect,
            &DetectRequestWire {
                image_ref: image_ref.to_string(),
            },
        )?;
        let [w, h] = resp.image_size;
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(BackendError::Validation(format!("invalid image size {w}x{h}")));
        }
        let objects = resp
            .objects
            .into_iter()
            .map(|o| {
                let c = ConceptCandidate {
                    label: o.label,
                    bbox: BoundingBox {
                        x_min: o.bbox[0],
                        y_min: o.bbox[1],
                        x_max: o.bbox[2],
                        y_max: o.bbox[3],
                    },
                    score: o.score,
                };
                c.validate().map_err(|e| BackendError::Validation(e.to_string()))?;
                Ok(c)
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(DetectionResult {
            objects,
            image_width: w,
            image_height: h,
            vocabulary_size: resp.vocabulary_size,
        })
    }

    pub fn caption(&self, req: &CaptionRequest) -> Result<Vec<String>, BackendError> {
        if req.num_candidates < 1 {
            return Err(BackendError::InvalidRequest("num_candidates must be >= 1".into()));
        }
        if let Some(region) = &req.region {
            if !region.is_valid() {
                return Err(BackendError::InvalidRequest(format!("invalid region {region}")));
            }
        }
        let resp: CaptionResponseWire = self.exchange(
            Capability::Caption,
            &CaptionRequestWire {
                image_ref: req.image_ref.clone(),
                bbox: req.region.map(|b| b.to_array()),
                guidance: req.guidance.clone(),
                n: req.num_candidates,
            },
        )?;
        if resp.captions.len() != req.num_candidates {
            return Err(BackendError::Validation(format!(
                "expected {} captions, got {}",
                req.num_candidates,
                resp.captions.len()
            )));
        }
        if resp.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(BackendError::Validation("empty caption".into()));
        }
        Ok(resp.captions)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let wire = req.to_wire()?;
        let resp: CompleteResponseWire = self.exchange(Capability::Complete, &wire)?;
        validate_completion(req, resp)
    }

    pub fn similarity(&self, image_ref: &str, text: &str) -> Result<f64, BackendError> {
        let resp: SimilarityResponseWire = self.exchange(
            Capability::Similarity,
            &SimilarityRequestWire {
                image_ref: image_ref.to_string(),
                text: text.to_string(),
            },
        )?;
        if !resp.score.is_finite() || resp.score.abs() > 1.0 {
            return Err(BackendError::Validation(format!(
                "similarity {} outside [-1, 1]",
                resp.score
            )));
        }
        Ok(resp.score)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let resp: EmbedResponseWire = self.exchange(
            Capability::Embed,
            &EmbedRequestWire {
                text: text.to_string(),
            },
        )?;
        EmbeddingVector::new(resp.vector)
    }
}

fn validate_completion(
    req: &CompletionRequest,
    resp: CompleteResponseWire,
) -> Result<Completion, BackendError> {
    let invalid = |m: String| Err(BackendError::Validation(m));
    let generated = if req.echo {
        match resp.text.strip_prefix(req.prompt.as_str()) {
            Some(rest) => rest,
            None => return invalid("echoed completion does not start with the prompt".into()),
        }
    } else {
        resp.text.as_str()
    };
    if let Some(stop) = req.stop.iter().find(|s| !s.is_empty() && generated.contains(s.as_str())) {
        return invalid(format!("completion contains stop string {stop:?}"));
    }
    if !resp.tokens.is_empty() && resp.tokens.concat() != resp.text {
        return invalid("tokens do not concatenate to the completion text".into());
    }
    if !req.want_logprobs {
        return Ok(Completion::new(resp.text, resp.tokens, None));
    }
    if resp.tokens.len() != resp.token_logprobs.len() {
        return invalid(format!(
            "{} tokens but {} logprobs",
            resp.tokens.len(),
            resp.token_logprobs.len()
        ));
    }
    if resp.tokens.is_empty() && !resp.text.is_empty() {
        return invalid("logprobs requested but no tokens returned".into());
    }
    let mut lps = Vec::with_capacity(resp.token_logprobs.len());
    for (i, lp) in resp.token_logprobs.iter().enumerate() {
        match lp {
            Some(v) if v.is_finite() && *v <= 0.0 => lps.push(*v),
            Some(v) => return invalid(format!("token logprob {v} is not a log-probability")),
            // The first echoed token has no conditional probability.
            None if req.echo && i == 0 => lps.push(0.0),
            None => return invalid(format!("missing logprob for token {i}")),
        }
    }
    Ok(Completion::new(resp.text, resp.tokens, Some(lps)))
}
