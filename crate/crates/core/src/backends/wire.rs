//! JSON bodies of the five capability endpoints. Field names follow the
//! common hosted-completion conventions; these structs are the schema.

use serde::{Deserialize, Serialize};

fn is_false(b: &bool) -> bool {
    !*b
}

/// `POST /v1/complete`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequestWire {
    pub prompt: String,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub logprobs: bool,
    pub temperature: f64,
    /// When set, the response text, tokens and logprobs cover the prompt
    /// followed by the generated continuation.
    #[serde(default, skip_serializing_if = "is_false")]
    pub echo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponseWire {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub token_logprobs: Vec<Option<f64>>,
}

/// `POST /v1/detect`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequestWire {
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObjectWire {
    pub label: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponseWire {
    pub objects: Vec<DetectedObjectWire>,
    /// `[width, height]` in pixels.
    pub image_size: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_size: Option<usize>,
}

/// `POST /v1/caption`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRequestWire {
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponseWire {
    pub captions: Vec<String>,
}

/// `POST /v1/similarity`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityRequestWire {
    pub image_ref: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResponseWire {
    pub score: f64,
}

/// `POST /v1/embed`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequestWire {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponseWire {
    pub vector: Vec<f64>,
}
