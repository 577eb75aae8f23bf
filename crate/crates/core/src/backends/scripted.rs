//! A backend that answers from a hand-written scene script instead of a
//! model. Used to record fixture corpora and to drive randomized property
//! tests of the loop controller.
//!
//! Completions are scripted per round and ensemble member. The round of a
//! question-answering call is its position: call `c` belongs to round
//! `c / k`, member `c % k`. Identical prompts always get identical
//! responses (the first one issued), as a temperature-0 model would give.
//! Attend-scoring calls (echo requests) are answered from a static label
//! score table. Embeddings come from an explicit table or, failing that,
//! from [`HashedBowEmbedder`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::digest::sha256_hex;
use super::wire::*;
use super::{BackendError, Capability, Request, Transport};
use crate::model::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedImage {
    pub image_ref: String,
    pub width: f64,
    pub height: f64,
    pub global_caption: String,
    #[serde(default)]
    pub objects: Vec<DetectedObjectWire>,
    /// Caption candidates per object label, in the order the captioner
    /// returns them.
    #[serde(default)]
    pub regional_captions: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMember {
    pub answer: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRound {
    /// Either one member (used for every ensemble slot) or exactly `k`.
    pub members: Vec<ScriptedMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub image: ScriptedImage,
    #[serde(default)]
    pub attend_scores: BTreeMap<String, f64>,
    pub rounds: Vec<ScriptedRound>,
    /// Image/text similarity by text.
    #[serde(default)]
    pub similarities: BTreeMap<String, f64>,
}

/// Deterministic bag-of-words embedding: each lowercase alphanumeric word
/// adds a signed unit to one of `dim` buckets chosen by its SHA-256.
#[derive(Debug, Clone, Copy)]
pub struct HashedBowEmbedder {
    pub dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 32 }
    }
}

impl HashedBowEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        for word in lowered.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = hex::decode(sha256_hex(word.as_bytes())).expect("hex digest");
            let bucket = u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) % self.dim as u64;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket as usize] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

#[derive(Default)]
struct State {
    qa_calls: usize,
    memo: HashMap<String, Value>,
    gaps: Vec<String>,
}

pub struct ScriptedTransport {
    script: Script,
    embeddings: BTreeMap<String, Vec<f64>>,
    embedder: HashedBowEmbedder,
    ensemble_size: usize,
    lenient_rounds: bool,
    state: Mutex<State>,
}

const FILLER_LOGPROB: f64 = -0.05;
const RATIONALE_LOGPROB: f64 = -0.5;

impl ScriptedTransport {
    pub fn new(script: Script, ensemble_size: usize) -> Self {
        ScriptedTransport {
            script,
            embeddings: BTreeMap::new(),
            embedder: HashedBowEmbedder::default(),
            ensemble_size: ensemble_size.max(1),
            lenient_rounds: false,
            state: Mutex::new(State::default()),
        }
    }

    pub fn with_embeddings(mut self, embeddings: BTreeMap<String, Vec<f64>>) -> Self {
        self.embeddings = embeddings;
        self
    }

    /// Past the last scripted round, reuse the last round instead of
    /// reporting a gap; with a member count other than `k`, cycle through
    /// the scripted members.
    pub fn lenient_rounds(mut self, lenient: bool) -> Self {
        self.lenient_rounds = lenient;
        self
    }

    /// Every request the script could not answer, in call order.
    pub fn gaps(&self) -> Vec<String> {
        self.state.lock().expect("script state").gaps.clone()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.embeddings
            .get(text)
            .cloned()
            .unwrap_or_else(|| self.embedder.embed(text))
    }

    fn gap(&self, state: &mut State, message: String) -> BackendError {
        state.gaps.push(message.clone());
        BackendError::Script(message)
    }

    fn parse<T: serde::de::DeserializeOwned>(request: &Request) -> Result<T, BackendError> {
        serde_json::from_value(request.body.clone())
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", request.capability)))
    }

    fn check_image(&self, state: &mut State, image_ref: &str) -> Result<(), BackendError> {
        if image_ref == self.script.image.image_ref {
            Ok(())
        } else {
            Err(self.gap(state, format!("unknown image '{image_ref}'")))
        }
    }

    fn detect(&self, state: &mut State, req: DetectRequestWire) -> Result<Value, BackendError> {
        self.check_image(state, &req.image_ref)?;
        let img = &self.script.image;
        Ok(serde_json::to_value(DetectResponseWire {
            objects: img.objects.clone(),
            image_size: [img.width, img.height],
            vocabulary_size: None,
        })
        .expect("serializes"))
    }

    fn caption(&self, state: &mut State, req: CaptionRequestWire) -> Result<Value, BackendError> {
        self.check_image(state, &req.image_ref)?;
        let img = &self.script.image;
        let captions = match req.bbox {
            None => vec![img.global_caption.clone(); req.n],
            Some(region) => {
                let region = BoundingBox {
                    x_min: region[0],
                    y_min: region[1],
                    x_max: region[2],
                    y_max: region[3],
                };
                let best = img
                    .objects
                    .iter()
                    .map(|o| {
                        let b = BoundingBox {
                            x_min: o.bbox[0],
                            y_min: o.bbox[1],
                            x_max: o.bbox[2],
                            y_max: o.bbox[3],
                        };
                        (o, b.intersection_over_union(&region))
                    })
                    .filter(|(_, iou)| *iou > 0.0)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                let Some((object, _)) = best else {
                    return Err(self.gap(state, format!("no scripted object under region {region}")));
                };
                let available = img.regional_captions.get(&object.label).cloned().unwrap_or_default();
                if available.len() < req.n {
                    return Err(self.gap(
                        state,
                        format!(
                            "label '{}' has {} scripted captions, {} requested",
                            object.label,
                            available.len(),
                            req.n
                        ),
                    ));
                }
                available.into_iter().take(req.n).collect()
            }
        };
        Ok(json!({ "captions": captions }))
    }

    fn similarity(&self, state: &mut State, req: SimilarityRequestWire) -> Result<Value, BackendError> {
        self.check_image(state, &req.image_ref)?;
        match self.script.similarities.get(&req.text) {
            Some(score) => Ok(json!({ "score": score })),
            None => Err(self.gap(state, format!("no scripted similarity for {:?}", req.text))),
        }
    }

    fn score_label(&self, state: &mut State, req: &CompleteRequestWire) -> Result<Value, BackendError> {
        let label = self
            .script
            .attend_scores
            .keys()
            .filter(|l| req.prompt.ends_with(&format!(" {l}")))
            .max_by_key(|l| l.len());
        let Some(label) = label else {
            return Err(self.gap(state, "attend-scoring prompt ends with no scripted label".into()));
        };
        let score = self.script.attend_scores[label];
        let suffix = format!(" {label}");
        let prefix = &req.prompt[..req.prompt.len() - suffix.len()];
        Ok(json!({
            "text": format!("{}\n", req.prompt),
            "tokens": [prefix, suffix, "\n"],
            "token_logprobs": [Value::Null, score, FILLER_LOGPROB],
        }))
    }

    fn answer(&self, state: &mut State, req: &CompleteRequestWire) -> Result<Value, BackendError> {
        let call = state.qa_calls;
        state.qa_calls += 1;
        let round_index = call / self.ensemble_size;
        let member_index = call % self.ensemble_size;
        let rounds = &self.script.rounds;
        let round = match rounds.get(round_index) {
            Some(r) => r,
            None if self.lenient_rounds && !rounds.is_empty() => &rounds[rounds.len() - 1],
            None => {
                return Err(self.gap(
                    state,
                    format!("no scripted completion for round {}", round_index + 1),
                ))
            }
        };
        let member = match round.members.len() {
            1 => &round.members[0],
            n if n == self.ensemble_size => &round.members[member_index],
            n if self.lenient_rounds && n > 0 => &round.members[member_index % n],
            n => {
                return Err(self.gap(
                    state,
                    format!(
                        "round {} scripts {n} members for an ensemble of {}",
                        round_index + 1,
                        self.ensemble_size
                    ),
                ))
            }
        };

        let mut tokens: Vec<(String, f64)> = Vec::new();
        let answer_token = |tokens: &mut Vec<(String, f64)>| {
            if !member.answer.is_empty() {
                tokens.push((format!(" {}", member.answer), member.logprob));
            }
        };
        if req.prompt.ends_with("Rationale:") {
            let rationale = member.rationale.clone().unwrap_or_default();
            tokens.push((format!(" {rationale}"), RATIONALE_LOGPROB));
            tokens.push(("\n".into(), FILLER_LOGPROB));
            tokens.push(("Answer:".into(), FILLER_LOGPROB));
            answer_token(&mut tokens);
            tokens.push(("\n".into(), FILLER_LOGPROB));
        } else if req.stop.iter().any(|s| s == "\n") {
            answer_token(&mut tokens);
        } else {
            answer_token(&mut tokens);
            tokens.push(("\n".into(), FILLER_LOGPROB));
            if let Some(r) = &member.rationale {
                tokens.push(("Rationale:".into(), FILLER_LOGPROB));
                tokens.push((format!(" {r}"), RATIONALE_LOGPROB));
                tokens.push(("\n".into(), FILLER_LOGPROB));
            }
        }
        let text: String = tokens.iter().map(|(t, _)| t.as_str()).collect();
        let (toks, lps): (Vec<String>, Vec<f64>) = tokens.into_iter().unzip();
        Ok(json!({ "text": text, "tokens": toks, "token_logprobs": lps }))
    }
}

impl Transport for ScriptedTransport {
    fn call(&self, request: &Request) -> Result<Value, BackendError> {
        let mut state = self.state.lock().expect("script state");
        match request.capability {
            Capability::Detect => self.detect(&mut state, Self::parse(request)?),
            Capability::Caption => self.caption(&mut state, Self::parse(request)?),
            Capability::Similarity => self.similarity(&mut state, Self::parse(request)?),
            Capability::Embed => {
                let req: EmbedRequestWire = Self::parse(request)?;
                Ok(json!({ "vector": self.embed_text(&req.text) }))
            }
            Capability::Complete => {
                let req: CompleteRequestWire = Self::parse(request)?;
                if req.echo {
                    return self.score_label(&mut state, &req);
                }
                if let Some(hit) = state.memo.get(&request.digest) {
                    let hit = hit.clone();
                    state.qa_calls += 1;
                    return Ok(hit);
                }
                let resp = self.answer(&mut state, &req)?;
                state.memo.insert(request.digest.clone(), resp.clone());
                Ok(resp)
            }
        }
    }
}
