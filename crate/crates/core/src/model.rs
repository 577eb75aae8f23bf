//! Domain types shared by every stage of the engine, plus the pure helpers
//! for answer normalization and bounding-box geometry.
//!
//! Every type here is a plain immutable value (`Clone + Send + Sync`) and
//! serializes with the field names used in the trace JSONL schema.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::digest::{canonical_json, sha256_hex};
use crate::error::{Error, Result};
use crate::prompting::PromptText;

/// Axis-aligned box in real-valued pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Invalid(format!("degenerate bounding box {b}")))
        }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Clamps to the closed rectangle `[0, w] x [0, h]`.
    pub fn clamp_to(&self, image_w: f64, image_h: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, image_w),
            y_min: self.y_min.clamp(0.0, image_h),
            x_max: self.x_max.clamp(0.0, image_w),
            y_max: self.y_max.clamp(0.0, image_h),
        }
    }

    pub fn intersection_over_union(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Scales `b` by `factor` about its center, then clamps to the image.
pub fn expand_bbox(b: &BoundingBox, factor: f64, image_w: f64, image_h: f64) -> Result<BoundingBox> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(Error::Invalid(format!(
            "bbox expansion factor must be >= 1, got {factor}"
        )));
    }
    if !b.is_valid() {
        return Err(Error::Invalid(format!("degenerate bounding box {b}")));
    }
    if !(image_w.is_finite() && image_h.is_finite() && image_w > 0.0 && image_h > 0.0) {
        return Err(Error::Invalid(format!(
            "image dimensions must be positive, got {image_w}x{image_h}"
        )));
    }
    let scaled = if factor == 1.0 {
        *b
    } else {
        let (cx, cy) = b.center();
        let half_w = b.width() * factor / 2.0;
        let half_h = b.height() * factor / 2.0;
        BoundingBox {
            x_min: cx - half_w,
            y_min: cy - half_h,
            x_max: cx + half_w,
            y_max: cy + half_h,
        }
    };
    let clamped = scaled.clamp_to(image_w, image_h);
    if !clamped.is_valid() {
        return Err(Error::Invalid(format!(
            "bounding box {b} lies outside the {image_w}x{image_h} image"
        )));
    }
    Ok(clamped)
}

/// Lowercases, collapses whitespace, drops terminal `.,!?` and leading
/// articles. Idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut s = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    while let Some(c) = s.chars().last() {
        if matches!(c, '.' | ',' | '!' | '?') || c.is_whitespace() {
            s.pop();
        } else {
            break;
        }
    }
    // Stacked articles ("the a ...") are stripped until none remain so that
    // a second pass is a no-op.
    while let Some(rest) = ["a ", "an ", "the "]
        .iter()
        .find_map(|article| s.strip_prefix(article))
    {
        s = rest.to_string();
    }
    s
}

pub fn answers_equal(a: &AnswerPrediction, b: &AnswerPrediction) -> bool {
    a.normalized_text == b.normalized_text
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCandidate {
    pub label: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ConceptCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::Invalid("concept label is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Invalid(format!(
                "detection score {} for '{}' outside [0, 1]",
                self.score, self.label
            )));
        }
        if !self.bbox.is_valid() {
            return Err(Error::Invalid(format!(
                "degenerate bounding box {} for '{}'",
                self.bbox, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendedConcept {
    pub concept: ConceptCandidate,
    pub regional_caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    pub image_ref: String,
    pub image_width: f64,
    pub image_height: f64,
    pub global_caption: String,
    pub candidates: Vec<ConceptCandidate>,
    pub attended: Vec<AttendedConcept>,
}

impl SceneContext {
    pub fn is_attended(&self, label: &str) -> bool {
        self.attended.iter().any(|a| a.concept.label == label)
    }

    /// Distinct labels not yet attended, in candidate order.
    pub fn remaining_labels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.candidates
            .iter()
            .map(|c| c.label.as_str())
            .filter(|l| !self.is_attended(l) && seen.insert(*l))
            .collect()
    }

    pub fn candidate_labels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.candidates
            .iter()
            .map(|c| c.label.as_str())
            .filter(|l| seen.insert(*l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub direct_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_rationales: Option<Vec<String>>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Invalid(format!("sample {} has an empty question", self.id)));
        }
        if let Some(idx) = self.correct_choice_index {
            let n = self.choices.as_ref().map_or(0, Vec::len);
            if idx >= n {
                return Err(Error::Invalid(format!(
                    "sample {}: correct_choice_index {idx} out of range for {n} choices",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One model continuation. `mean_logprob`/`total_logprob` are `None` when
/// log-probabilities were not requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub mean_logprob: Option<f64>,
    pub total_logprob: Option<f64>,
}

impl Completion {
    pub fn new(text: String, tokens: Vec<String>, token_logprobs: Option<Vec<f64>>) -> Self {
        match token_logprobs {
            Some(lps) => {
                let total: f64 = lps.iter().sum();
                let mean = total / lps.len().max(1) as f64;
                Completion {
                    text,
                    tokens,
                    token_logprobs: lps,
                    mean_logprob: Some(mean),
                    total_logprob: Some(total),
                }
            }
            None => Completion {
                text,
                tokens,
                token_logprobs: Vec::new(),
                mean_logprob: None,
                total_logprob: None,
            },
        }
    }

    /// Log-probabilities of the tokens overlapping the byte range
    /// `[start, end)` of `text`.
    pub fn span_logprobs(&self, start: usize, end: usize) -> Vec<f64> {
        if self.token_logprobs.len() != self.tokens.len() {
            return Vec::new();
        }
        let mut offset = 0;
        let mut out = Vec::new();
        for (tok, lp) in self.tokens.iter().zip(&self.token_logprobs) {
            let tok_end = offset + tok.len();
            if tok_end > start && offset < end && !tok.is_empty() {
                out.push(*lp);
            }
            offset = tok_end;
        }
        out
    }

    pub fn span_mean_logprob(&self, start: usize, end: usize) -> Option<f64> {
        let lps = self.span_logprobs(start, end);
        if lps.is_empty() {
            None
        } else {
            Some(lps.iter().sum::<f64>() / lps.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub raw_text: String,
    pub normalized_text: String,
    pub score: f64,
}

impl AnswerPrediction {
    pub fn new(raw_text: impl Into<String>, score: f64) -> Self {
        let raw_text = raw_text.into();
        let normalized_text = normalize_answer(&raw_text);
        AnswerPrediction {
            raw_text,
            normalized_text,
            score,
        }
    }

    /// Placeholder answer of a trace that failed before any round finished.
    pub fn empty() -> Self {
        AnswerPrediction::new("", 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    pub image_similarity: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    See,
    Select,
    Attend,
    Describe,
    Predict,
    Confirm,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::See => "see",
            Stage::Select => "select",
            Stage::Attend => "attend",
            Stage::Describe => "describe",
            Stage::Predict => "predict",
            Stage::Confirm => "confirm",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
    /// True when the failure was a transport error after retries ran out.
    #[serde(default)]
    pub unreachable: bool,
}

impl StageFailure {
    pub fn new(stage: Stage, err: impl Into<Error>) -> Self {
        let err = err.into();
        let unreachable = matches!(&err, Error::Backend(b) if b.is_unreachable());
        StageFailure {
            stage,
            message: err.to_string(),
            unreachable,
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub attended_concept: Option<ConceptCandidate>,
    pub regional_caption: Option<String>,
    pub prompts: Vec<PromptText>,
    pub ensemble: Vec<Completion>,
    pub selected_member: usize,
    pub answer: AnswerPrediction,
    pub rationale: Option<Rationale>,
    pub llm_queries_this_round: usize,
}

/// What the see stage produced, kept for offline inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub image_ref: String,
    pub global_caption: String,
    pub candidates: Vec<ConceptCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub sample_id: String,
    pub config_digest: String,
    pub config: EpisodeConfig,
    pub scene: Option<SceneSummary>,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: AnswerPrediction,
    pub converged: bool,
    pub total_llm_queries: usize,
    pub failure: Option<StageFailure>,
}

impl ReasoningTrace {
    /// Checks every structural invariant a trace produced by the pipeline
    /// must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::TraceInvariant {
                sample_id: self.sample_id.clone(),
                message,
            })
        };
        let cfg = &self.config;
        if cfg.digest() != self.config_digest {
            return fail("config_digest does not match the embedded config".into());
        }
        if self.rounds.len() > cfg.max_iterations {
            return fail(format!(
                "{} rounds exceed mIter = {}",
                self.rounds.len(),
                cfg.max_iterations
            ));
        }
        let mut labels = HashSet::new();
        let mut total = 0;
        for (i, round) in self.rounds.iter().enumerate() {
            if round.round_index != i + 1 {
                return fail(format!("round {} has round_index {}", i + 1, round.round_index));
            }
            if round.ensemble.len() != cfg.ensemble_size {
                return fail(format!(
                    "round {}: ensemble of {} completions, expected k = {}",
                    i + 1,
                    round.ensemble.len(),
                    cfg.ensemble_size
                ));
            }
            if round.selected_member >= round.ensemble.len() {
                return fail(format!("round {}: selected member out of range", i + 1));
            }
            let attend = usize::from(round.attended_concept.is_some());
            if round.llm_queries_this_round != cfg.ensemble_size + attend {
                return fail(format!(
                    "round {}: {} queries recorded, expected {}",
                    i + 1,
                    round.llm_queries_this_round,
                    cfg.ensemble_size + attend
                ));
            }
            if let Some(c) = &round.attended_concept {
                if !labels.insert(c.label.as_str()) {
                    return fail(format!("concept '{}' attended twice", c.label));
                }
            }
            if round.answer.normalized_text != normalize_answer(&round.answer.raw_text) {
                return fail(format!("round {}: answer is not normalized", i + 1));
            }
            if let Some(r) = &round.rationale {
                let expect = !cfg.enable_verify || r.image_similarity >= cfg.verify_threshold;
                if r.accepted != expect {
                    return fail(format!("round {}: rationale acceptance flag inconsistent", i + 1));
                }
            }
            total += round.llm_queries_this_round;
        }
        if total != self.total_llm_queries {
            return fail(format!(
                "total_llm_queries {} != sum of rounds {}",
                self.total_llm_queries, total
            ));
        }
        if self.converged {
            let n = self.rounds.len();
            if n < 2 || !answers_equal(&self.rounds[n - 1].answer, &self.rounds[n - 2].answer) {
                return fail("converged but the last two answers differ".into());
            }
        }
        if let Some(last) = self.rounds.last() {
            if self.failure.is_none() && last.answer != self.final_answer {
                return fail("final_answer differs from the last round's answer".into());
            }
        }
        Ok(())
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ipvr,
    Pica,
    Cot,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipvr" => Ok(Mode::Ipvr),
            "pica" => Ok(Mode::Pica),
            "cot" => Ok(Mode::Cot),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Direct,
    MultipleChoice,
}

/// Every tunable of one episode. Serialized keys follow the short names
/// (`n`, `k`, `mIter`, `thre`) used throughout the config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// In-context examples per prompt.
    #[serde(rename = "n")]
    pub num_examples: usize,
    /// Ensemble size: prompts issued per predict step.
    #[serde(rename = "k")]
    pub ensemble_size: usize,
    #[serde(rename = "mIter")]
    pub max_iterations: usize,
    /// Minimum image/rationale similarity for a rationale to be fed back.
    #[serde(rename = "thre")]
    pub verify_threshold: f64,
    pub bbox_expand: f64,
    pub mode: Mode,
    pub answer_format: AnswerFormat,
    pub enable_attend: bool,
    pub enable_rationale: bool,
    pub enable_verify: bool,
    #[serde(alias = "m")]
    pub caption_candidates: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            num_examples: 8,
            ensemble_size: 5,
            max_iterations: 5,
            verify_threshold: 0.0,
            bbox_expand: 1.5,
            mode: Mode::Ipvr,
            answer_format: AnswerFormat::Direct,
            enable_attend: true,
            enable_rationale: true,
            enable_verify: true,
            caption_candidates: 5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_examples < 1 {
            return bad("n must be >= 1");
        }
        if self.ensemble_size < 1 {
            return bad("k must be >= 1");
        }
        if self.max_iterations < 1 {
            return bad("mIter must be >= 1");
        }
        if !self.bbox_expand.is_finite() || self.bbox_expand < 1.0 {
            return bad("bbox_expand must be >= 1");
        }
        if self.caption_candidates < 1 {
            return bad("caption_candidates must be >= 1");
        }
        if !self.verify_threshold.is_finite() {
            return bad("thre must be finite");
        }
        if self.mode == Mode::Cot && !self.enable_rationale {
            return bad("cot mode always generates a rationale; enable_rationale cannot be false");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(canonical_json(&value).as_bytes())
    }

    /// Rounds an episode may run: baselines are single-pass.
    pub fn round_budget(&self) -> usize {
        match self.mode {
            Mode::Ipvr => self.max_iterations,
            Mode::Pica | Mode::Cot => 1,
        }
    }

    pub fn attend_active(&self) -> bool {
        self.mode == Mode::Ipvr && self.enable_attend
    }

    /// Whether the QA prompt asks for (and feeds back) rationales.
    pub fn rationale_active(&self) -> bool {
        match self.mode {
            Mode::Ipvr => self.enable_rationale,
            Mode::Cot => true,
            Mode::Pica => false,
        }
    }
}
