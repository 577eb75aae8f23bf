//! Few-shot prompt construction, in-context example selection, completion
//! parsing and ensemble selection.
//!
//! Every prompt is a header line followed by blocks separated by a line
//! holding `===`. Each block is a sequence of `Field: value` lines; the
//! final (test) block stops at the empty output slot. The exact grammar of
//! all four templates is described in `tests/golden/README.md` next to the
//! golden instantiations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{CompletionRequest, ModelClient};
use crate::error::{Error, Result};
use crate::model::{cosine_similarity, AnswerPrediction, Completion, Rationale, SceneContext};

pub const BLOCK_SEPARATOR: &str = "===";
pub const RATIONALE_MARKER: &str = "Rationale:";

const ATTEND_HEADER: &str = "Please select the object that is most related to answering the question.";
const QA_HEADER: &str = "Please answer the question according to the context.";
const QA_RATIONALE_HEADER: &str =
    "Please answer the question according to the context and explain the answer with a rationale.";
const PICA_HEADER: &str = "Please answer the question according to the above context.";
const COT_HEADER: &str = "Please answer the question according to the context, reasoning step by step before giving the answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    IpvrAttend,
    IpvrQa,
    Pica,
    Cot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub mode: PromptMode,
    pub example_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InContextExample {
    pub id: String,
    pub question: String,
    pub context_captions: Vec<String>,
    pub candidate_labels: Vec<String>,
    pub most_related_label: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    /// Precomputed selection embedding; computed at pool load when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl InContextExample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("example '{}': {m}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Invalid("example with empty id".into()));
        }
        if self.question.trim().is_empty() {
            return bad("empty question".into());
        }
        if !self.candidate_labels.contains(&self.most_related_label) {
            return bad(format!(
                "most_related_label '{}' is not a candidate label",
                self.most_related_label
            ));
        }
        Ok(())
    }

    /// Text embedded to rank this example against a query.
    pub fn selection_text(&self) -> String {
        selection_text(&self.question, self.context_captions.first().map(String::as_str))
    }
}

/// Question and global caption joined by one space.
pub fn selection_text(question: &str, global_caption: Option<&str>) -> String {
    match global_caption {
        Some(c) if !c.is_empty() => format!("{question} {c}"),
        _ => question.to_string(),
    }
}

/// Training examples with one selection embedding each, all of one
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePool {
    examples: Vec<InContextExample>,
    embeddings: Vec<Vec<f64>>,
}

impl ExamplePool {
    pub fn new(examples: Vec<InContextExample>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if examples.len() != embeddings.len() {
            return Err(Error::Invalid("one embedding per example required".into()));
        }
        if let Some(first) = embeddings.first() {
            if first.is_empty() || embeddings.iter().any(|e| e.len() != first.len()) {
                return Err(Error::Invalid("pool embeddings must share one non-zero dimension".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for ex in &examples {
            ex.validate()?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate example id '{}'", ex.id)));
            }
        }
        Ok(ExamplePool {
            examples,
            embeddings,
        })
    }

    /// Uses stored embeddings where present and embeds the rest.
    pub fn embed_with(examples: Vec<InContextExample>, client: &ModelClient) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(examples.len());
        for ex in &examples {
            match &ex.embedding {
                Some(v) => embeddings.push(v.clone()),
                None => embeddings.push(client.embed(&ex.selection_text())?.values),
            }
        }
        ExamplePool::new(examples, embeddings)
    }

    pub fn examples(&self) -> &[InContextExample] {
        &self.examples
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn read_examples(path: &Path) -> Result<Vec<InContextExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InContextExample = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        ex.validate()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[InContextExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", serde_json::to_string(ex).expect("examples serialize"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ranks similarities (descending, stable) and deals the top `n * k`
/// indices round-robin into `k` lists: rank `r` goes to list `r % k`.
pub fn partition_by_similarity(similarities: &[f64], n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || k == 0 {
        return Err(Error::Invalid("n and k must be >= 1".into()));
    }
    let need = n * k;
    if similarities.len() < need {
        return Err(Error::Invalid(format!(
            "example pool has {} entries, n*k = {need} required",
            similarities.len()
        )));
    }
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]));
    let mut lists = vec![Vec::with_capacity(n); k];
    for (rank, &idx) in order.iter().take(need).enumerate() {
        lists[rank % k].push(idx);
    }
    Ok(lists)
}

pub fn select_in_context(
    query_embedding: &[f64],
    pool: &ExamplePool,
    n: usize,
    k: usize,
) -> Result<Vec<Vec<InContextExample>>> {
    let sims = pool
        .embeddings
        .iter()
        .map(|e| cosine_similarity(query_embedding, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(partition_by_similarity(&sims, n, k)?
        .into_iter()
        .map(|list| list.into_iter().map(|i| pool.examples[i].clone()).collect())
        .collect())
}

/// The label whose embedding is closest to the answer's; ties keep the
/// earlier label.
pub fn label_closest_to_answer(labels: &[String], answer: &str, client: &ModelClient) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::Invalid("no candidate labels".into()));
    }
    if labels.len() == 1 {
        return Ok(labels[0].clone());
    }
    let target = client.embed(answer)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, label) in labels.iter().enumerate() {
        let sim = client.embed(label)?.cosine(&target)?;
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((i, sim));
        }
    }
    Ok(labels[best.expect("non-empty").0].clone())
}

fn sentence(caption: &str) -> String {
    let c = caption.trim();
    if c.ends_with(['.', '!', '?']) {
        c.to_string()
    } else {
        format!("{c}.")
    }
}

fn context_line<'a>(captions: impl IntoIterator<Item = &'a str>) -> String {
    let parts: Vec<String> = captions.into_iter().map(sentence).collect();
    format!("Context: {}\n", parts.join(" "))
}

fn scene_captions(scene: &SceneContext) -> Vec<&str> {
    std::iter::once(scene.global_caption.as_str())
        .chain(scene.attended.iter().map(|a| a.regional_caption.as_str()))
        .collect()
}

fn assemble(header: &str, blocks: &[String]) -> String {
    let mut text = format!("{header}\n");
    for block in blocks {
        text.push_str(BLOCK_SEPARATOR);
        text.push('\n');
        text.push_str(block);
    }
    text
}

fn ids(examples: &[InContextExample]) -> Vec<String> {
    examples.iter().map(|e| e.id.clone()).collect()
}

pub fn build_attend_prompt(
    examples: &[InContextExample],
    scene: &SceneContext,
    question: &str,
) -> Result<PromptText> {
    let remaining = scene.remaining_labels();
    if remaining.is_empty() {
        return Err(Error::Invalid("no un-attended candidates remain".into()));
    }
    let mut blocks: Vec<String> = examples
        .iter()
        .map(|ex| {
            format!(
                "{}Question: {}\nOptions: {}\nAnswer: {}\n",
                context_line(ex.context_captions.iter().map(String::as_str)),
                ex.question,
                ex.candidate_labels.join(", "),
                ex.most_related_label
            )
        })
        .collect();
    blocks.push(format!(
        "{}Question: {question}\nOptions: {}\nAnswer:",
        context_line(scene_captions(scene)),
        remaining.join(", ")
    ));
    Ok(PromptText {
        text: assemble(ATTEND_HEADER, &blocks),
        mode: PromptMode::IpvrAttend,
        example_ids: ids(examples),
    })
}

/// Inputs of one question-answering prompt.
#[derive(Debug, Clone, Copy)]
pub struct QaPromptInput<'a> {
    pub examples: &'a [InContextExample],
    pub scene: &'a SceneContext,
    /// Rationales of earlier rounds; only accepted ones are used.
    pub rationales: &'a [Rationale],
    pub question: &'a str,
    /// Present in multiple-choice format.
    pub choices: Option<&'a [String]>,
    /// Whether the ipvr template asks for a rationale.
    pub with_rationale: bool,
}

fn choices_line(choices: Option<&[String]>) -> String {
    match choices {
        Some(c) => format!("Choices: {}\n", c.join(", ")),
        None => String::new(),
    }
}

fn example_rationale(ex: &InContextExample, mode: PromptMode) -> Result<&str> {
    match ex.rationale.as_deref() {
        Some(r) if !r.trim().is_empty() => Ok(r.trim()),
        _ => Err(Error::Invalid(format!(
            "example '{}' has no rationale, required by the {mode:?} template",
            ex.id
        ))),
    }
}

pub fn build_qa_prompt(input: &QaPromptInput<'_>, mode: PromptMode) -> Result<PromptText> {
    let multiple_choice = input.choices.is_some();
    let ex_choices = |ex: &InContextExample| {
        if multiple_choice {
            choices_line(ex.choices.as_deref())
        } else {
            String::new()
        }
    };
    let (header, mut blocks) = match mode {
        PromptMode::IpvrAttend => {
            return Err(Error::Invalid("attend prompts are built by build_attend_prompt".into()))
        }
        PromptMode::IpvrQa => {
            let mut blocks = Vec::new();
            for ex in input.examples {
                let mut b = format!(
                    "{}Question: {}\n{}Answer: {}\n",
                    context_line(ex.context_captions.iter().map(String::as_str)),
                    ex.question,
                    ex_choices(ex),
                    ex.answer
                );
                if input.with_rationale {
                    b.push_str(&format!("{RATIONALE_MARKER} {}\n", example_rationale(ex, mode)?));
                }
                blocks.push(b);
            }
            let header = if input.with_rationale { QA_RATIONALE_HEADER } else { QA_HEADER };
            (header, blocks)
        }
        PromptMode::Pica => {
            let blocks = input
                .examples
                .iter()
                .map(|ex| {
                    format!(
                        "{}Tags: {}\nQuestion: {}\n{}Answer: {}\n",
                        context_line(ex.context_captions.iter().map(String::as_str)),
                        ex.candidate_labels.join(", "),
                        ex.question,
                        ex_choices(ex),
                        ex.answer
                    )
                })
                .collect();
            (PICA_HEADER, blocks)
        }
        PromptMode::Cot => {
            let mut blocks = Vec::new();
            for ex in input.examples {
                blocks.push(format!(
                    "{}Tags: {}\nQuestion: {}\n{}{RATIONALE_MARKER} {}\nAnswer: {}\n",
                    context_line(ex.context_captions.iter().map(String::as_str)),
                    ex.candidate_labels.join(", "),
                    ex.question,
                    ex_choices(ex),
                    example_rationale(ex, mode)?,
                    ex.answer
                ));
            }
            (COT_HEADER, blocks)
        }
    };

    let scene = input.scene;
    let test = match mode {
        PromptMode::IpvrQa => {
            let evidence: Vec<&str> = input
                .rationales
                .iter()
                .filter(|r| r.accepted)
                .map(|r| r.text.as_str())
                .collect();
            let evidence = if evidence.is_empty() {
                String::new()
            } else {
                format!("Evidence: {}\n", evidence.join(" "))
            };
            format!(
                "{}{evidence}Question: {}\n{}Answer:",
                context_line(scene_captions(scene)),
                input.question,
                choices_line(input.choices)
            )
        }
        PromptMode::Pica | PromptMode::Cot => {
            let slot = if mode == PromptMode::Cot { RATIONALE_MARKER } else { "Answer:" };
            format!(
                "{}Tags: {}\nQuestion: {}\n{}{slot}",
                context_line([scene.global_caption.as_str()]),
                scene.candidate_labels().join(", "),
                input.question,
                choices_line(input.choices)
            )
        }
        PromptMode::IpvrAttend => unreachable!(),
    };
    blocks.push(test);
    Ok(PromptText {
        text: assemble(header, &blocks),
        mode,
        example_ids: ids(input.examples),
    })
}

/// Completion request for a question-answering prompt of the given mode.
pub fn qa_request(prompt: &PromptText, with_rationale: bool) -> CompletionRequest {
    let rationale_stop = prompt.mode == PromptMode::Cot
        || (prompt.mode == PromptMode::IpvrQa && with_rationale);
    if rationale_stop {
        CompletionRequest::new(prompt.text.clone(), 96, vec![BLOCK_SEPARATOR.to_string()])
    } else {
        CompletionRequest::new(prompt.text.clone(), 16, vec!["\n".to_string()])
    }
}

/// Answer and rationale spans of one completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCompletion {
    pub answer: AnswerPrediction,
    pub rationale: Option<String>,
}

/// Trimmed sub-slice of `text[start..end]` with its byte range.
fn trimmed_span(text: &str, start: usize, end: usize) -> (usize, usize) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead == slice.len() {
        (start, start)
    } else {
        (start + lead, end - trail)
    }
}

fn line_end(text: &str, from: usize) -> usize {
    text[from..].find('\n').map_or(text.len(), |i| from + i)
}

fn locate_after(text: &str, marker: &str) -> Option<usize> {
    text.find(marker).map(|i| i + marker.len())
}

/// Splits a question-answering completion into its answer and rationale.
/// The answer score is the mean log-probability of the tokens overlapping
/// the answer span; an empty answer keeps score 0 and is discarded by
/// [`ensemble_select`].
pub fn parse_qa_completion(mode: PromptMode, completion: &Completion) -> ParsedCompletion {
    let text = completion.text.as_str();
    let (answer_span, rationale_span) = match mode {
        PromptMode::Cot => {
            let r_end = line_end(text, 0);
            let r = trimmed_span(text, 0, r_end);
            let a = match locate_after(&text[r_end..], "Answer:") {
                Some(off) => {
                    let start = r_end + off;
                    trimmed_span(text, start, line_end(text, start))
                }
                None => (text.len(), text.len()),
            };
            (a, Some(r))
        }
        _ => {
            let a_end = line_end(text, 0);
            let a = trimmed_span(text, 0, a_end);
            let r = locate_after(&text[a_end..], RATIONALE_MARKER).map(|off| {
                let start = a_end + off;
                trimmed_span(text, start, line_end(text, start))
            });
            (a, r)
        }
    };
    let raw = &text[answer_span.0..answer_span.1];
    let score = if raw.is_empty() {
        0.0
    } else {
        completion
            .span_mean_logprob(answer_span.0, answer_span.1)
            .unwrap_or(0.0)
    };
    let rationale = rationale_span
        .map(|(s, e)| text[s..e].to_string())
        .filter(|r| !r.is_empty());
    ParsedCompletion {
        answer: AnswerPrediction::new(raw, score),
        rationale,
    }
}

/// Index of the winning ensemble member: highest score, then the
/// lexicographically smaller normalized answer, then the lower index.
/// Members with an empty normalized answer never win.
pub fn ensemble_select(members: &[AnswerPrediction]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in members.iter().enumerate() {
        if m.normalized_text.is_empty() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &members[b];
                m.score > cur.score
                    || (m.score == cur.score && m.normalized_text < cur.normalized_text)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
