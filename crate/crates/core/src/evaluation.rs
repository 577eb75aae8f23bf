//! Answer accuracy, rationale quality and query-cost metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backends::ModelClient;
use crate::error::{Error, Result};
use crate::model::{normalize_answer, AnswerFormat, ReasoningTrace, Sample};

pub const ANNOTATORS: usize = 10;

/// Repeats or truncates annotator answers to exactly ten entries. Shorter
/// lists are replicated cyclically in their original order.
pub fn pad_answers(answers: &[String]) -> Vec<String> {
    answers.iter().cycle().take(ANNOTATORS).cloned().collect()
}

/// Leave-one-out VQA accuracy: the mean over the ten 9-annotator subsets
/// of `min(matches / 3, 1)`, after normalizing every string.
pub fn vqa_soft_accuracy(pred: &str, annotator_answers: &[String]) -> Result<f64> {
    if annotator_answers.is_empty() {
        return Err(Error::Invalid("no annotator answers".into()));
    }
    let pred = normalize_answer(pred);
    let hits: Vec<bool> = pad_answers(annotator_answers)
        .iter()
        .map(|a| normalize_answer(a) == pred)
        .collect();
    let matches = hits.iter().filter(|h| **h).count();
    let capped: usize = hits
        .iter()
        .map(|&h| (matches - usize::from(h)).min(3))
        .sum();
    Ok(capped as f64 / (3 * ANNOTATORS) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuOptions {
    pub max_n: usize,
    pub lowercase: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: 4,
            lowercase: false,
        }
    }
}

/// Sufficient statistics of BLEU over one or more segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        BleuStats {
            hyp_len: 0,
            ref_len: 0,
            matches: vec![0; max_n],
            totals: vec![0; max_n],
        }
    }

    fn add(&mut self, other: &BleuStats) {
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
    }

    /// Geometric mean of modified precisions times the brevity penalty.
    /// A zero precision at any order gives 0 (no smoothing).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (m, t) in self.matches.iter().zip(&self.totals) {
            if *m == 0 || *t == 0 {
                return 0.0;
            }
            log_sum += (*m as f64 / *t as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / self.matches.len() as f64).exp()
    }
}

fn tokens(s: &str, lowercase: bool) -> Vec<String> {
    let s = if lowercase { s.to_lowercase() } else { s.to_string() };
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-segment statistics: closest reference length (ties to the shorter)
/// and n-gram matches clipped by the maximum count in any reference.
pub fn bleu_stats(candidate: &str, references: &[String], opts: BleuOptions) -> Result<BleuStats> {
    if opts.max_n < 1 {
        return Err(Error::Invalid("max_n must be >= 1".into()));
    }
    if references.is_empty() {
        return Err(Error::Invalid("no references".into()));
    }
    let hyp = tokens(candidate, opts.lowercase);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r, opts.lowercase)).collect();
    let mut stats = BleuStats::new(opts.max_n);
    stats.hyp_len = hyp.len();
    stats.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
        .expect("non-empty references");
    for n in 1..=opts.max_n {
        let hyp_counts = ngram_counts(&hyp, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        stats.matches[n - 1] = hyp_counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(stats)
}

pub fn bleu(candidate: &str, references: &[String], max_n: usize) -> Result<f64> {
    bleu_with(
        candidate,
        references,
        BleuOptions {
            max_n,
            lowercase: false,
        },
    )
}

pub fn bleu_with(candidate: &str, references: &[String], opts: BleuOptions) -> Result<f64> {
    if candidate.trim().is_empty() {
        return Err(Error::Invalid("empty candidate".into()));
    }
    Ok(bleu_stats(candidate, references, opts)?.score())
}

/// Statistics summed over all segments before scoring, as a corpus-level
/// scorer does.
pub fn corpus_bleu(segments: &[(String, Vec<String>)], opts: BleuOptions) -> Result<f64> {
    let mut total = BleuStats::new(opts.max_n);
    for (cand, refs) in segments {
        total.add(&bleu_stats(cand, refs, opts)?);
    }
    Ok(total.score())
}

/// Mean cosine similarity between the candidate and each reference
/// embedding.
pub fn rationale_similarity(candidate: &str, references: &[String], client: &ModelClient) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Invalid("no reference rationales".into()));
    }
    let c = client.embed(candidate)?;
    let mut sum = 0.0;
    for r in references {
        sum += client.embed(r)?.cosine(&c)?;
    }
    Ok(sum / references.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryAccounting {
    pub mean_rounds: f64,
    pub mean_queries: f64,
}

pub fn query_accounting(traces: &[ReasoningTrace]) -> Result<QueryAccounting> {
    if traces.is_empty() {
        return Err(Error::Invalid("no traces".into()));
    }
    let n = traces.len() as f64;
    Ok(QueryAccounting {
        mean_rounds: traces.iter().map(|t| t.rounds.len()).sum::<usize>() as f64 / n,
        mean_queries: traces.iter().map(|t| t.total_llm_queries).sum::<usize>() as f64 / n,
    })
}

/// Queries per episode implied by a mean round count when every round
/// issues `ensemble_size` predictions plus one attend query.
pub fn expected_mean_queries(mean_rounds: f64, ensemble_size: usize, attend: bool) -> f64 {
    mean_rounds * (ensemble_size + usize::from(attend)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_similarity: Option<f64>,
    pub rounds: usize,
    pub queries: usize,
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub num_samples: usize,
    pub num_failed: usize,
    pub mean_accuracy: f64,
    pub mean_rounds: f64,
    pub mean_queries: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rationale_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub aggregates: EvalAggregates,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Aggregates from per-sample records. `corpus_bleu` needs segment
    /// statistics and is passed in.
    pub fn from_samples(samples: Vec<SampleEval>, corpus_bleu: Option<f64>) -> Self {
        let aggregates = EvalAggregates {
            num_samples: samples.len(),
            num_failed: samples.iter().filter(|s| s.failed).count(),
            mean_accuracy: mean(samples.iter().map(|s| s.accuracy)).unwrap_or(0.0),
            mean_rounds: mean(samples.iter().map(|s| s.rounds as f64)).unwrap_or(0.0),
            mean_queries: mean(samples.iter().map(|s| s.queries as f64)).unwrap_or(0.0),
            corpus_bleu,
            mean_rationale_similarity: mean(samples.iter().filter_map(|s| s.rationale_similarity)),
        };
        EvalReport { samples, aggregates }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>7} {:>7}", "sample", "acc", "bleu", "ratsim", "rounds", "queries").unwrap();
        for s in &self.samples {
            let id = if s.failed { format!("{} (failed)", s.sample_id) } else { s.sample_id.clone() };
            writeln!(
                out,
                "{:<24} {:>8.4} {:>8} {:>8} {:>7} {:>7}",
                id,
                s.accuracy,
                opt(s.bleu),
                opt(s.rationale_similarity),
                s.rounds,
                s.queries
            )
            .unwrap();
        }
        let a = &self.aggregates;
        writeln!(out, "samples: {}  failed: {}", a.num_samples, a.num_failed).unwrap();
        writeln!(out, "mean accuracy: {:.4}", a.mean_accuracy).unwrap();
        writeln!(out, "mean rounds: {:.4}", a.mean_rounds).unwrap();
        writeln!(out, "mean queries: {:.4}", a.mean_queries).unwrap();
        writeln!(out, "corpus bleu: {}", opt(a.corpus_bleu)).unwrap();
        writeln!(out, "mean rationale similarity: {}", opt(a.mean_rationale_similarity)).unwrap();
        out
    }
}

fn final_rationale(trace: &ReasoningTrace) -> Option<&str> {
    trace
        .rounds
        .iter()
        .rev()
        .find_map(|r| r.rationale.as_ref())
        .map(|r| r.text.as_str())
}

/// Scores traces against their dataset samples. Multiple-choice traces are
/// scored by exact match with the correct choice; direct answers use soft
/// accuracy. Rationale similarity needs an embedding client.
pub fn evaluate(
    traces: &[ReasoningTrace],
    dataset: &[Sample],
    embed: Option<&ModelClient>,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Sample> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    let opts = BleuOptions::default();
    let mut samples = Vec::with_capacity(traces.len());
    let mut segments = Vec::new();
    for trace in traces {
        let Some(sample) = by_id.get(trace.sample_id.as_str()) else {
            return Err(Error::Mismatch(format!(
                "trace sample '{}' is not in the dataset",
                trace.sample_id
            )));
        };
        let pred = &trace.final_answer.normalized_text;
        let accuracy = match (trace.config.answer_format, &sample.choices, sample.correct_choice_index) {
            (AnswerFormat::MultipleChoice, Some(choices), Some(i)) => {
                f64::from(u8::from(normalize_answer(&choices[i]) == *pred))
            }
            _ if sample.direct_answers.is_empty() => 0.0,
            _ => vqa_soft_accuracy(pred, &sample.direct_answers)?,
        };
        let refs = sample.reference_rationales.as_ref().filter(|r| !r.is_empty());
        let cand = final_rationale(trace).filter(|c| !c.trim().is_empty());
        let (bleu_score, sim) = match (cand, refs) {
            (Some(c), Some(refs)) => {
                segments.push((c.to_string(), refs.clone()));
                let sim = match embed {
                    Some(client) => Some(rationale_similarity(c, refs, client)?),
                    None => None,
                };
                (Some(bleu_with(c, refs, opts)?), sim)
            }
            _ => (None, None),
        };
        samples.push(SampleEval {
            sample_id: trace.sample_id.clone(),
            accuracy,
            bleu: bleu_score,
            rationale_similarity: sim,
            rounds: trace.rounds.len(),
            queries: trace.total_llm_queries,
            failed: trace.failed(),
        });
    }
    let corpus = if segments.is_empty() {
        None
    } else {
        Some(corpus_bleu(&segments, opts)?)
    };
    Ok(EvalReport::from_samples(samples, corpus))
}
