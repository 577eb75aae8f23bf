//! Scripted fixture corpus.
//!
//! A corpus spec (JSON) describes scenes, samples and scripted model
//! behavior for each scenario together with a hand-derived summary of the
//! trace the loop must produce. Building the corpus runs the real pipeline
//! against a [`ScriptedTransport`] and records every exchange as a
//! [`FixtureRecord`]. Each scenario is recorded under its own config
//! (strictly: any request the script cannot answer is a build error) and
//! under the base config with each ablation flag, so batch runs over the
//! corpus replay entirely from fixtures.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::fixture::{write_fixture_records, FixtureRecord, RecordingTransport};
use crate::backends::scripted::{HashedBowEmbedder, Script, ScriptedTransport};
use crate::backends::ModelClient;
use crate::datastore::traces::write_traces;
use crate::error::{Error, Result};
use crate::model::{normalize_answer, EpisodeConfig, ReasoningTrace, Sample, Stage};
use crate::evaluation::evaluate;
use crate::pipeline::run_episode;
use crate::prompting::{write_examples, ExamplePool, InContextExample, PromptMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub base_config: EpisodeConfig,
    pub pool: Vec<InContextExample>,
    /// Embedding overrides by exact text; other texts use the hashed
    /// bag-of-words embedder.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub scenarios: Vec<ScenarioSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSample {
    pub question: String,
    pub direct_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_rationales: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub sample: ScenarioSample,
    pub script: Script,
    /// Keys overriding the base config for this scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Map<String, Value>>,
    pub expected: ExpectedTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCheck {
    pub round: usize,
    pub text: String,
    /// Restrict the check to prompts of one kind; all prompts otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PromptMode>,
}

/// Hand-derived summary of an episode. Optional fields are only checked
/// when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedTrace {
    pub rounds: usize,
    pub converged: bool,
    pub total_llm_queries: usize,
    /// Normalized final answer.
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_caption: Option<String>,
    /// Candidate labels in scene order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attended: Option<Vec<Option<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regional_captions: Option<Vec<Option<String>>>,
    /// Normalized answer per round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_members: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_per_round: Option<Vec<usize>>,
    /// Acceptance flag per round; `null` for rounds without a rationale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_accepted: Option<Vec<Option<bool>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_contains: Vec<PromptCheck>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_excludes: Vec<PromptCheck>,
}

/// Differences between a trace and its expected summary; empty when the
/// trace matches.
pub fn check_expected(trace: &ReasoningTrace, expected: &ExpectedTrace) -> Vec<String> {
    let mut out = Vec::new();
    let mut eq = |field: &str, got: String, want: String| {
        if got != want {
            out.push(format!("{field}: got {got}, expected {want}"));
        }
    };
    let rounds = &trace.rounds;
    eq("rounds", rounds.len().to_string(), expected.rounds.to_string());
    eq("converged", trace.converged.to_string(), expected.converged.to_string());
    eq(
        "total_llm_queries",
        trace.total_llm_queries.to_string(),
        expected.total_llm_queries.to_string(),
    );
    eq(
        "final_answer",
        format!("{:?}", trace.final_answer.normalized_text),
        format!("{:?}", normalize_answer(&expected.final_answer)),
    );
    eq(
        "failure_stage",
        format!("{:?}", trace.failure.as_ref().map(|f| f.stage)),
        format!("{:?}", expected.failure_stage),
    );
    if let Some(want) = &expected.global_caption {
        let got = trace.scene.as_ref().map(|s| s.global_caption.clone());
        eq("global_caption", format!("{got:?}"), format!("{:?}", Some(want)));
    }
    if let Some(want) = &expected.candidates {
        let got: Option<Vec<String>> = trace
            .scene
            .as_ref()
            .map(|s| s.candidates.iter().map(|c| c.label.clone()).collect());
        eq("candidates", format!("{got:?}"), format!("{:?}", Some(want)));
    }
    if let Some(want) = &expected.attended {
        let got: Vec<Option<String>> = rounds
            .iter()
            .map(|r| r.attended_concept.as_ref().map(|c| c.label.clone()))
            .collect();
        eq("attended", format!("{got:?}"), format!("{want:?}"));
    }
    if let Some(want) = &expected.regional_captions {
        let got: Vec<Option<String>> = rounds.iter().map(|r| r.regional_caption.clone()).collect();
        eq("regional_captions", format!("{got:?}"), format!("{want:?}"));
    }
    if let Some(want) = &expected.answers {
        let got: Vec<String> = rounds.iter().map(|r| r.answer.normalized_text.clone()).collect();
        let want: Vec<String> = want.iter().map(|a| normalize_answer(a)).collect();
        eq("answers", format!("{got:?}"), format!("{want:?}"));
    }
    if let Some(want) = &expected.selected_members {
        let got: Vec<usize> = rounds.iter().map(|r| r.selected_member).collect();
        eq("selected_members", format!("{got:?}"), format!("{want:?}"));
    }
    if let Some(want) = &expected.queries_per_round {
        let got: Vec<usize> = rounds.iter().map(|r| r.llm_queries_this_round).collect();
        eq("queries_per_round", format!("{got:?}"), format!("{want:?}"));
    }
    if let Some(want) = &expected.rationale_accepted {
        let got: Vec<Option<bool>> = rounds
            .iter()
            .map(|r| r.rationale.as_ref().map(|x| x.accepted))
            .collect();
        eq("rationale_accepted", format!("{got:?}"), format!("{want:?}"));
    }
    let prompts_of = |check: &PromptCheck| {
        rounds
            .get(check.round.wrapping_sub(1))
            .map(|r| {
                r.prompts
                    .iter()
                    .filter(|p| check.mode.is_none_or(|m| p.mode == m))
                    .map(|p| p.text.as_str())
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default()
    };
    for check in &expected.prompt_contains {
        let prompts = prompts_of(check);
        if prompts.is_empty() || prompts.iter().any(|p| !p.contains(&check.text)) {
            out.push(format!("round {} prompts do not all contain {:?}", check.round, check.text));
        }
    }
    for check in &expected.prompt_excludes {
        if prompts_of(check).iter().any(|p| p.contains(&check.text)) {
            out.push(format!("a round {} prompt contains {:?}", check.round, check.text));
        }
    }
    out
}

/// One recorded run of a scenario under some config.
#[derive(Debug, Clone)]
pub struct RecordedVariant {
    pub name: String,
    pub config: EpisodeConfig,
    pub trace: ReasoningTrace,
    pub gaps: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FixtureScenario {
    pub scenario_id: String,
    pub description: String,
    pub sample: Sample,
    pub config: EpisodeConfig,
    pub records: Vec<FixtureRecord>,
    pub expected: ExpectedTrace,
    /// Trace recorded under the scenario's own config.
    pub trace: ReasoningTrace,
    pub variants: Vec<RecordedVariant>,
}

#[derive(Debug, Clone)]
pub struct FixtureCorpus {
    pub base_config: EpisodeConfig,
    /// Pool examples with their embeddings filled in.
    pub pool: Vec<InContextExample>,
    pub scenarios: Vec<FixtureScenario>,
}

pub const FIXTURES_FILE: &str = "fixtures.jsonl";
pub const POOL_FILE: &str = "pool.jsonl";
pub const DATASET_FILE: &str = "dataset.json";
pub const TRACES_FILE: &str = "expected_traces.jsonl";
pub const SCENARIOS_FILE: &str = "scenarios.json";
pub const RUN_CONFIG_FILE: &str = "run.json";

pub fn build_fixture_corpus(spec_path: &Path) -> Result<FixtureCorpus> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: CorpusSpec =
        serde_json::from_str(&text).map_err(|e| Error::data(spec_path, e.to_string()))?;
    build_from_spec(&spec)
}

fn merged_config(base: &EpisodeConfig, overrides: Option<&serde_json::Map<String, Value>>) -> Result<EpisodeConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let Some(o) = overrides {
        let obj = value.as_object_mut().expect("config is an object");
        for (k, v) in o {
            obj.insert(k.clone(), v.clone());
        }
    }
    let cfg: EpisodeConfig =
        serde_json::from_value(value).map_err(|e| Error::Corpus(format!("config override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn ablation_variants(base: &EpisodeConfig) -> Vec<(&'static str, EpisodeConfig)> {
    let mut out = vec![("base", base.clone())];
    let mut c = base.clone();
    c.enable_attend = false;
    out.push(("no_attend", c));
    let mut c = base.clone();
    c.enable_rationale = false;
    out.push(("no_rationale", c));
    let mut c = base.clone();
    c.enable_verify = false;
    out.push(("no_verify", c));
    out
}

pub fn build_from_spec(spec: &CorpusSpec) -> Result<FixtureCorpus> {
    spec.base_config.validate()?;
    if spec.scenarios.is_empty() {
        return Err(Error::Corpus("corpus has no scenarios".into()));
    }
    let embedder = HashedBowEmbedder::default();
    let mut pool = spec.pool.clone();
    for ex in &mut pool {
        if ex.embedding.is_none() {
            let text = ex.selection_text();
            let v = spec.embeddings.get(&text).cloned().unwrap_or_else(|| embedder.embed(&text));
            ex.embedding = Some(v);
        }
    }
    let embeddings = pool.iter().map(|e| e.embedding.clone().expect("filled")).collect();
    let example_pool = ExamplePool::new(pool.clone(), embeddings)?;

    let mut seen_ids = std::collections::HashSet::new();
    let mut scenarios = Vec::with_capacity(spec.scenarios.len());
    for sc in &spec.scenarios {
        if !seen_ids.insert(sc.id.as_str()) {
            return Err(Error::Corpus(format!("duplicate scenario id '{}'", sc.id)));
        }
        let config = merged_config(&spec.base_config, sc.config.as_ref())?;
        let sample = Sample {
            id: sc.id.clone(),
            image_ref: sc.script.image.image_ref.clone(),
            question: sc.sample.question.clone(),
            direct_answers: sc.sample.direct_answers.clone(),
            choices: sc.sample.choices.clone(),
            correct_choice_index: sc.sample.correct_choice_index,
            reference_rationales: sc.sample.reference_rationales.clone(),
        };
        sample
            .validate()
            .map_err(|e| Error::Corpus(format!("scenario '{}': {e}", sc.id)))?;

        let record = |cfg: &EpisodeConfig, lenient: bool| {
            let scripted = ScriptedTransport::new(sc.script.clone(), cfg.ensemble_size)
                .with_embeddings(spec.embeddings.clone())
                .lenient_rounds(lenient);
            let recorder = Arc::new(RecordingTransport::new(scripted));
            let client = ModelClient::new(recorder.clone());
            let trace = run_episode(&sample, &example_pool, cfg, &client);
            // Rationale similarity at evaluation time embeds through the
            // same fixtures.
            let eval = evaluate(std::slice::from_ref(&trace), std::slice::from_ref(&sample), Some(&client));
            let mut gaps = recorder.inner().gaps();
            if let Err(e) = eval {
                gaps.push(format!("evaluation: {e}"));
            }
            (trace, recorder.take_records(), gaps)
        };

        let (trace, mut records, gaps) = record(&config, false);
        if !gaps.is_empty() {
            return Err(Error::Corpus(format!(
                "scenario '{}' references undefined scripted responses: {}",
                sc.id,
                gaps.join("; ")
            )));
        }
        trace
            .validate()
            .map_err(|e| Error::Corpus(format!("scenario '{}': {e}", sc.id)))?;
        let mut variants = vec![RecordedVariant {
            name: "scenario".into(),
            config: config.clone(),
            trace: trace.clone(),
            gaps: Vec::new(),
        }];
        for (name, cfg) in ablation_variants(&spec.base_config) {
            if cfg == config {
                continue;
            }
            let (t, recs, gaps) = record(&cfg, true);
            records.extend(recs);
            variants.push(RecordedVariant {
                name: name.into(),
                config: cfg,
                trace: t,
                gaps,
            });
        }
        scenarios.push(FixtureScenario {
            scenario_id: sc.id.clone(),
            description: sc.description.clone(),
            sample,
            config,
            records: dedup_records(records, &sc.id)?,
            expected: sc.expected.clone(),
            trace,
            variants,
        });
    }
    let corpus = FixtureCorpus {
        base_config: spec.base_config.clone(),
        pool,
        scenarios,
    };
    corpus.all_records()?;
    Ok(corpus)
}

fn dedup_records(records: Vec<FixtureRecord>, context: &str) -> Result<Vec<FixtureRecord>> {
    let mut index: HashMap<String, Value> = HashMap::new();
    let mut out = Vec::new();
    for rec in records {
        match index.get(&rec.request_digest) {
            Some(existing) if *existing == rec.response => {}
            Some(_) => {
                return Err(Error::Corpus(format!(
                    "{context}: conflicting responses recorded for digest {}",
                    rec.request_digest
                )))
            }
            None => {
                index.insert(rec.request_digest.clone(), rec.response.clone());
                out.push(rec);
            }
        }
    }
    Ok(out)
}

impl FixtureCorpus {
    /// Records of every scenario, deduplicated; conflicts are errors.
    pub fn all_records(&self) -> Result<Vec<FixtureRecord>> {
        let all = self.scenarios.iter().flat_map(|s| s.records.iter().cloned()).collect();
        dedup_records(all, "corpus")
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.scenarios.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn traces(&self) -> Vec<ReasoningTrace> {
        self.scenarios.iter().map(|s| s.trace.clone()).collect()
    }

    pub fn example_pool(&self) -> Result<ExamplePool> {
        let embeddings = self
            .pool
            .iter()
            .map(|e| e.embedding.clone().ok_or_else(|| Error::Corpus(format!("example '{}' has no embedding", e.id))))
            .collect::<Result<Vec<_>>>()?;
        ExamplePool::new(self.pool.clone(), embeddings)
    }

    /// Dataset in the A-OKVQA record format; image ids are the scene
    /// image references.
    pub fn dataset_json(&self) -> Value {
        Value::Array(
            self.scenarios
                .iter()
                .map(|s| {
                    let mut rec = json!({
                        "question_id": s.sample.id,
                        "image_id": s.sample.image_ref,
                        "question": s.sample.question,
                        "direct_answers": s.sample.direct_answers,
                    });
                    let obj = rec.as_object_mut().expect("object");
                    if let Some(c) = &s.sample.choices {
                        obj.insert("choices".into(), json!(c));
                    }
                    if let Some(i) = s.sample.correct_choice_index {
                        obj.insert("correct_choice_idx".into(), json!(i));
                    }
                    if let Some(r) = &s.sample.reference_rationales {
                        obj.insert("rationales".into(), json!(r));
                    }
                    rec
                })
                .collect(),
        )
    }

    /// Run config replaying every capability from the corpus fixtures under
    /// the base episode config.
    pub fn run_config_json(&self) -> Value {
        let fx = json!({ "fixtures": FIXTURES_FILE });
        json!({
            "episode": self.base_config,
            "backends": {
                "detect": fx, "caption": fx, "complete": fx, "similarity": fx, "embed": fx
            },
            "dataset": {
                "format": "aokvqa",
                "path": DATASET_FILE,
                "split": "fixtures",
                "image_ref_template": "{image_id}"
            },
            "pool": POOL_FILE,
            "output": "traces.jsonl"
        })
    }

    /// Scenario ids, configs and expected summaries.
    pub fn scenarios_json(&self) -> Value {
        Value::Array(
            self.scenarios
                .iter()
                .map(|s| {
                    json!({
                        "id": s.scenario_id,
                        "description": s.description,
                        "config": s.config,
                        "expected": s.expected,
                    })
                })
                .collect(),
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_fixture_records(&dir.join(FIXTURES_FILE), &self.all_records()?)?;
        write_examples(&dir.join(POOL_FILE), &self.pool)?;
        write_traces(&dir.join(TRACES_FILE), &self.traces())?;
        let pretty = |name: &str, v: &Value| {
            let path = dir.join(name);
            let text = serde_json::to_string_pretty(v).expect("json serializes") + "\n";
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        pretty(DATASET_FILE, &self.dataset_json())?;
        pretty(SCENARIOS_FILE, &self.scenarios_json())?;
        pretty(RUN_CONFIG_FILE, &self.run_config_json())?;
        Ok(())
    }
}
