#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use interprompt::backends::fixture::FixtureTransport;
use interprompt::backends::ModelClient;
use interprompt::datastore::corpus::{ExpectedTrace, FIXTURES_FILE, POOL_FILE, SCENARIOS_FILE, TRACES_FILE};
use interprompt::datastore::datasets::{load_aokvqa, ImageRefPattern};
use interprompt::datastore::traces::read_traces;
use interprompt::model::{EpisodeConfig, ReasoningTrace, Sample};
use interprompt::prompting::{read_examples, ExamplePool};
use serde::Deserialize;

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus")
}

pub fn corpus_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus_spec.json")
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScenarioEntry {
    pub id: String,
    pub description: String,
    pub config: EpisodeConfig,
    pub expected: ExpectedTrace,
}

/// The committed corpus, read back from disk.
pub struct Corpus {
    pub scenarios: Vec<ScenarioEntry>,
    pub samples: Vec<Sample>,
    pub traces: Vec<ReasoningTrace>,
    pub trace_lines: Vec<String>,
}

impl Corpus {
    pub fn load() -> Corpus {
        let dir = corpus_dir();
        let scenarios: Vec<ScenarioEntry> =
            serde_json::from_str(&fs::read_to_string(dir.join(SCENARIOS_FILE)).unwrap()).unwrap();
        let samples = load_aokvqa(&dir.join("dataset.json"), &ImageRefPattern::new("{image_id}", "fixtures")).unwrap();
        let traces = read_traces(&dir.join(TRACES_FILE)).unwrap();
        let trace_lines = fs::read_to_string(dir.join(TRACES_FILE))
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        Corpus {
            scenarios,
            samples,
            traces,
            trace_lines,
        }
    }

    pub fn scenario(&self, id: &str) -> (&ScenarioEntry, &Sample, &ReasoningTrace) {
        let i = self.scenarios.iter().position(|s| s.id == id).expect("scenario id");
        (&self.scenarios[i], &self.samples[i], &self.traces[i])
    }
}

/// Strict replay client over the corpus fixtures.
pub fn fixture_client() -> ModelClient {
    ModelClient::new(Arc::new(FixtureTransport::load(&corpus_dir().join(FIXTURES_FILE)).unwrap()))
}

pub fn corpus_pool(client: &ModelClient) -> ExamplePool {
    ExamplePool::embed_with(read_examples(&corpus_dir().join(POOL_FILE)).unwrap(), client).unwrap()
}

/// A copy of the corpus run config in `dir` with absolute paths, optional
/// extra top-level keys merged in.
pub fn write_run_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let corpus = corpus_dir();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(corpus.join("run.json")).unwrap()).unwrap();
    let abs = |name: &str| serde_json::Value::String(corpus.join(name).to_string_lossy().into_owned());
    for cap in ["detect", "caption", "complete", "similarity", "embed"] {
        cfg["backends"][cap]["fixtures"] = abs(FIXTURES_FILE);
    }
    cfg["dataset"]["path"] = abs("dataset.json");
    cfg["pool"] = abs(POOL_FILE);
    cfg["output"] = serde_json::Value::String(dir.join("traces.jsonl").to_string_lossy().into_owned());
    if let serde_json::Value::Object(m) = extra {
        for (k, v) in m {
            cfg[k] = v;
        }
    }
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
pub mod random;

pub fn spec() -> interprompt::datastore::corpus::CorpusSpec {
    serde_json::from_str(&fs::read_to_string(corpus_spec()).unwrap()).unwrap()
}

pub fn spec_scenario(id: &str) -> interprompt::datastore::corpus::ScenarioSpec {
    spec().scenarios.into_iter().find(|s| s.id == id).expect("scenario id")
}

/// Scripted client over one spec scenario, strict about unscripted calls.
pub fn scripted_client(id: &str, k: usize) -> ModelClient {
    let spec = spec();
    let sc = spec.scenarios.into_iter().find(|s| s.id == id).expect("scenario id");
    ModelClient::new(Arc::new(
        interprompt::backends::scripted::ScriptedTransport::new(sc.script, k).with_embeddings(spec.embeddings),
    ))
}
