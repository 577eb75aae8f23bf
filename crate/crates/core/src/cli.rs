//! Command-line front end: `run`, `eval`, `trace`, `fixtures build` and
//! `cache stats`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backends::fixture::FixtureTransport;
use crate::backends::http::HttpTransport;
use crate::backends::{CachedTransport, Capability, CountingTransport, ModelClient, RoutedTransport, Transport};
use crate::datastore::cache::ResponseCache;
use crate::datastore::corpus::{build_fixture_corpus, check_expected};
use crate::datastore::datasets::{load_aokvqa, load_okvqa, ImageRefPattern};
use crate::datastore::traces::{append_traces, read_traces, write_traces};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model::{EpisodeConfig, Mode, ReasoningTrace, Sample};
use crate::pipeline::run_batch;
use crate::prompting::{parse_qa_completion, read_examples, ExamplePool, PromptMode};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub detect: Option<BackendSpec>,
    pub caption: Option<BackendSpec>,
    pub complete: Option<BackendSpec>,
    pub similarity: Option<BackendSpec>,
    pub embed: Option<BackendSpec>,
    /// Environment variable holding a bearer token for HTTP endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token_env: Option<String>,
}

impl BackendsConfig {
    pub fn get(&self, cap: Capability) -> Option<&BackendSpec> {
        match cap {
            Capability::Detect => self.detect.as_ref(),
            Capability::Caption => self.caption.as_ref(),
            Capability::Complete => self.complete.as_ref(),
            Capability::Similarity => self.similarity.as_ref(),
            Capability::Embed => self.embed.as_ref(),
        }
    }

    fn get_mut(&mut self, cap: Capability) -> Option<&mut BackendSpec> {
        match cap {
            Capability::Detect => self.detect.as_mut(),
            Capability::Caption => self.caption.as_mut(),
            Capability::Complete => self.complete.as_mut(),
            Capability::Similarity => self.similarity.as_mut(),
            Capability::Embed => self.embed.as_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Aokvqa,
    Okvqa,
}

fn default_split() -> String {
    "val".into()
}

fn default_template() -> String {
    ImageRefPattern::default().template
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// A-OKVQA records, or the OK-VQA questions file.
    pub path: PathBuf,
    /// OK-VQA annotations file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_template")]
    pub image_ref_template: String,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<Sample>> {
        let pattern = ImageRefPattern::new(self.image_ref_template.clone(), self.split.clone());
        match self.format {
            DatasetFormat::Aokvqa => load_aokvqa(&self.path, &pattern),
            DatasetFormat::Okvqa => {
                let ann = self
                    .annotations
                    .as_ref()
                    .ok_or_else(|| Error::Config("okvqa dataset needs an annotations path".into()))?;
                load_okvqa(&self.path, ann, &pattern)
            }
        }
    }
}

/// The JSON run configuration. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub episode: EpisodeConfig,
    pub backends: BackendsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    /// In-context example pool (JSONL).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for cap in Capability::ALL {
            if let Some(fx) = cfg.backends.get_mut(cap).and_then(|s| s.fixtures.as_mut()) {
                resolve(base, fx);
            }
        }
        if let Some(d) = cfg.dataset.as_mut() {
            resolve(base, &mut d.path);
            if let Some(a) = d.annotations.as_mut() {
                resolve(base, a);
            }
        }
        for p in [&mut cfg.pool, &mut cfg.output, &mut cfg.cache_dir].into_iter().flatten() {
            resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for cap in Capability::ALL {
            match self.backends.get(cap) {
                None => return Err(Error::Config(format!("no backend configured for '{cap}'"))),
                Some(BackendSpec {
                    endpoint: Some(_),
                    fixtures: Some(_),
                }) => {
                    return Err(Error::Config(format!(
                        "backend '{cap}' names both an endpoint and a fixture file"
                    )))
                }
                Some(BackendSpec {
                    endpoint: None,
                    fixtures: None,
                }) => {
                    return Err(Error::Config(format!(
                        "backend '{cap}' needs an endpoint or a fixture file"
                    )))
                }
                Some(_) => {}
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.episode.validate()
    }
}

/// A client over the configured backends, with a counter of every call
/// that reaches a backend (cache hits are not counted).
pub struct BackendStack {
    pub client: ModelClient,
    pub counter: Arc<CountingTransport<RoutedTransport>>,
}

pub fn build_backends(cfg: &RunConfigFile) -> Result<BackendStack> {
    let token = match &cfg.backends.bearer_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            Error::Config(format!("bearer token variable {var} is not set"))
        })?),
        None => None,
    };
    let mut fixtures: HashMap<PathBuf, Arc<dyn Transport>> = HashMap::new();
    let mut http: HashMap<String, Arc<dyn Transport>> = HashMap::new();
    let mut routes: Vec<Arc<dyn Transport>> = Vec::new();
    for cap in Capability::ALL {
        let spec = cfg.backends.get(cap).expect("validated");
        let t = match (&spec.endpoint, &spec.fixtures) {
            (Some(url), None) => http
                .entry(url.clone())
                .or_insert_with(|| Arc::new(HttpTransport::new(url.clone()).with_bearer_token(token.clone())))
                .clone(),
            (None, Some(path)) => match fixtures.get(path) {
                Some(t) => t.clone(),
                None => {
                    let t: Arc<dyn Transport> = Arc::new(FixtureTransport::load(path)?);
                    fixtures.insert(path.clone(), t.clone());
                    t
                }
            },
            _ => unreachable!("validated"),
        };
        routes.push(t);
    }
    let [detect, caption, complete, similarity, embed]: [Arc<dyn Transport>; 5] =
        routes.try_into().map_err(|_| Error::Config("five capabilities".into()))?;
    let counter = Arc::new(CountingTransport::new(RoutedTransport::new(
        detect, caption, complete, similarity, embed,
    )));
    let client = match &cfg.cache_dir {
        Some(dir) => ModelClient::new(Arc::new(CachedTransport::new(counter.clone(), ResponseCache::open(dir)?))),
        None => ModelClient::new(counter.clone()),
    };
    Ok(BackendStack { client, counter })
}

#[derive(Debug, Parser)]
#[command(name = "interprompt", version, about = "Interactive prompting engine for knowledge-based VQA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run episodes over a dataset and write traces.
    Run(RunArgs),
    /// Score traces against a dataset.
    Eval(EvalArgs),
    /// Print one trace step by step.
    Trace(TraceArgs),
    /// Fixture corpus tools.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
    /// Response cache tools.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Trace output path; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prompting mode: ipvr, pica or cot.
    #[arg(long)]
    pub mode: Option<String>,
    /// Skip the attend and describe stages; prompts keep the global caption only.
    #[arg(long)]
    pub no_attend: bool,
    /// Ask for answers only.
    #[arg(long)]
    pub no_rationale: bool,
    /// Feed every rationale back without checking it against the image.
    #[arg(long)]
    pub no_verify: bool,
    /// Ensemble size.
    #[arg(long = "k")]
    pub k: Option<usize>,
    /// In-context examples per prompt.
    #[arg(long = "n")]
    pub n: Option<usize>,
    /// Maximum number of rounds.
    #[arg(long = "miter")]
    pub miter: Option<usize>,
    /// Minimum image similarity for a rationale to be accepted.
    #[arg(long = "thre", allow_negative_numbers = true)]
    pub thre: Option<f64>,
    /// Episodes run in parallel.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip samples already present in the output file.
    #[arg(long)]
    pub resume: bool,
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut EpisodeConfig) -> Result<()> {
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>()?;
        }
        if self.no_attend {
            cfg.enable_attend = false;
        }
        if self.no_rationale {
            cfg.enable_rationale = false;
        }
        if self.no_verify {
            cfg.enable_verify = false;
        }
        if let Some(k) = self.k {
            cfg.ensemble_size = k;
        }
        if let Some(n) = self.n {
            cfg.num_examples = n;
        }
        if let Some(m) = self.miter {
            cfg.max_iterations = m;
        }
        if let Some(t) = self.thre {
            cfg.verify_threshold = t;
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    /// Dataset and embedding backend come from this run config.
    #[arg(long, conflicts_with_all = ["dataset", "format"])]
    pub config: Option<PathBuf>,
    /// Dataset file (A-OKVQA records or OK-VQA questions).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "aokvqa")]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub sample: String,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Record a fixture corpus from its scenario spec.
    Build {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
    pub unreachable: usize,
    pub backend_calls: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.written > 0 && self.unreachable == self.written {
            3
        } else {
            0
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary> {
    let mut cfg = RunConfigFile::load(&args.config)?;
    args.apply(&mut cfg.episode)?;
    let output = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("no output path (config 'output' or --out)".into()))?;
    let dataset = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset configured".into()))?;
    let samples = dataset.load()?;

    let mut done: HashSet<String> = HashSet::new();
    if args.resume && output.exists() {
        done = read_traces(&output)?.into_iter().map(|t| t.sample_id).collect();
    } else {
        write_traces(&output, &[])?;
    }
    let todo: Vec<Sample> = samples.into_iter().filter(|s| !done.contains(&s.id)).collect();
    let mut summary = RunSummary {
        output: output.clone(),
        written: 0,
        skipped: done.len(),
        failed: 0,
        unreachable: 0,
        backend_calls: 0,
    };
    if todo.is_empty() {
        return Ok(summary);
    }

    let pool_path = cfg
        .pool
        .as_ref()
        .ok_or_else(|| Error::Config("no example pool configured".into()))?;
    let stack = build_backends(&cfg)?;
    let pool = ExamplePool::embed_with(read_examples(pool_path)?, &stack.client)?;
    let workers = args.workers.or(cfg.workers).unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    run_batch(&todo, &pool, &cfg.episode, &stack.client, workers, |trace| {
        summary.written += 1;
        if let Some(f) = &trace.failure {
            summary.failed += 1;
            if f.unreachable {
                summary.unreachable += 1;
            }
        }
        append_traces(&output, std::slice::from_ref(&trace))
    })?;
    summary.backend_calls = stack.counter.total();
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let traces = read_traces(&args.traces)?;
    let (samples, embed) = match &args.config {
        Some(path) => {
            let cfg = RunConfigFile::load(path)?;
            let samples = cfg
                .dataset
                .as_ref()
                .ok_or_else(|| Error::Config("no dataset configured".into()))?
                .load()?;
            (samples, Some(build_backends(&cfg)?.client))
        }
        None => {
            let path = args
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("eval needs --config or --dataset".into()))?;
            let ds = DatasetConfig {
                format: args.format.unwrap_or(DatasetFormat::Aokvqa),
                path,
                annotations: args.annotations.clone(),
                split: default_split(),
                image_ref_template: default_template(),
            };
            (ds.load()?, None)
        }
    };
    let report = evaluate(&traces, &samples, embed.as_ref())?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        fs::write(out, text).map_err(|e| Error::io(out, e))?;
    }
    Ok(report)
}

fn qa_mode_of(mode: Mode) -> PromptMode {
    match mode {
        Mode::Ipvr => PromptMode::IpvrQa,
        Mode::Pica => PromptMode::Pica,
        Mode::Cot => PromptMode::Cot,
    }
}

/// Step listing of one trace: scene, then per round the attended concept,
/// its caption, the ensemble, the chosen answer and the verified rationale.
pub fn render_trace(trace: &ReasoningTrace) -> String {
    let mut out = String::new();
    let c = &trace.config;
    writeln!(out, "sample: {}", trace.sample_id).unwrap();
    writeln!(
        out,
        "config: {} (mode {:?}, n={}, k={}, mIter={}, thre={})",
        &trace.config_digest[..12.min(trace.config_digest.len())],
        c.mode,
        c.num_examples,
        c.ensemble_size,
        c.max_iterations,
        c.verify_threshold
    )
    .unwrap();
    if let Some(scene) = &trace.scene {
        writeln!(out, "image: {}", scene.image_ref).unwrap();
        writeln!(out, "global caption: {}", scene.global_caption).unwrap();
        let cands: Vec<String> = scene
            .candidates
            .iter()
            .map(|c| format!("{} ({:.2})", c.label, c.score))
            .collect();
        writeln!(out, "candidates: {}", if cands.is_empty() { "none".into() } else { cands.join(", ") }).unwrap();
    }
    let mode = qa_mode_of(c.mode);
    for r in &trace.rounds {
        writeln!(out, "round {}", r.round_index).unwrap();
        match &r.attended_concept {
            Some(a) => writeln!(out, "  attend: {} {}", a.label, a.bbox).unwrap(),
            None => writeln!(out, "  attend: -").unwrap(),
        }
        if let Some(cap) = &r.regional_caption {
            writeln!(out, "  regional caption: {cap}").unwrap();
        }
        writeln!(out, "  ensemble:").unwrap();
        for (i, comp) in r.ensemble.iter().enumerate() {
            let p = parse_qa_completion(mode, comp);
            let mark = if i == r.selected_member { " *" } else { "" };
            writeln!(out, "    [{i}] {:?} {:.4}{mark}", p.answer.raw_text, p.answer.score).unwrap();
        }
        writeln!(out, "  answer: {} ({:.4})", r.answer.normalized_text, r.answer.score).unwrap();
        match &r.rationale {
            Some(rat) => writeln!(
                out,
                "  rationale: {} (similarity {:.4}, {})",
                rat.text,
                rat.image_similarity,
                if rat.accepted { "accepted" } else { "rejected" }
            )
            .unwrap(),
            None => writeln!(out, "  rationale: -").unwrap(),
        }
        writeln!(out, "  queries: {}", r.llm_queries_this_round).unwrap();
    }
    if let Some(f) = &trace.failure {
        writeln!(out, "failed at stage: {}", f.stage).unwrap();
        writeln!(out, "error: {}", f.message).unwrap();
    }
    writeln!(out, "final answer: {}", trace.final_answer.normalized_text).unwrap();
    writeln!(out, "total queries: {}", trace.total_llm_queries).unwrap();
    writeln!(out, "converged: {}", trace.converged).unwrap();
    out
}

pub fn cmd_trace(args: &TraceArgs) -> Result<String> {
    let traces = read_traces(&args.traces)?;
    match traces.iter().find(|t| t.sample_id == args.sample) {
        Some(t) => Ok(render_trace(t)),
        None => {
            let ids: Vec<&str> = traces.iter().map(|t| t.sample_id.as_str()).collect();
            Err(Error::Mismatch(format!(
                "no trace for sample '{}'; available: {}",
                args.sample,
                ids.join(", ")
            )))
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run(args) => {
            let s = cmd_run(&args)?;
            eprintln!(
                "wrote {} traces to {} ({} skipped, {} failed, {} backend calls)",
                s.written,
                s.output.display(),
                s.skipped,
                s.failed,
                s.backend_calls
            );
            Ok(s.exit_code())
        }
        Command::Eval(args) => {
            print!("{}", cmd_eval(&args)?.render_table());
            Ok(0)
        }
        Command::Trace(args) => {
            print!("{}", cmd_trace(&args)?);
            Ok(0)
        }
        Command::Fixtures {
            command: FixturesCommand::Build { spec, out },
        } => {
            let corpus = build_fixture_corpus(&spec)?;
            let diffs: Vec<String> = corpus
                .scenarios
                .iter()
                .flat_map(|s| {
                    check_expected(&s.trace, &s.expected)
                        .into_iter()
                        .map(move |d| format!("{}: {d}", s.scenario_id))
                })
                .collect();
            if !diffs.is_empty() {
                return Err(Error::Corpus(format!("traces differ from expected summaries:\n{}", diffs.join("\n"))));
            }
            corpus.write(&out)?;
            for s in &corpus.scenarios {
                for v in s.variants.iter().filter(|v| !v.gaps.is_empty()) {
                    eprintln!("note: {} [{}]: {}", s.scenario_id, v.name, v.gaps.join("; "));
                }
            }
            eprintln!(
                "recorded {} scenarios, {} fixture records into {}",
                corpus.scenarios.len(),
                corpus.all_records()?.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Cache {
            command: CacheCommand::Stats { dir },
        } => {
            let stats = ResponseCache::open(&dir)?.stats()?;
            println!("entries: {}", stats.entries);
            println!("bytes: {}", stats.bytes);
            Ok(0)
        }
    }
}
