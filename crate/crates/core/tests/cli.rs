mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use interprompt::cli::{cmd_eval, cmd_run, cmd_trace, render_trace, EvalArgs, RunArgs, TraceArgs};
use interprompt::datastore::traces::read_traces;
use interprompt::model::{EpisodeConfig, Stage};
use interprompt::Error;
use serde_json::json;

use common::{corpus_dir, corpus_spec, write_run_config, Corpus};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interprompt")).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_over_the_corpus_writes_every_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let out = bin(&["run", "--config", path_str(&config), "--workers", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let traces = read_traces(&dir.path().join("traces.jsonl")).unwrap();
    let corpus = Corpus::load();
    assert_eq!(traces.len(), corpus.samples.len());
    let ids: Vec<&str> = traces.iter().map(|t| t.sample_id.as_str()).collect();
    let want: Vec<&str> = corpus.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, want);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrote 24 traces"));
}

#[test]
fn resume_over_a_complete_file_issues_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let args = RunArgs { config, ..Default::default() };
    let first = cmd_run(&args).unwrap();
    assert!(first.backend_calls > 0);
    let before = fs::read(&first.output).unwrap();
    let again = cmd_run(&RunArgs { resume: true, ..args.clone() }).unwrap();
    assert_eq!((again.written, again.skipped, again.backend_calls), (0, first.written, 0));
    assert_eq!(fs::read(&first.output).unwrap(), before);
}

#[test]
fn resume_finishes_a_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let args = RunArgs { config, ..Default::default() };
    let full = cmd_run(&args).unwrap();
    let all = fs::read_to_string(&full.output).unwrap();
    let head: String = all.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(&full.output, head).unwrap();
    let rest = cmd_run(&RunArgs { resume: true, ..args }).unwrap();
    assert_eq!((rest.skipped, rest.written), (5, full.written - 5));
    let mut a: Vec<String> = all.lines().map(String::from).collect();
    let mut b: Vec<String> = fs::read_to_string(&full.output).unwrap().lines().map(String::from).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn flag_overrides_reach_the_config_digest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let summary = cmd_run(&RunArgs {
        config,
        no_attend: true,
        no_verify: true,
        thre: Some(-0.5),
        miter: Some(4),
        ..Default::default()
    })
    .unwrap();
    let base: EpisodeConfig = Corpus::load().scenarios[0].config.clone();
    let want = EpisodeConfig {
        enable_attend: false,
        enable_verify: false,
        verify_threshold: -0.5,
        max_iterations: 4,
        ..base
    };
    let traces = read_traces(&summary.output).unwrap();
    assert!(traces.iter().all(|t| t.config_digest == want.digest() && t.config == want));
}

#[test]
fn invalid_overrides_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let err = cmd_run(&RunArgs { config: config.clone(), k: Some(0), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let out = bin(&["run", "--config", path_str(&config), "--mode", "cot", "--no-rationale"]);
    assert_eq!(out.status.code(), Some(1));
    let out = bin(&["run", "--config", path_str(&config), "--mode", "socratic"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn backend_with_endpoint_and_fixtures_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let both = json!({ "endpoint": "http://127.0.0.1:1", "fixtures": corpus_dir().join("fixtures.jsonl") });
    let config = write_run_config(dir.path(), json!({}));
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["backends"]["caption"] = both;
    fs::write(&config, cfg.to_string()).unwrap();
    let out = bin(&["run", "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["dataset"]["path"] = json!("nowhere.json");
    fs::write(&config, cfg.to_string()).unwrap();
    assert_eq!(bin(&["run", "--config", path_str(&config)]).status.code(), Some(2));
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = out_dir.path().join("t.jsonl");
    let run = bin(&["run", "--config", path_str(&corpus_dir().join("run.json")), "--out", path_str(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(read_traces(&out).unwrap().len(), 24);
}

#[test]
fn unreachable_backends_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::load();
    let ds = dir.path().join("one.json");
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(corpus_dir().join("dataset.json")).unwrap()).unwrap();
    fs::write(&ds, serde_json::to_string(&records[..1]).unwrap()).unwrap();
    let closed = json!({ "endpoint": "http://127.0.0.1:1" });
    let config = write_run_config(dir.path(), json!({}));
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    cfg["backends"]["detect"] = closed;
    cfg["dataset"]["path"] = json!(ds);
    fs::write(&config, cfg.to_string()).unwrap();
    let out = bin(&["run", "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let traces = read_traces(&dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(traces.len(), 1);
    let f = traces[0].failure.as_ref().unwrap();
    assert!(f.unreachable && f.stage == Stage::See);
    assert_eq!(traces[0].sample_id, corpus.samples[0].id);
}

#[test]
fn eval_scores_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run_config(dir.path(), json!({}));
    let summary = cmd_run(&RunArgs { config: config.clone(), ..Default::default() }).unwrap();
    let report = cmd_eval(&EvalArgs {
        traces: summary.output.clone(),
        config: Some(config),
        dataset: None,
        format: None,
        annotations: None,
        out: Some(dir.path().join("report.json")),
    })
    .unwrap();
    for s in &report.samples {
        let want = if s.failed { 0.0 } else { 1.0 };
        assert_eq!(s.accuracy, want, "{}", s.sample_id);
    }
    assert_eq!(report.aggregates.num_failed, 1);
    assert!(report.samples.iter().any(|s| s.rationale_similarity.is_some()));
    assert!(report.aggregates.corpus_bleu.is_some());
    let saved: interprompt::evaluation::EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

#[test]
fn eval_of_successful_traces_reaches_full_accuracy() {
    let corpus = Corpus::load();
    let dir = tempfile::tempdir().unwrap();
    let ok: Vec<_> = corpus.traces.iter().filter(|t| t.failure.is_none()).cloned().collect();
    let path = dir.path().join("ok.jsonl");
    interprompt::datastore::traces::write_traces(&path, &ok).unwrap();
    let out = bin(&["eval", "--traces", path_str(&path), "--dataset", path_str(&corpus_dir().join("dataset.json"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("mean accuracy: 1.0000"), "{table}");
}

#[test]
fn eval_with_unknown_samples_is_a_mismatch() {
    let corpus = Corpus::load();
    let dir = tempfile::tempdir().unwrap();
    let mut t = corpus.traces[0].clone();
    t.sample_id = "not-in-dataset".into();
    let path = dir.path().join("t.jsonl");
    interprompt::datastore::traces::write_traces(&path, &[t]).unwrap();
    let out = bin(&["eval", "--traces", path_str(&path), "--dataset", path_str(&corpus_dir().join("dataset.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not-in-dataset"));
}

#[test]
fn trace_listing_for_scenario_a() {
    let traces = corpus_dir().join("expected_traces.jsonl");
    let text = cmd_trace(&TraceArgs { traces: traces.clone(), sample: "liv01-room".into() }).unwrap();
    assert!(text.ends_with("converged: true\n"), "{text}");
    assert_eq!(text.matches("\nround ").count(), 2);
    let attend = text.find("attend: sofa").unwrap();
    let caption = text.find("regional caption: a brown sofa with two pillows").unwrap();
    let answer = text.find("answer: living room").unwrap();
    let rationale = text.find("rationale: Sofa and coffee table").unwrap();
    assert!(attend < caption && caption < answer && answer < rationale);
    assert!(text.contains("similarity 0.2700, accepted"));
}

#[test]
fn trace_listing_shows_the_failing_stage() {
    let corpus = Corpus::load();
    let (_, _, failed) = corpus.scenario("blur01-predict-fail");
    let text = render_trace(failed);
    assert!(text.contains("failed at stage: predict"), "{text}");
}

#[test]
fn trace_for_an_unknown_sample_lists_the_ids() {
    let traces = corpus_dir().join("expected_traces.jsonl");
    let out = bin(&["trace", "--traces", path_str(&traces), "--sample", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("liv01-room") && err.contains("kit01-alternate"), "{err}");
}

#[test]
fn fixtures_build_and_cache_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let build = bin(&["fixtures", "build", "--spec", path_str(&corpus_spec()), "--out", path_str(&out)]);
    assert_eq!(build.status.code(), Some(0), "{}", String::from_utf8_lossy(&build.stderr));
    assert!(out.join("fixtures.jsonl").exists() && out.join("run.json").exists());

    let cache = dir.path().join("cache");
    let config = write_run_config(dir.path(), json!({ "cache_dir": cache }));
    cmd_run(&RunArgs { config, ..Default::default() }).unwrap();
    let stats = bin(&["cache", "stats", "--dir", path_str(&cache)]);
    let text = String::from_utf8(stats.stdout).unwrap();
    let entries: usize = text.lines().next().unwrap().trim_start_matches("entries: ").parse().unwrap();
    assert!(entries > 0, "{text}");
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["run"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
}
