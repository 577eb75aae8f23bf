mod common;

use std::fs;
use std::path::{Path, PathBuf};

use interprompt::datastore::cache::ResponseCache;
use interprompt::datastore::corpus::{build_fixture_corpus, build_from_spec, check_expected, PromptCheck};
use interprompt::datastore::datasets::{load_aokvqa, load_okvqa, ImageRefPattern};
use interprompt::datastore::traces::{append_traces, read_traces, write_traces};
use interprompt::Error;
use serde_json::json;

use common::{corpus_dir, corpus_spec, spec, Corpus};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn val() -> ImageRefPattern {
    ImageRefPattern::new("{split}/{image_id_padded}.jpg", "val2017")
}

#[test]
fn aokvqa_records_load_with_choices_and_rationales() {
    let samples = load_aokvqa(&data("aokvqa_sample.json"), &val()).unwrap();
    assert_eq!(samples.len(), 3);
    let s = &samples[0];
    assert_eq!(s.id, "22MexNkBPpdZGX6sxbxVBH");
    assert_eq!(s.image_ref, "val2017/000000299207.jpg");
    assert_eq!(s.choices.as_ref().unwrap().len(), 4);
    assert_eq!(s.correct_choice_index, Some(3));
    assert_eq!(s.reference_rationales.as_ref().unwrap().len(), 3);
    assert_eq!(s.direct_answers.len(), 10);
    assert!(samples.iter().all(|s| s.choices.is_some() && s.reference_rationales.is_some()));
}

#[test]
fn aokvqa_errors_name_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, json!([{"question_id": "a", "image_id": 1, "question": "q?"}]).to_string()).unwrap();
    let err = load_aokvqa(&path, &val()).unwrap_err().to_string();
    assert!(err.contains("record 0") && err.contains("direct_answers"), "{err}");

    fs::write(&path, json!([
        {"question_id": "a", "image_id": 1, "question": "q?", "direct_answers": ["x"]},
        {"question_id": "a", "image_id": 2, "question": "r?", "direct_answers": ["y"]}
    ]).to_string()).unwrap();
    assert!(load_aokvqa(&path, &val()).unwrap_err().to_string().contains("duplicate"));

    fs::write(&path, json!([
        {"question_id": "a", "image_id": 1, "question": "q?", "direct_answers": ["x"], "choices": ["p"], "correct_choice_idx": 3}
    ]).to_string()).unwrap();
    assert!(load_aokvqa(&path, &val()).is_err());
    assert!(matches!(load_aokvqa(&dir.path().join("missing.json"), &val()), Err(Error::Io { .. })));
}

#[test]
fn okvqa_pairs_join_on_question_id() {
    let samples = load_okvqa(&data("okvqa_questions.json"), &data("okvqa_annotations.json"), &val()).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.direct_answers.len() == 10 && s.choices.is_none()));
    assert_eq!(samples[0].id, "2971475");
    assert_eq!(samples[1].image_ref, "val2017/000000393282.jpg");
}

#[test]
fn okvqa_question_without_annotation_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.json");
    fs::write(&q, json!({"questions": [{"image_id": 1, "question": "q?", "question_id": 99}]}).to_string()).unwrap();
    let err = load_okvqa(&q, &data("okvqa_annotations.json"), &val()).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)), "{err}");
}

#[test]
fn image_ref_templates() {
    let p = ImageRefPattern::new("{split}/{image_id}.jpg", "val");
    assert_eq!(p.render("42"), "val/42.jpg");
    let p = ImageRefPattern::new("COCO_{split}_{image_id_padded}.jpg", "val2014");
    assert_eq!(p.render("42"), "COCO_val2014_000000000042.jpg");
}

#[test]
fn traces_round_trip_and_append() {
    let corpus = Corpus::load();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_traces(&path, &corpus.traces[..3]).unwrap();
    append_traces(&path, &corpus.traces[3..5]).unwrap();
    assert_eq!(read_traces(&path).unwrap(), corpus.traces[..5].to_vec());
}

#[test]
fn invalid_trace_lines_are_rejected() {
    let corpus = Corpus::load();
    let mut bad = corpus.traces[0].clone();
    bad.total_llm_queries += 1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    assert!(write_traces(&path, &[bad.clone()]).is_err());
    fs::write(&path, serde_json::to_string(&bad).unwrap() + "\n").unwrap();
    let err = read_traces(&path).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
    fs::write(&path, "{not json\n").unwrap();
    assert!(read_traces(&path).is_err());
}

#[test]
fn cache_persists_and_refuses_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let digest = "2c17d4b4758d71e355f1408232c423f34da8a96d03a0212f3b2c73b5f6fc8a1a";
    let cache = ResponseCache::open(dir.path()).unwrap();
    assert_eq!(cache.get(digest).unwrap(), None);
    cache.put(digest, &json!({"text": " a"})).unwrap();
    cache.put(digest, &json!({"text": " a"})).unwrap();
    assert!(matches!(cache.put(digest, &json!({"text": " b"})), Err(Error::CacheConflict { .. })));
    let reopened = ResponseCache::open(dir.path()).unwrap();
    assert_eq!(reopened.get(digest).unwrap(), Some(json!({"text": " a"})));
    assert_eq!(reopened.stats().unwrap().entries, 1);
}

#[test]
fn committed_corpus_is_reproducible_from_its_spec() {
    let corpus = build_fixture_corpus(&corpus_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    for name in ["fixtures.jsonl", "pool.jsonl", "expected_traces.jsonl", "dataset.json", "scenarios.json", "run.json"] {
        let fresh = fs::read(dir.path().join(name)).unwrap();
        let committed = fs::read(corpus_dir().join(name)).unwrap();
        assert!(fresh == committed, "{name} differs from the committed corpus");
    }
}

#[test]
fn expected_summaries_hold_for_every_scenario() {
    let corpus = build_fixture_corpus(&corpus_spec()).unwrap();
    assert!(corpus.scenarios.len() >= 20);
    for s in &corpus.scenarios {
        assert_eq!(check_expected(&s.trace, &s.expected), Vec::<String>::new(), "{}", s.scenario_id);
        assert!(s.variants.iter().all(|v| v.gaps.is_empty()), "{}", s.scenario_id);
    }
}

#[test]
fn scenario_a_summary() {
    let corpus = build_fixture_corpus(&corpus_spec()).unwrap();
    let a = corpus.scenarios.iter().find(|s| s.scenario_id == "liv01-room").unwrap();
    assert_eq!(a.trace.rounds.len(), 2);
    assert!(a.trace.converged);
}

#[test]
fn check_expected_reports_differences() {
    let mut spec = spec();
    spec.scenarios.retain(|s| s.id == "bed01-reject");
    let corpus = build_from_spec(&spec).unwrap();
    let s = &corpus.scenarios[0];
    let mut expected = s.expected.clone();
    expected.rounds = 3;
    expected.prompt_contains.push(PromptCheck {
        round: 2,
        text: "The wall is used for a sofa.".into(),
        mode: None,
    });
    let diffs = check_expected(&s.trace, &expected);
    assert_eq!(diffs.len(), 2, "{diffs:?}");
    assert!(diffs[0].starts_with("rounds"));
}

#[test]
fn unscripted_requests_fail_the_build() {
    let mut spec = spec();
    spec.scenarios.retain(|s| s.id == "liv01-room");
    spec.scenarios[0].script.attend_scores.remove("lamp");
    let err = build_from_spec(&spec).unwrap_err().to_string();
    assert!(err.contains("liv01-room"), "{err}");
}

#[test]
fn duplicate_scenario_ids_are_rejected() {
    let mut spec = spec();
    spec.scenarios.truncate(1);
    let dup = spec.scenarios[0].clone();
    spec.scenarios.push(dup);
    assert!(build_from_spec(&spec).unwrap_err().to_string().contains("duplicate"));
}
