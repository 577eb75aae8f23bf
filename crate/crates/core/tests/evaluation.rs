mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use interprompt::backends::scripted::{Script, ScriptedTransport};
use interprompt::backends::ModelClient;
use interprompt::evaluation::{
    bleu, bleu_with, corpus_bleu, evaluate, query_accounting, rationale_similarity, vqa_soft_accuracy, BleuOptions,
    EvalReport, SampleEval,
};
use interprompt::model::normalize_answer;
use interprompt::Error;
use proptest::prelude::*;
use serde_json::json;

use common::{fixture_client, Corpus};

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn embedding_client(vectors: &[(&str, Vec<f64>)]) -> ModelClient {
    let script: Script = serde_json::from_value(json!({
        "image": { "image_ref": "x", "width": 10.0, "height": 10.0, "global_caption": "nothing" },
        "rounds": [],
    }))
    .unwrap();
    let embeddings: BTreeMap<String, Vec<f64>> = vectors.iter().map(|(t, v)| (t.to_string(), v.clone())).collect();
    ModelClient::new(Arc::new(ScriptedTransport::new(script, 1).with_embeddings(embeddings)))
}

#[test]
fn accounting_over_rounds_two_two_three() {
    let corpus = Corpus::load();
    let (_, _, two) = corpus.scenario("liv01-room");
    let (_, _, three) = corpus.scenario("snow01-round3");
    assert_eq!((two.rounds.len(), three.rounds.len()), (2, 3));
    let acc = query_accounting(&[two.clone(), two.clone(), three.clone()]).unwrap();
    assert!((acc.mean_queries - 14.0).abs() < 1e-12);
    assert!((acc.mean_rounds - 7.0 / 3.0).abs() < 1e-12);
    assert!(matches!(query_accounting(&[]), Err(Error::Invalid(_))));
}

#[test]
fn rationale_similarity_means_reference_cosines() {
    let client = embedding_client(&[
        ("cand", vec![1.0, 0.0]),
        ("r1", vec![0.8, 0.6]),
        ("r2", vec![0.6, 0.8]),
    ]);
    let sim = rationale_similarity("cand", &strings(&["r1", "r2"]), &client).unwrap();
    assert!((sim - 0.7).abs() < 1e-12);
    let own = rationale_similarity("r1", &strings(&["r1"]), &client).unwrap();
    assert!((own - 1.0).abs() < 1e-12);
    assert!(matches!(rationale_similarity("cand", &[], &client), Err(Error::Invalid(_))));
}

#[test]
fn rationale_similarity_is_symmetric_for_one_reference() {
    let client = embedding_client(&[]);
    let a = "the oven is hot so it bakes bread";
    let b = "bread is baked in a hot oven";
    let ab = rationale_similarity(a, &strings(&[b]), &client).unwrap();
    let ba = rationale_similarity(b, &strings(&[a]), &client).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&ab));
}

#[test]
fn soft_accuracy_reference_points() {
    let mut answers = strings(&["fish"; 10]);
    assert_eq!(vqa_soft_accuracy("fish", &answers).unwrap(), 1.0);
    assert_eq!(vqa_soft_accuracy("meat", &answers).unwrap(), 0.0);
    answers[0] = "meat".into();
    assert_eq!(vqa_soft_accuracy("meat", &answers).unwrap(), 0.3);
    answers[1] = "meat".into();
    assert_eq!(vqa_soft_accuracy("meat", &answers).unwrap(), 0.6);
    answers[2] = "meat".into();
    assert_eq!(vqa_soft_accuracy("meat", &answers).unwrap(), 0.9);
    answers[3] = "meat".into();
    assert_eq!(vqa_soft_accuracy("meat", &answers).unwrap(), 1.0);
    assert_eq!(vqa_soft_accuracy("The Fish!", &strings(&["fish"; 10])).unwrap(), 1.0);
}

#[test]
fn corpus_bleu_pools_statistics() {
    let opts = BleuOptions::default();
    let segs = vec![
        ("the cat sat on the mat".to_string(), strings(&["the cat sat on the mat"])),
        ("a dog runs in the park".to_string(), strings(&["a dog runs in the park"])),
    ];
    assert!((corpus_bleu(&segs, opts).unwrap() - 1.0).abs() < 1e-12);
    let single = bleu("the cat sat on the mat", &segs[0].1, 4).unwrap();
    assert!((corpus_bleu(&segs[..1], opts).unwrap() - single).abs() < 1e-12);
}

#[test]
fn evaluate_the_corpus_traces() {
    let corpus = Corpus::load();
    let client = fixture_client();
    let report = evaluate(&corpus.traces, &corpus.samples, Some(&client)).unwrap();
    assert_eq!(report.samples.len(), corpus.traces.len());
    for (s, t) in report.samples.iter().zip(&corpus.traces) {
        assert_eq!(s.sample_id, t.sample_id);
        assert_eq!((s.rounds, s.queries, s.failed), (t.rounds.len(), t.total_llm_queries, t.failed()));
        assert_eq!(s.accuracy, if t.failed() { 0.0 } else { 1.0 }, "{}", s.sample_id);
        if let Some(sim) = s.rationale_similarity {
            assert!((-1.0..=1.0).contains(&sim));
        }
        if let Some(b) = s.bleu {
            assert!((0.0..=1.0).contains(&b));
        }
    }
    let again = EvalReport::from_samples(report.samples.clone(), report.aggregates.corpus_bleu);
    assert_eq!(again, report);
    let a = &report.aggregates;
    let n = a.num_samples as f64;
    assert!((a.mean_accuracy - (n - 1.0) / n).abs() < 1e-12);
    let table = report.render_table();
    assert!(table.contains("blur01-predict-fail (failed)"));

    let without = evaluate(&corpus.traces, &corpus.samples, None).unwrap();
    assert!(without.samples.iter().all(|s| s.rationale_similarity.is_none()));
    assert_eq!(without.aggregates.corpus_bleu, a.corpus_bleu);
}

#[test]
fn multiple_choice_is_exact_match() {
    let corpus = Corpus::load();
    let (_, sample, trace) = corpus.scenario("tennis01-choice");
    let ok = evaluate(std::slice::from_ref(trace), std::slice::from_ref(sample), None).unwrap();
    assert_eq!(ok.samples[0].accuracy, 1.0);

    let choices = sample.choices.as_ref().unwrap();
    let correct = sample.correct_choice_index.unwrap();
    let wrong = (0..choices.len()).find(|&i| i != correct).unwrap();
    let mut t = trace.clone();
    t.final_answer.normalized_text = normalize_answer(&choices[wrong]);
    let mut s = sample.clone();
    s.direct_answers = vec![choices[wrong].clone(); 10];
    let bad = evaluate(&[t], &[s], None).unwrap();
    assert_eq!(bad.samples[0].accuracy, 0.0);
}

#[test]
fn aggregates_from_hand_built_samples() {
    let mk = |id: &str, acc: f64, sim: Option<f64>, rounds: usize, failed: bool| SampleEval {
        sample_id: id.into(),
        accuracy: acc,
        bleu: None,
        rationale_similarity: sim,
        rounds,
        queries: rounds * 6,
        failed,
    };
    let r = EvalReport::from_samples(
        vec![mk("a", 1.0, Some(0.5), 2, false), mk("b", 0.3, None, 3, false), mk("c", 0.0, Some(0.25), 0, true)],
        None,
    );
    let a = &r.aggregates;
    assert_eq!((a.num_samples, a.num_failed), (3, 1));
    assert!((a.mean_accuracy - 1.3 / 3.0).abs() < 1e-12);
    assert!((a.mean_rounds - 5.0 / 3.0).abs() < 1e-12);
    assert!((a.mean_queries - 10.0).abs() < 1e-12);
    assert_eq!(a.mean_rationale_similarity, Some(0.375));
    assert!(r.render_table().contains("corpus bleu: -"));
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["The", "the", "cat", "dog", "Mat", "mat", "on", "a", "sat", "ran"]), 1..10)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn bleu_is_bounded(c in sentence(), refs in prop::collection::vec(sentence(), 1..4)) {
        let b = bleu(&c, &refs, 4).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    }

    #[test]
    fn bleu_ignores_reference_order(c in sentence(), mut refs in prop::collection::vec(sentence(), 1..4)) {
        let forward = bleu(&c, &refs, 4).unwrap();
        refs.reverse();
        prop_assert_eq!(forward, bleu(&c, &refs, 4).unwrap());
    }

    #[test]
    fn lowercase_bleu_ignores_input_case(c in sentence(), refs in prop::collection::vec(sentence(), 1..4)) {
        let opts = BleuOptions { max_n: 4, lowercase: true };
        let upper: Vec<String> = refs.iter().map(|r| r.to_uppercase()).collect();
        prop_assert_eq!(bleu_with(&c, &refs, opts).unwrap(), bleu_with(&c.to_lowercase(), &upper, opts).unwrap());
    }

    #[test]
    fn soft_accuracy_is_a_multiple_of_a_tenth(pred in 0usize..3, answers in prop::collection::vec(0usize..3, 10)) {
        let names = ["red", "blue", "green"];
        let answers: Vec<String> = answers.iter().map(|&i| names[i].to_string()).collect();
        let acc = vqa_soft_accuracy(names[pred], &answers).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!(((acc * 30.0) - (acc * 30.0).round()).abs() < 1e-9);
    }
}
