//! See, Think and Confirm stages and the episode loop controller.
//!
//! An episode runs the See stage once, selects in-context examples once,
//! then iterates rounds of attend, describe, predict and confirm until two
//! consecutive answers agree or the round budget is spent. Any stage error
//! ends the episode and is recorded in the trace; completed rounds are kept.

use crate::backends::{CaptionRequest, CompletionRequest, ModelClient};
use crate::error::Error;
use crate::model::{
    answers_equal, expand_bbox, AnswerFormat, AnswerPrediction, AttendedConcept, Completion,
    ConceptCandidate, EpisodeConfig, Mode, Rationale, ReasoningTrace, RoundRecord, Sample,
    SceneContext, SceneSummary, Stage, StageFailure,
};
use crate::prompting::{
    build_attend_prompt, build_qa_prompt, ensemble_select, parse_qa_completion, qa_request,
    select_in_context, selection_text, ExamplePool, InContextExample, ParsedCompletion, PromptMode,
    PromptText, QaPromptInput,
};

type StageResult<T> = std::result::Result<T, StageFailure>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: Into<Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| StageFailure::new(stage, e))
    }
}

pub fn run_see(image_ref: &str, client: &ModelClient) -> StageResult<SceneContext> {
    let detection = client.detect(image_ref).at(Stage::See)?;
    let mut candidates = detection.objects;
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
    let global = client
        .caption(&CaptionRequest {
            image_ref: image_ref.to_string(),
            region: None,
            guidance: None,
            num_candidates: 1,
        })
        .at(Stage::See)?;
    Ok(SceneContext {
        image_ref: image_ref.to_string(),
        image_width: detection.image_width,
        image_height: detection.image_height,
        global_caption: global.into_iter().next().expect("one caption"),
        candidates,
        attended: Vec::new(),
    })
}

/// Picks the remaining candidate whose label the model scores highest as
/// the continuation of the attend prompt. Returns the candidate and the
/// prompt it was scored against.
pub fn attend_step(
    scene: &SceneContext,
    examples: &[InContextExample],
    question: &str,
    client: &ModelClient,
) -> StageResult<(ConceptCandidate, PromptText)> {
    let prompt = build_attend_prompt(examples, scene, question).at(Stage::Attend)?;
    let mut best: Option<(&ConceptCandidate, f64)> = None;
    for label in scene.remaining_labels() {
        let candidate = scene
            .candidates
            .iter()
            .find(|c| c.label == label)
            .expect("remaining labels come from candidates");
        let mut req = CompletionRequest::new(format!("{} {label}", prompt.text), 1, Vec::new());
        req.echo = true;
        let completion = client.complete(&req).at(Stage::Attend)?;
        let start = prompt.text.len() + 1;
        let lps = completion.span_logprobs(start, start + label.len());
        if lps.is_empty() {
            return Err(StageFailure::new(
                Stage::Attend,
                Error::Invalid(format!("no token log-probabilities cover label '{label}'")),
            ));
        }
        let score: f64 = lps.iter().sum();
        let better = match best {
            None => true,
            Some((b, s)) => {
                score > s
                    || (score == s
                        && (candidate.score > b.score
                            || (candidate.score == b.score && candidate.label < b.label)))
            }
        };
        if better {
            best = Some((candidate, score));
        }
    }
    Ok((best.expect("at least one remaining label").0.clone(), prompt))
}

/// Captions the expanded concept region and keeps the candidate caption
/// closest to the question. Appends the concept to `scene.attended`.
pub fn describe_step(
    scene: &mut SceneContext,
    concept: &ConceptCandidate,
    question: &str,
    config: &EpisodeConfig,
    client: &ModelClient,
) -> StageResult<String> {
    let region = expand_bbox(&concept.bbox, config.bbox_expand, scene.image_width, scene.image_height)
        .at(Stage::Describe)?;
    let captions = client
        .caption(&CaptionRequest {
            image_ref: scene.image_ref.clone(),
            region: Some(region),
            guidance: Some(question.to_string()),
            num_candidates: config.caption_candidates,
        })
        .at(Stage::Describe)?;
    let chosen = if captions.len() == 1 {
        captions[0].clone()
    } else {
        let q = client.embed(question).at(Stage::Describe)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in captions.iter().enumerate() {
            let sim = client.embed(c).and_then(|e| e.cosine(&q)).at(Stage::Describe)?;
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        captions[best.expect("non-empty").0].clone()
    };
    scene.attended.push(AttendedConcept {
        concept: concept.clone(),
        regional_caption: chosen.clone(),
    });
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub answer: AnswerPrediction,
    pub rationale: Option<String>,
    pub selected_member: usize,
    pub ensemble: Vec<Completion>,
    pub prompts: Vec<PromptText>,
}

fn qa_mode(config: &EpisodeConfig) -> PromptMode {
    match config.mode {
        Mode::Ipvr => PromptMode::IpvrQa,
        Mode::Pica => PromptMode::Pica,
        Mode::Cot => PromptMode::Cot,
    }
}

/// Issues one question-answering prompt per example list and keeps the
/// member with the best answer-span log-probability.
pub fn predict_step(
    scene: &SceneContext,
    example_lists: &[Vec<InContextExample>],
    rationales: &[Rationale],
    question: &str,
    choices: Option<&[String]>,
    config: &EpisodeConfig,
    client: &ModelClient,
) -> StageResult<PredictOutcome> {
    let mode = qa_mode(config);
    let with_rationale = config.rationale_active();
    let mut prompts = Vec::with_capacity(example_lists.len());
    let mut ensemble = Vec::with_capacity(example_lists.len());
    let mut parsed: Vec<ParsedCompletion> = Vec::with_capacity(example_lists.len());
    for examples in example_lists {
        let prompt = build_qa_prompt(
            &QaPromptInput {
                examples,
                scene,
                rationales,
                question,
                choices,
                with_rationale,
            },
            mode,
        )
        .at(Stage::Predict)?;
        let completion = client.complete(&qa_request(&prompt, with_rationale)).at(Stage::Predict)?;
        parsed.push(parse_qa_completion(mode, &completion));
        prompts.push(prompt);
        ensemble.push(completion);
    }
    let answers: Vec<AnswerPrediction> = parsed.iter().map(|p| p.answer.clone()).collect();
    let Some(selected) = ensemble_select(&answers) else {
        return Err(StageFailure::new(
            Stage::Predict,
            Error::Invalid(format!("all {} ensemble completions have an empty answer", ensemble.len())),
        ));
    };
    let winner = parsed.swap_remove(selected);
    Ok(PredictOutcome {
        answer: winner.answer,
        rationale: winner.rationale,
        selected_member: selected,
        ensemble,
        prompts,
    })
}

/// Verifies a generated rationale against the image. Returns `None` when
/// the selected completion carried no rationale.
pub fn confirm_step(
    image_ref: &str,
    rationale: Option<&str>,
    config: &EpisodeConfig,
    client: &ModelClient,
) -> StageResult<Option<Rationale>> {
    let Some(text) = rationale.filter(|r| !r.trim().is_empty()) else {
        return Ok(None);
    };
    let similarity = client.similarity(image_ref, text).at(Stage::Confirm)?;
    Ok(Some(Rationale {
        text: text.to_string(),
        image_similarity: similarity,
        accepted: !config.enable_verify || similarity >= config.verify_threshold,
    }))
}

fn setup_failure(message: String) -> StageFailure {
    StageFailure::new(Stage::Setup, Error::Invalid(message))
}

pub fn run_episode(
    sample: &Sample,
    pool: &ExamplePool,
    config: &EpisodeConfig,
    client: &ModelClient,
) -> ReasoningTrace {
    let mut trace = ReasoningTrace {
        sample_id: sample.id.clone(),
        config_digest: config.digest(),
        config: config.clone(),
        scene: None,
        rounds: Vec::new(),
        final_answer: AnswerPrediction::empty(),
        converged: false,
        total_llm_queries: 0,
        failure: None,
    };
    if let Err(failure) = episode_body(sample, pool, config, client, &mut trace) {
        trace.failure = Some(failure);
    }
    trace
}

fn episode_body(
    sample: &Sample,
    pool: &ExamplePool,
    config: &EpisodeConfig,
    client: &ModelClient,
    trace: &mut ReasoningTrace,
) -> StageResult<()> {
    config.validate().at(Stage::Setup)?;
    sample.validate().at(Stage::Setup)?;
    let choices = match config.answer_format {
        AnswerFormat::Direct => None,
        AnswerFormat::MultipleChoice => match &sample.choices {
            Some(c) => Some(c.as_slice()),
            None => return Err(setup_failure("multiple-choice format needs sample choices".into())),
        },
    };

    let mut scene = run_see(&sample.image_ref, client)?;
    trace.scene = Some(SceneSummary {
        image_ref: scene.image_ref.clone(),
        global_caption: scene.global_caption.clone(),
        candidates: scene.candidates.clone(),
    });

    let query = client
        .embed(&selection_text(&sample.question, Some(&scene.global_caption)))
        .at(Stage::Select)?;
    let lists = select_in_context(&query.values, pool, config.num_examples, config.ensemble_size)
        .at(Stage::Select)?;

    let mut accepted: Vec<Rationale> = Vec::new();
    for round_index in 1..=config.round_budget() {
        let mut prompts = Vec::new();
        let mut attended_concept = None;
        let mut regional_caption = None;
        if config.attend_active() && !scene.remaining_labels().is_empty() {
            let (concept, prompt) = attend_step(&scene, &lists[0], &sample.question, client)?;
            let caption = describe_step(&mut scene, &concept, &sample.question, config, client)?;
            prompts.push(prompt);
            attended_concept = Some(concept);
            regional_caption = Some(caption);
        }
        let outcome =
            predict_step(&scene, &lists, &accepted, &sample.question, choices, config, client)?;
        let rationale = if config.rationale_active() {
            confirm_step(&scene.image_ref, outcome.rationale.as_deref(), config, client)?
        } else {
            None
        };
        if let Some(r) = rationale.as_ref().filter(|r| r.accepted) {
            accepted.push(r.clone());
        }
        let queries = config.ensemble_size + usize::from(attended_concept.is_some());
        prompts.extend(outcome.prompts);
        trace.rounds.push(RoundRecord {
            round_index,
            attended_concept,
            regional_caption,
            prompts,
            ensemble: outcome.ensemble,
            selected_member: outcome.selected_member,
            answer: outcome.answer.clone(),
            rationale,
            llm_queries_this_round: queries,
        });
        trace.total_llm_queries += queries;
        trace.final_answer = outcome.answer;
        let n = trace.rounds.len();
        if n >= 2 && answers_equal(&trace.rounds[n - 1].answer, &trace.rounds[n - 2].answer) {
            trace.converged = true;
            break;
        }
    }
    Ok(())
}

/// Runs episodes on up to `workers` threads and hands traces to `sink` in
/// input order from the calling thread. Stops early if `sink` fails.
pub fn run_batch(
    samples: &[Sample],
    pool: &ExamplePool,
    config: &EpisodeConfig,
    client: &ModelClient,
    workers: usize,
    mut sink: impl FnMut(ReasoningTrace) -> crate::Result<()>,
) -> crate::Result<()> {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::mpsc;

    let workers = workers.clamp(1, samples.len().max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, ReasoningTrace)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = samples.get(i) else { break };
                if tx.send((i, run_episode(sample, pool, config, client))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0;
        for (i, trace) in rx {
            pending.insert(i, trace);
            while let Some(trace) = pending.remove(&emit) {
                emit += 1;
                if let Err(e) = sink(trace) {
                    stop.store(true, Ordering::SeqCst);
                    return Err(e);
                }
            }
        }
        Ok(())
    })
}
