//! Randomized scripted scenes for property checks over whole episodes.

use std::collections::BTreeMap;

use interprompt::backends::scripted::{Script, ScriptedImage, ScriptedMember, ScriptedRound};
use interprompt::backends::wire::DetectedObjectWire;
use interprompt::model::{EpisodeConfig, Mode, Sample};
use rand::seq::IndexedRandom;
use rand::Rng;

const LABELS: &[&str] = &["cup", "dog", "tree", "car", "lamp", "bench", "kite", "boat"];
const ANSWERS: &[&str] = &["red", "Red.", "blue", "the blue", "green", "a green"];

/// A random scene and model script. Rationale texts are unique tokens so
/// prompt membership checks cannot match anything else.
pub fn random_script(rng: &mut impl Rng, k: usize, rounds: usize, empty_rate: f64) -> Script {
    let n_objects = rng.random_range(0..=5usize);
    let mut objects = Vec::new();
    let mut regional = BTreeMap::new();
    let mut attend = BTreeMap::new();
    for i in 0..n_objects {
        let label = *LABELS.choose(rng).unwrap();
        let x = 10.0 + 120.0 * i as f64;
        objects.push(DetectedObjectWire {
            label: label.to_string(),
            bbox: [x, 100.0, x + 60.0, 200.0],
            score: rng.random_range(1..=100) as f64 / 100.0,
        });
        regional
            .entry(label.to_string())
            .or_insert_with(|| (0..3).map(|c| format!("{label} view {c}")).collect::<Vec<_>>());
        attend.insert(label.to_string(), -(rng.random_range(1..=40) as f64) / 8.0);
    }
    let mut similarities = BTreeMap::new();
    let mut serial = 0usize;
    let rounds = (0..rounds)
        .map(|r| {
            let width = if rng.random_bool(0.5) { 1 } else { k };
            let members = (0..width)
                .map(|m| {
                    let answer = if rng.random_bool(empty_rate) {
                        String::new()
                    } else {
                        ANSWERS.choose(rng).unwrap().to_string()
                    };
                    let rationale = rng.random_bool(0.8).then(|| {
                        serial += 1;
                        format!("Zq{r}x{m}y{serial} holds.")
                    });
                    if let Some(t) = &rationale {
                        similarities.insert(t.clone(), rng.random_range(-8..=8) as f64 / 16.0);
                    }
                    ScriptedMember {
                        answer,
                        logprob: -(rng.random_range(1..=64) as f64) / 32.0,
                        rationale,
                    }
                })
                .collect();
            ScriptedRound { members }
        })
        .collect();
    Script {
        image: ScriptedImage {
            image_ref: "rand".into(),
            width: 800.0,
            height: 480.0,
            global_caption: "a random scene".into(),
            objects,
            regional_captions: regional,
        },
        attend_scores: attend,
        rounds,
        similarities,
    }
}

pub fn random_config(rng: &mut impl Rng) -> EpisodeConfig {
    let mode = *[Mode::Ipvr, Mode::Ipvr, Mode::Ipvr, Mode::Pica, Mode::Cot].choose(rng).unwrap();
    EpisodeConfig {
        num_examples: rng.random_range(1..=2),
        ensemble_size: rng.random_range(1..=5),
        max_iterations: rng.random_range(1..=6),
        verify_threshold: rng.random_range(-4..=4) as f64 / 16.0,
        mode,
        enable_attend: rng.random_bool(0.7),
        enable_rationale: mode == Mode::Cot || rng.random_bool(0.8),
        enable_verify: rng.random_bool(0.7),
        caption_candidates: rng.random_range(1..=3),
        ..EpisodeConfig::default()
    }
}

pub fn random_sample(id: usize) -> Sample {
    Sample {
        id: format!("rand-{id}"),
        image_ref: "rand".into(),
        question: "What color is it?".into(),
        direct_answers: vec!["red".into(); 10],
        choices: None,
        correct_choice_index: None,
        reference_rationales: None,
    }
}
