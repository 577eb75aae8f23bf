//! Loaders for A-OKVQA and OK-VQA annotation files.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::Sample;

/// Builds image references from dataset image ids.
///
/// Placeholders: `{split}`, `{image_id}` and `{image_id_padded}` (the id
/// zero-padded to 12 digits, as in COCO file names).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRefPattern {
    pub template: String,
    pub split: String,
}

impl Default for ImageRefPattern {
    fn default() -> Self {
        ImageRefPattern {
            template: "{split}/{image_id}.jpg".into(),
            split: "val".into(),
        }
    }
}

impl ImageRefPattern {
    pub fn new(template: impl Into<String>, split: impl Into<String>) -> Self {
        ImageRefPattern {
            template: template.into(),
            split: split.into(),
        }
    }

    pub fn render(&self, image_id: &str) -> String {
        let padded = if image_id.chars().all(|c| c.is_ascii_digit()) {
            format!("{image_id:0>12}")
        } else {
            image_id.to_string()
        };
        self.template
            .replace("{split}", &self.split)
            .replace("{image_id_padded}", &padded)
            .replace("{image_id}", image_id)
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, format!("malformed JSON: {e}")))
}

/// Ids may be JSON strings or integers.
fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

/// A JSON array of records with `question_id`, `image_id`, `question`,
/// `direct_answers` and, where the split provides them, `choices`,
/// `correct_choice_idx` and `rationales`.
pub fn load_aokvqa(path: &Path, pattern: &ImageRefPattern) -> Result<Vec<Sample>> {
    let root = read_json(path)?;
    let records = root
        .as_array()
        .ok_or_else(|| Error::data(path, "expected a JSON array of records"))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let err = |m: String| Error::data(path, format!("record {i}: {m}"));
        let field = |name: &str| rec.get(name).filter(|v| !v.is_null());
        let required = |name: &str| field(name).ok_or_else(|| err(format!("missing field '{name}'")));
        let id = id_string(required("question_id")?).ok_or_else(|| err("invalid question_id".into()))?;
        let image_id = id_string(required("image_id")?).ok_or_else(|| err("invalid image_id".into()))?;
        let question = required("question")?
            .as_str()
            .ok_or_else(|| err("question is not a string".into()))?
            .to_string();
        let direct_answers = string_list(required("direct_answers")?)
            .ok_or_else(|| err("direct_answers is not a list of strings".into()))?;
        let choices = field("choices")
            .map(|v| string_list(v).ok_or_else(|| err("choices is not a list of strings".into())))
            .transpose()?;
        let correct_choice_index = field("correct_choice_idx")
            .map(|v| {
                v.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| err("correct_choice_idx is not a non-negative integer".into()))
            })
            .transpose()?;
        let reference_rationales = field("rationales")
            .map(|v| string_list(v).ok_or_else(|| err("rationales is not a list of strings".into())))
            .transpose()?;
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate question_id '{id}'")));
        }
        let sample = Sample {
            id,
            image_ref: pattern.render(&image_id),
            question,
            direct_answers,
            choices,
            correct_choice_index,
            reference_rationales,
        };
        sample.validate().map_err(|e| err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct OkQuestions {
    questions: Vec<OkQuestion>,
}

#[derive(Deserialize)]
struct OkQuestion {
    question_id: Value,
    image_id: Value,
    question: String,
}

#[derive(Deserialize)]
struct OkAnnotations {
    annotations: Vec<OkAnnotation>,
}

#[derive(Deserialize)]
struct OkAnnotation {
    question_id: Value,
    answers: Vec<OkAnswer>,
}

#[derive(Deserialize)]
struct OkAnswer {
    answer: String,
}

/// The two-file layout: a questions file and an annotations file joined on
/// `question_id`, each annotation carrying ten annotator answers.
pub fn load_okvqa(questions_path: &Path, annotations_path: &Path, pattern: &ImageRefPattern) -> Result<Vec<Sample>> {
    let qs: OkQuestions = serde_json::from_value(read_json(questions_path)?)
        .map_err(|e| Error::data(questions_path, e.to_string()))?;
    let anns: OkAnnotations = serde_json::from_value(read_json(annotations_path)?)
        .map_err(|e| Error::data(annotations_path, e.to_string()))?;

    let mut answers: HashMap<String, Vec<String>> = HashMap::new();
    for (i, a) in anns.annotations.into_iter().enumerate() {
        let err = |m: String| Error::data(annotations_path, format!("annotation {i}: {m}"));
        let id = id_string(&a.question_id).ok_or_else(|| err("invalid question_id".into()))?;
        if a.answers.len() != 10 {
            return Err(err(format!("{} answers, expected 10", a.answers.len())));
        }
        if answers
            .insert(id.clone(), a.answers.into_iter().map(|x| x.answer).collect())
            .is_some()
        {
            return Err(err(format!("duplicate question_id '{id}'")));
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(qs.questions.len());
    for (i, q) in qs.questions.into_iter().enumerate() {
        let err = |m: String| Error::data(questions_path, format!("question {i}: {m}"));
        let id = id_string(&q.question_id).ok_or_else(|| err("invalid question_id".into()))?;
        let image_id = id_string(&q.image_id).ok_or_else(|| err("invalid image_id".into()))?;
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate question_id '{id}'")));
        }
        let direct_answers = answers
            .remove(&id)
            .ok_or_else(|| Error::Mismatch(format!("question '{id}' has no annotation")))?;
        out.push(Sample {
            id,
            image_ref: pattern.render(&image_id),
            question: q.question,
            direct_answers,
            choices: None,
            correct_choice_index: None,
            reference_rationales: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, name: &str, v: Value) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        p
    }

    #[test]
    fn pattern_rendering() {
        let p = ImageRefPattern::default();
        assert_eq!(p.render("42"), "val/42.jpg");
        let coco = ImageRefPattern::new("coco/{split}2017/{image_id_padded}.jpg", "train");
        assert_eq!(coco.render("42"), "coco/train2017/000000000042.jpg");
    }

    #[test]
    fn aokvqa_empty_and_missing_field() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "e.json", json!([]));
        assert!(load_aokvqa(&empty, &ImageRefPattern::default()).unwrap().is_empty());
        let bad = write(
            dir.path(),
            "b.json",
            json!([
                {"question_id": "a", "image_id": 1, "question": "q?", "direct_answers": ["x"]},
                {"question_id": "b", "image_id": 2, "direct_answers": ["x"]}
            ]),
        );
        let err = load_aokvqa(&bad, &ImageRefPattern::default()).unwrap_err().to_string();
        assert!(err.contains("record 1") && err.contains("question"), "{err}");
        let dup = write(
            dir.path(),
            "d.json",
            json!([
                {"question_id": "a", "image_id": 1, "question": "q?", "direct_answers": ["x"]},
                {"question_id": "a", "image_id": 2, "question": "q?", "direct_answers": ["x"]}
            ]),
        );
        assert!(load_aokvqa(&dup, &ImageRefPattern::default()).is_err());
    }

    #[test]
    fn okvqa_join_errors() {
        let dir = tempfile::tempdir().unwrap();
        let qs = write(
            dir.path(),
            "q.json",
            json!({"questions": [{"question_id": 1, "image_id": 9, "question": "q?"}]}),
        );
        let none = write(dir.path(), "a.json", json!({"annotations": []}));
        assert!(matches!(
            load_okvqa(&qs, &none, &ImageRefPattern::default()),
            Err(Error::Mismatch(_))
        ));
        let short = write(
            dir.path(),
            "s.json",
            json!({"annotations": [{"question_id": 1, "answers": [{"answer": "x"}]}]}),
        );
        assert!(load_okvqa(&qs, &short, &ImageRefPattern::default()).is_err());
    }
}
