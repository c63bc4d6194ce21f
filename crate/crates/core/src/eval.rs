//! Exact-match trigger scoring with micro-averaged precision, recall and F1,
//! overall and split by the number of gold events per sentence.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, TriggerSpan};
use crate::error::{Error, Result};

/// Predicted triggers for one sentence; same layout as a gold record minus
/// the tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub sent_id: String,
    pub triggers: Vec<TriggerSpan>,
}

impl From<&AnnotatedSentence> for Prediction {
    fn from(s: &AnnotatedSentence) -> Self {
        Prediction {
            doc_id: s.doc_id.clone(),
            sent_id: s.sent_id.clone(),
            triggers: s.triggers.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub sentences: usize,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.sentences += o.sentences;
        self.gold += o.gold;
        self.predicted += o.predicted;
        self.correct += o.correct;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub sentences: usize,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for Scores {
    fn from(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.correct, c.predicted);
        let recall = ratio(c.correct, c.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            sentences: c.sentences,
            gold: c.gold,
            predicted: c.predicted,
            correct: c.correct,
            precision,
            recall,
            f1,
        }
    }
}

impl Scores {
    pub fn counts(&self) -> Counts {
        Counts {
            sentences: self.sentences,
            gold: self.gold,
            predicted: self.predicted,
            correct: self.correct,
        }
    }
}

/// `all` covers every sentence; `single` and `multi` cover sentences with
/// exactly one and at least two gold triggers, and are `None` when no such
/// sentence exists. Predictions in eventless sentences count only in `all`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: Scores,
    #[serde(rename = "1/1")]
    pub single: Option<Scores>,
    #[serde(rename = "1/N")]
    pub multi: Option<Scores>,
    /// Predictions made in sentences without gold triggers.
    pub eventless_false_positives: usize,
}

fn unique(spans: &[TriggerSpan]) -> BTreeSet<&TriggerSpan> {
    spans.iter().collect()
}

/// Counts for one sentence; duplicates on either side count once.
pub fn sentence_counts(gold: &[TriggerSpan], pred: &[TriggerSpan]) -> Counts {
    let g = unique(gold);
    let p = unique(pred);
    Counts {
        sentences: 1,
        gold: g.len(),
        predicted: p.len(),
        correct: g.intersection(&p).count(),
    }
}

/// Scores `pred` against `gold`. Sentences without a prediction record count
/// as predicting nothing; records naming unknown sentences are an error.
pub fn score(gold: &[AnnotatedSentence], pred: &[Prediction]) -> Result<EvalReport> {
    let mut by_id: HashMap<(&str, &str), Vec<&TriggerSpan>> = HashMap::new();
    let known: BTreeSet<(&str, &str)> = gold.iter().map(|s| (s.doc_id.as_str(), s.sent_id.as_str())).collect();
    for p in pred {
        let key = (p.doc_id.as_str(), p.sent_id.as_str());
        if !known.contains(&key) {
            return Err(Error::Validation(format!(
                "prediction for unknown sentence {}/{}",
                p.doc_id, p.sent_id
            )));
        }
        by_id.entry(key).or_default().extend(&p.triggers);
    }
    let mut all = Counts::default();
    let mut single: Option<Counts> = None;
    let mut multi: Option<Counts> = None;
    let mut eventless_fp = 0;
    for s in gold {
        let predicted: Vec<TriggerSpan> = by_id
            .get(&(s.doc_id.as_str(), s.sent_id.as_str()))
            .map(|v| v.iter().map(|&t| t.clone()).collect())
            .unwrap_or_default();
        let c = sentence_counts(&s.triggers, &predicted);
        all += c;
        match unique(&s.triggers).len() {
            0 => eventless_fp += c.predicted,
            1 => *single.get_or_insert_with(Counts::default) += c,
            _ => *multi.get_or_insert_with(Counts::default) += c,
        }
    }
    Ok(EvalReport {
        all: all.into(),
        single: single.map(Scores::from),
        multi: multi.map(Scores::from),
        eventless_false_positives: eventless_fp,
    })
}

/// The 1/1 and 1/N slices of [`score`].
pub fn breakdown_by_event_count(gold: &[AnnotatedSentence], pred: &[Prediction]) -> Result<(Option<Scores>, Option<Scores>)> {
    let r = score(gold, pred)?;
    Ok((r.single, r.multi))
}

pub fn predictions_to_jsonl(preds: &[Prediction]) -> Result<String> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::json("prediction", e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    std::fs::write(path, predictions_to_jsonl(preds)?).map_err(|e| Error::io(path, e))
}

/// Reads prediction JSONL; every malformed line is reported.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Prediction>(line) {
            Ok(p) => out.push(p),
            Err(e) => errs.push(format!("line {}: {e}", i + 1)),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(format!("{}: {}", path.display(), errs.join("; "))))
    }
}
