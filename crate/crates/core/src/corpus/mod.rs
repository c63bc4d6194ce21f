//! Event schemas, annotated sentences, corpus splits and the operations the
//! experiments run on them.

mod io;
mod synthetic;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub use io::{
    parse_sentences, read_corpus, read_schema, read_sentences, sentences_to_jsonl, write_corpus,
    write_schema, write_sentences,
};
pub use synthetic::{default_schema, generate_synthetic, SyntheticConfig, SyntheticLexicon};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventType {
    pub name: String,
    pub label_words: Vec<String>,
}

impl EventType {
    pub fn new(name: &str, label_words: &[&str]) -> Self {
        EventType {
            name: name.to_string(),
            label_words: label_words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

/// Ordered event types; the implicit "no event" class is not listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct EventSchema {
    types: Vec<EventType>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    types: Vec<EventType>,
}

impl TryFrom<SchemaFile> for EventSchema {
    type Error = Error;
    fn try_from(f: SchemaFile) -> Result<Self> {
        EventSchema::new(f.types)
    }
}

impl From<EventSchema> for SchemaFile {
    fn from(s: EventSchema) -> Self {
        SchemaFile { types: s.types }
    }
}

impl EventSchema {
    pub fn new(types: Vec<EventType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::Validation("schema has no event types".into()));
        }
        let mut names = BTreeSet::new();
        for t in &types {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Validation(format!("duplicate event type `{}`", t.name)));
            }
            if t.label_words.is_empty() {
                return Err(Error::Validation(format!("event type `{}` has no label words", t.name)));
            }
            for w in &t.label_words {
                if tokenize(w) != [w.clone()] {
                    return Err(Error::Validation(format!(
                        "label word `{w}` of `{}` is not a single normalised token",
                        t.name
                    )));
                }
            }
        }
        Ok(EventSchema { types })
    }

    pub fn types(&self) -> &[EventType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    /// The concatenated label word sequence in schema order.
    pub fn label_words(&self) -> impl Iterator<Item = &str> {
        self.types
            .iter()
            .flat_map(|t| t.label_words.iter().map(String::as_str))
    }

    pub fn label_word_count(&self) -> usize {
        self.types.iter().map(|t| t.label_words.len()).sum()
    }
}

/// Inclusive token span of one trigger.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TriggerSpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub type_name: String,
}

impl TriggerSpan {
    pub fn new(start: usize, end: usize, type_name: &str) -> Self {
        TriggerSpan {
            start,
            end,
            type_name: type_name.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub doc_id: String,
    pub sent_id: String,
    pub tokens: Vec<String>,
    /// Absent in unannotated input.
    #[serde(default)]
    pub triggers: Vec<TriggerSpan>,
}

impl AsRef<[String]> for AnnotatedSentence {
    fn as_ref(&self) -> &[String] {
        &self.tokens
    }
}

impl AnnotatedSentence {
    pub fn is_eventful(&self) -> bool {
        !self.triggers.is_empty()
    }

    /// Checks span bounds, ordering, overlap and type membership.
    pub fn validate(&self, schema: &EventSchema) -> Result<()> {
        let fail = |what: String| {
            Err(Error::Validation(format!(
                "sentence {}/{}: {what}",
                self.doc_id, self.sent_id
            )))
        };
        let mut spans: Vec<&TriggerSpan> = self.triggers.iter().collect();
        spans.sort();
        for s in &spans {
            if s.end < s.start {
                return fail(format!("span end {} before start {}", s.end, s.start));
            }
            if s.end >= self.tokens.len() {
                return fail(format!(
                    "span {}..={} out of bounds for {} tokens",
                    s.start,
                    s.end,
                    self.tokens.len()
                ));
            }
            if schema.index_of(&s.type_name).is_none() {
                return fail(format!("unknown event type `{}`", s.type_name));
            }
        }
        for w in spans.windows(2) {
            if w[1].start <= w[0].end {
                return fail(format!(
                    "overlapping spans {}..={} and {}..={}",
                    w[0].start, w[0].end, w[1].start, w[1].end
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<AnnotatedSentence>,
    pub dev: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
}

/// Document ids in order of first appearance, each with its sentence indices.
pub fn documents(sentences: &[AnnotatedSentence]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut at: HashMap<&str, usize> = HashMap::new();
    for (i, s) in sentences.iter().enumerate() {
        match at.get(s.doc_id.as_str()) {
            Some(&k) => order[k].1.push(i),
            None => {
                at.insert(&s.doc_id, order.len());
                order.push((s.doc_id.clone(), vec![i]));
            }
        }
    }
    order
}

impl CorpusSplit {
    pub fn parts(&self) -> [(&'static str, &[AnnotatedSentence]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    pub fn validate(&self, schema: &EventSchema) -> Result<()> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, part) in self.parts() {
            for s in part {
                s.validate(schema)?;
                if let Some(prev) = owner.insert(&s.doc_id, name) {
                    if prev != name {
                        return Err(Error::Validation(format!(
                            "document {} appears in both {prev} and {name}",
                            s.doc_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Keeps only sentences with at least one trigger, in every split.
    pub fn filter_eventful(&self) -> CorpusSplit {
        let keep = |v: &[AnnotatedSentence]| v.iter().filter(|s| s.is_eventful()).cloned().collect();
        CorpusSplit {
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
        }
    }

    /// Samples whole training documents without replacement until at least
    /// `fraction` of the training sentences are covered.
    ///
    /// Documents are taken as a prefix of one seeded permutation, so smaller
    /// fractions are subsets of larger ones under the same seed. Dev and test
    /// are returned untouched.
    pub fn subsample_training(&self, fraction: f64, seed: u64) -> Result<CorpusSplit> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Param(format!("training fraction {fraction} outside (0, 1]")));
        }
        let docs = documents(&self.train);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let total = self.train.len();
        let mut chosen = vec![false; total];
        let mut covered = 0usize;
        for d in order {
            if covered as f64 >= fraction * total as f64 {
                break;
            }
            for &i in &docs[d].1 {
                chosen[i] = true;
            }
            covered += docs[d].1.len();
        }
        Ok(CorpusSplit {
            train: self
                .train
                .iter()
                .zip(&chosen)
                .filter(|(_, &c)| c)
                .map(|(s, _)| s.clone())
                .collect(),
            dev: self.dev.clone(),
            test: self.test.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
