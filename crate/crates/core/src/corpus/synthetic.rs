//! Template-based synthetic event-detection corpus.
//!
//! Every event type owns a lexicon of unambiguous trigger words plus role
//! fillers (agents, patients) that appear around its triggers. A few trigger
//! words are shared by two types and can only be resolved from those fillers.
//! Eventless sentences reuse the same fillers with neutral verbs, so context
//! words alone never imply an event.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, CorpusSplit, EventSchema, EventType, TriggerSpan};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_types: usize,
    /// Sentence counts for train, dev and test.
    pub sents_per_split: [usize; 3],
    /// Unambiguous trigger entries per event type.
    pub trigger_lexicon_size: usize,
    /// Share of all sentences that carry two or more triggers.
    pub multi_event_fraction: f64,
    /// Share of all sentences without any trigger.
    pub distractor_fraction: f64,
    /// Probability that a trigger is drawn from the ambiguous words of its type.
    pub ambiguous_fraction: f64,
    pub doc_size: [usize; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_types: 5,
            sents_per_split: [2000, 300, 300],
            trigger_lexicon_size: 14,
            multi_event_fraction: 0.3,
            distractor_fraction: 0.25,
            ambiguous_fraction: 0.25,
            doc_size: [4, 12],
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self, schema: &EventSchema) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_types < 2 {
            errs.push(format!("n_types must be at least 2, got {}", self.n_types));
        }
        if schema.len() != self.n_types {
            errs.push(format!(
                "n_types is {} but the schema has {} types",
                self.n_types,
                schema.len()
            ));
        }
        if self.trigger_lexicon_size == 0 {
            errs.push("trigger_lexicon_size must be at least 1".into());
        }
        for (name, f) in [
            ("multi_event_fraction", self.multi_event_fraction),
            ("distractor_fraction", self.distractor_fraction),
            ("ambiguous_fraction", self.ambiguous_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                errs.push(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.multi_event_fraction + self.distractor_fraction > 1.0 + 1e-12 {
            errs.push(format!(
                "multi_event_fraction + distractor_fraction = {} exceeds 1",
                self.multi_event_fraction + self.distractor_fraction
            ));
        }
        if self.sents_per_split[0] == 0 {
            errs.push("the train split needs at least one sentence".into());
        }
        if self.doc_size[0] == 0 || self.doc_size[0] > self.doc_size[1] {
            errs.push(format!("doc_size {:?} is not a valid range", self.doc_size));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

struct TypeSpec {
    name: &'static str,
    label_words: &'static [&'static str],
    triggers: &'static [&'static str],
    agents: &'static [&'static str],
    patients: &'static [&'static str],
}

const POOL: &[TypeSpec] = &[
    TypeSpec {
        name: "Attack",
        label_words: &["attack"],
        triggers: &["bombed", "raided", "ambushed", "shelled", "went off", "stormed", "assaulted", "invaded"],
        agents: &["militants", "troops", "gunmen", "rebels"],
        patients: &["convoy", "checkpoint", "base", "barracks"],
    },
    TypeSpec {
        name: "Injure",
        label_words: &["injure"],
        triggers: &["injured", "wounded", "hurt", "injuring", "maimed", "bruised", "scarred", "harmed"],
        agents: &["debris", "shrapnel", "glass", "flames"],
        patients: &["bystanders", "pedestrians", "passengers", "children"],
    },
    TypeSpec {
        name: "Die",
        label_words: &["die"],
        triggers: &["died", "perished", "passed away", "drowned", "murdered", "slain", "executed", "starved"],
        agents: &["illness", "cancer", "famine", "hunger"],
        patients: &["patient", "widow", "elder", "veteran"],
    },
    TypeSpec {
        name: "End-Position",
        label_words: &["end", "position"],
        triggers: &["resigned", "retired", "quit", "stepped down", "dismissed", "sacked", "ousted", "laid off"],
        agents: &["board", "company", "ministry", "firm"],
        patients: &["manager", "director", "chairman", "secretary"],
    },
    TypeSpec {
        name: "Transfer-Money",
        label_words: &["transfer", "money"],
        triggers: &["paid", "donated", "funded", "loaned", "wired", "refunded", "reimbursed", "bribed"],
        agents: &["bank", "donors", "investors", "treasury"],
        patients: &["dollars", "funds", "loan", "grant"],
    },
    TypeSpec {
        name: "Transport",
        label_words: &["transport"],
        triggers: &["traveled", "shipped", "drove", "flew", "arrived", "sailed", "relocated", "evacuated"],
        agents: &["pilots", "drivers", "refugees", "tourists"],
        patients: &["cargo", "trucks", "ferry", "train"],
    },
    TypeSpec {
        name: "Meet",
        label_words: &["meet"],
        triggers: &["met", "gathered", "convened", "talked", "conferred", "negotiated", "huddled", "summit"],
        agents: &["leaders", "diplomats", "envoys", "delegates"],
        patients: &["talks", "agenda", "summit", "treaty"],
    },
    TypeSpec {
        name: "Arrest-Jail",
        label_words: &["arrest", "jail"],
        triggers: &["arrested", "detained", "jailed", "imprisoned", "apprehended", "handcuffed", "locked up", "nabbed"],
        agents: &["police", "officers", "agents", "guards"],
        patients: &["suspect", "smuggler", "thief", "fugitive"],
    },
];

/// Trigger words shared by two types.
const AMBIGUOUS: &[(&str, &str, &str)] = &[
    ("fired", "Attack", "End-Position"),
    ("hit", "Attack", "Injure"),
    ("struck", "Attack", "Injure"),
    ("lost", "Die", "Transfer-Money"),
    ("killed", "Die", "Attack"),
    ("sent", "Transport", "Transfer-Money"),
    ("took", "Transport", "Arrest-Jail"),
    ("left", "End-Position", "Transport"),
];

const PLACES: &[&str] = &["baghdad", "kabul", "london", "paris", "cairo", "texas", "the capital", "the port"];
const TIMES: &[&str] = &["on friday", "yesterday", "last week", "on monday", "this morning", "overnight"];
const NEUTRAL_VERBS: &[&str] = &["saw", "discussed", "reviewed", "praised", "described", "noted", "watched", "visited"];
const NEUTRAL_NOUNS: &[&str] = &["weather", "report", "market", "election", "museum", "stadium", "budget"];
const NEUTRAL_ADJ: &[&str] = &["quiet", "busy", "closed", "crowded", "calm"];
const CONNECTORS: &[&str] = &["and", "before", "after", ",", "while"];

/// The generated lexicon: what each type's triggers and fillers are.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticLexicon {
    /// Unambiguous trigger phrases (space-separated tokens) per type.
    pub triggers: Vec<Vec<String>>,
    /// Ambiguous trigger word with the two type indices it can express.
    pub ambiguous: Vec<(String, usize, usize)>,
    pub agents: Vec<Vec<String>>,
    pub patients: Vec<Vec<String>>,
}

impl SyntheticLexicon {
    pub fn build(schema: &EventSchema, trigger_lexicon_size: usize) -> Self {
        let n = schema.len();
        let spec_of = |t: &EventType| POOL.iter().find(|p| p.name == t.name);
        let mut ambiguous: Vec<(String, usize, usize)> = AMBIGUOUS
            .iter()
            .filter_map(|&(w, a, b)| Some((w.to_string(), schema.index_of(a)?, schema.index_of(b)?)))
            .collect();
        if ambiguous.is_empty() {
            ambiguous = (0..n / 2)
                .map(|k| (format!("ambig{k}"), 2 * k, 2 * k + 1))
                .collect();
        }

        let mut taken: BTreeSet<String> = ambiguous.iter().map(|a| a.0.clone()).collect();
        for w in PLACES.iter().chain(TIMES).chain(NEUTRAL_VERBS).chain(NEUTRAL_NOUNS).chain(NEUTRAL_ADJ) {
            taken.extend(w.split(' ').map(str::to_string));
        }
        let mut agents = Vec::new();
        let mut patients = Vec::new();
        for (k, t) in schema.types().iter().enumerate() {
            let stem = pseudo_stem(&t.name, k);
            let (a, p): (Vec<String>, Vec<String>) = match spec_of(t) {
                Some(s) => (
                    s.agents.iter().map(|w| w.to_string()).collect(),
                    s.patients.iter().map(|w| w.to_string()).collect(),
                ),
                None => (
                    (0..4).map(|i| format!("{stem}agent{i}")).collect(),
                    (0..4).map(|i| format!("{stem}object{i}")).collect(),
                ),
            };
            taken.extend(a.iter().chain(&p).cloned());
            agents.push(a);
            patients.push(p);
        }

        let mut triggers = Vec::new();
        for (k, t) in schema.types().iter().enumerate() {
            let mut candidates: Vec<String> = t.label_words[..1].to_vec();
            if let Some(s) = spec_of(t) {
                candidates.extend(s.triggers.iter().map(|w| w.to_string()));
            }
            for w in &t.label_words {
                for suffix in ["s", "ed", "ing", "er", "ment"] {
                    candidates.push(format!("{w}{suffix}"));
                }
            }
            let stem = pseudo_stem(&t.name, k);
            candidates.extend((0..trigger_lexicon_size).map(|i| format!("{stem}trig{i}")));
            let mut lex = Vec::new();
            for c in candidates {
                if lex.len() == trigger_lexicon_size {
                    break;
                }
                if c.split(' ').all(|w| !taken.contains(w)) {
                    taken.extend(c.split(' ').map(str::to_string));
                    lex.push(c);
                }
            }
            triggers.push(lex);
        }
        SyntheticLexicon {
            triggers,
            ambiguous,
            agents,
            patients,
        }
    }

    pub fn ambiguous_for(&self, type_index: usize) -> Vec<&str> {
        self.ambiguous
            .iter()
            .filter(|(_, a, b)| *a == type_index || *b == type_index)
            .map(|(w, _, _)| w.as_str())
            .collect()
    }

    /// Type indices a trigger phrase can express; empty for non-triggers.
    pub fn types_of(&self, phrase: &str) -> Vec<usize> {
        if let Some((_, a, b)) = self.ambiguous.iter().find(|(w, _, _)| w == phrase) {
            return vec![*a, *b];
        }
        self.triggers
            .iter()
            .enumerate()
            .filter(|(_, lex)| lex.iter().any(|w| w == phrase))
            .map(|(k, _)| k)
            .collect()
    }

    /// Every trigger phrase, longest first, for greedy matching.
    pub fn phrases(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .triggers
            .iter()
            .flatten()
            .cloned()
            .chain(self.ambiguous.iter().map(|a| a.0.clone()))
            .collect();
        all.sort_by(|a, b| b.split(' ').count().cmp(&a.split(' ').count()).then(a.cmp(b)));
        all
    }
}

fn pseudo_stem(name: &str, k: usize) -> String {
    let s: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if s.is_empty() {
        format!("type{k}")
    } else {
        s
    }
}

/// The first `n_types` entries of the built-in ACE-like type pool; beyond the
/// pool, synthetic types `Event<k>` with label word `event<k>`.
pub fn default_schema(n_types: usize) -> EventSchema {
    let types = (0..n_types)
        .map(|k| match POOL.get(k) {
            Some(s) => EventType::new(s.name, s.label_words),
            None => EventType {
                name: format!("Event{k}"),
                label_words: vec![format!("event{k}")],
            },
        })
        .collect();
    EventSchema::new(types).expect("built-in schema is valid")
}

fn words(phrase: &str) -> impl Iterator<Item = String> + '_ {
    phrase.split(' ').map(str::to_string)
}

struct Generator<'a> {
    schema: &'a EventSchema,
    lex: &'a SyntheticLexicon,
    config: &'a SyntheticConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick<'s>(&mut self, xs: &'s [&'s str]) -> &'s str {
        xs.choose(&mut self.rng).expect("non-empty word list")
    }

    fn pick_owned(&mut self, xs: &[String]) -> String {
        xs.choose(&mut self.rng).expect("non-empty word list").clone()
    }

    /// Appends one event clause for `ty` and records its trigger span.
    fn clause(&mut self, ty: usize, tokens: &mut Vec<String>, triggers: &mut Vec<TriggerSpan>) {
        let ambiguous = self.lex.ambiguous_for(ty);
        let trigger = if !ambiguous.is_empty() && self.rng.gen_bool(self.config.ambiguous_fraction) {
            ambiguous.choose(&mut self.rng).unwrap().to_string()
        } else {
            self.pick_owned(&self.lex.triggers[ty].clone())
        };
        let agent = self.pick_owned(&self.lex.agents[ty].clone());
        let patient = self.pick_owned(&self.lex.patients[ty].clone());
        let place = self.pick(PLACES).to_string();
        let time = self.pick(TIMES).to_string();

        let template = self.rng.gen_range(0..5);
        let mut put_trigger = |tokens: &mut Vec<String>| {
            let start = tokens.len();
            tokens.extend(words(&trigger));
            triggers.push(TriggerSpan::new(
                start,
                tokens.len() - 1,
                &self.schema.types()[ty].name,
            ));
        };
        match template {
            0 => {
                tokens.push(agent);
                put_trigger(tokens);
                tokens.extend(["the".to_string(), patient, "in".to_string()]);
                tokens.extend(words(&place));
            }
            1 => {
                tokens.extend(["the".to_string(), patient, "was".to_string()]);
                put_trigger(tokens);
                tokens.extend(["by".to_string(), agent]);
                tokens.extend(words(&time));
            }
            2 => {
                tokens.extend(words(&time));
                tokens.push(agent);
                put_trigger(tokens);
                tokens.extend(["the".to_string(), patient]);
            }
            3 => {
                tokens.extend(["officials", "said", "the"].map(String::from));
                tokens.push(patient);
                put_trigger(tokens);
                tokens.push("near".to_string());
                tokens.extend(words(&place));
            }
            _ => {
                tokens.extend(["the".to_string(), agent]);
                put_trigger(tokens);
                tokens.extend(words(&time));
            }
        }
    }

    fn eventless(&mut self, tokens: &mut Vec<String>) {
        let n = self.schema.len();
        let ty = self.rng.gen_range(0..n);
        let other = self.rng.gen_range(0..n);
        if self.rng.gen_bool(0.5) {
            tokens.push(self.pick_owned(&self.lex.agents[ty].clone()));
            tokens.push(self.pick(NEUTRAL_VERBS).to_string());
            tokens.push("the".to_string());
            tokens.push(self.pick_owned(&self.lex.patients[other].clone()));
            tokens.push("in".to_string());
            let place = self.pick(PLACES);
            tokens.extend(words(place));
        } else {
            tokens.push("the".to_string());
            tokens.push(self.pick(NEUTRAL_NOUNS).to_string());
            tokens.push("was".to_string());
            tokens.push(self.pick(NEUTRAL_ADJ).to_string());
            let time = self.pick(TIMES);
            tokens.extend(words(time));
        }
    }

    fn sentence(&mut self) -> (Vec<String>, Vec<TriggerSpan>) {
        let mut tokens = Vec::new();
        let mut triggers = Vec::new();
        let u: f64 = self.rng.gen();
        let n = self.schema.len();
        if u < self.config.distractor_fraction {
            self.eventless(&mut tokens);
        } else if u < self.config.distractor_fraction + self.config.multi_event_fraction {
            let count = if self.rng.gen_bool(0.2) { 3 } else { 2 };
            let mut types: Vec<usize> = (0..n).collect();
            types.shuffle(&mut self.rng);
            for (i, &ty) in types.iter().cycle().take(count).enumerate() {
                if i > 0 {
                    tokens.push(self.pick(CONNECTORS).to_string());
                }
                self.clause(ty, &mut tokens, &mut triggers);
            }
        } else {
            let ty = self.rng.gen_range(0..n);
            self.clause(ty, &mut tokens, &mut triggers);
        }
        tokens.push(".".to_string());
        (tokens, triggers)
    }

    fn split(&mut self, name: &str, count: usize) -> Vec<AnnotatedSentence> {
        let mut out = Vec::with_capacity(count);
        let mut doc = 0;
        while out.len() < count {
            let size = self
                .rng
                .gen_range(self.config.doc_size[0]..=self.config.doc_size[1])
                .min(count - out.len());
            let doc_id = format!("{name}-{doc:04}");
            for k in 0..size {
                let (tokens, triggers) = self.sentence();
                out.push(AnnotatedSentence {
                    doc_id: doc_id.clone(),
                    sent_id: format!("{doc_id}-{k:02}"),
                    tokens,
                    triggers,
                });
            }
            doc += 1;
        }
        out
    }
}

/// Generates train/dev/test splits deterministically from `config.seed`.
pub fn generate_synthetic(schema: &EventSchema, config: &SyntheticConfig) -> Result<CorpusSplit> {
    config.validate(schema)?;
    let lex = SyntheticLexicon::build(schema, config.trigger_lexicon_size);
    let mut parts = BTreeMap::new();
    for (i, name) in ["train", "dev", "test"].into_iter().enumerate() {
        let mut g = Generator {
            schema,
            lex: &lex,
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(31).wrapping_add(i as u64)),
        };
        parts.insert(name, g.split(name, config.sents_per_split[i]));
    }
    Ok(CorpusSplit {
        train: parts.remove("train").unwrap(),
        dev: parts.remove("dev").unwrap(),
        test: parts.remove("test").unwrap(),
    })
}
