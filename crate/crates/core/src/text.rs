//! Word-level tokenizer and the vocabulary shared by sentence words and
//! event-type label words.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EventSchema;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from tokenized sentences.
    ///
    /// Tokens seen at least `min_count` times are kept, schema label words are
    /// always kept. Ids after the specials follow descending frequency, ties
    /// broken alphabetically.
    pub fn build<'a, I, S>(corpus: I, schema: &EventSchema, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = Self::with_specials();
        for (tok, _) in kept {
            vocab.push(tok);
        }
        for word in schema.label_words() {
            vocab.push(word);
        }
        vocab
    }

    fn with_specials() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: SPECIALS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("vocabulary", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::json("vocabulary", e))?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if file.tokens.get(i).map(String::as_str) != Some(s) || file.specials.get(*s) != Some(&i)
            {
                return Err(Error::Validation(format!("vocabulary special {s} must have id {i}")));
            }
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in &file.tokens {
            if v.contains(t) {
                return Err(Error::Validation(format!("duplicate vocabulary token `{t}`")));
            }
            v.push(t);
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::EventType;

    fn schema() -> EventSchema {
        EventSchema::new(vec![
            EventType::new("Attack", &["attack"]),
            EventType::new("Injure", &["injure"]),
        ])
        .unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizes_example_sentence() {
        assert_eq!(
            tokenize("A bomb went off near the city hall on Friday, injuring 6."),
            vec![
                "a", "bomb", "went", "off", "near", "the", "city", "hall", "on", "friday", ",",
                "injuring", "6", "."
            ]
        );
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }

    #[test]
    fn case_folding_shares_ids() {
        let corpus = vec![toks("Attack attack ATTACK")];
        let v = Vocabulary::build(&corpus, &schema(), 1);
        assert_eq!(v.id("attack"), v.encode(&tokenize("Attack"))[0]);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::build(&[toks("x")], &schema(), 1);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[MASK]"), MASK);
    }

    #[test]
    fn label_words_always_included() {
        let corpus = vec![toks("troops fired on the village")];
        let v = Vocabulary::build(&corpus, &schema(), 5);
        assert!(v.contains("injure"));
        assert!(v.contains("attack"));
        assert_ne!(v.id("injure"), UNK);
    }

    #[test]
    fn min_count_threshold() {
        // "rare" appears twice, "common" three times.
        let corpus = vec![toks("common rare common"), toks("rare common")];
        let all = Vocabulary::build(&corpus, &schema(), 1);
        assert!(all.contains("rare") && all.contains("common"));
        let v = Vocabulary::build(&corpus, &schema(), 3);
        assert_eq!(v.encode(&["rare"]), vec![UNK]);
        assert_ne!(v.id("common"), UNK);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(&[toks("a b c a")], &schema(), 1);
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_json(r#"{"tokens":["a"],"specials":{}}"#).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z0-9 ,.!?'-]{0,60}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn encode_decode_identity(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
            let v = Vocabulary::build(std::slice::from_ref(&words), &schema(), 1);
            prop_assert_eq!(v.decode(&v.encode(&words)), words);
        }
    }
}
