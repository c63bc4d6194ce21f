//! JSONL corpus files (one sentence per line) and the JSON schema file.
//!
//! A corpus directory holds `train.jsonl`, `dev.jsonl` and `test.jsonl`.
//! Trigger spans use inclusive token indices.

use std::fmt::Write as _;
use std::path::Path;

use super::{AnnotatedSentence, CorpusSplit, EventSchema};
use crate::error::{Error, Result};

pub fn read_schema(path: impl AsRef<Path>) -> Result<EventSchema> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.as_ref().display().to_string(), e))
}

pub fn write_schema(schema: &EventSchema, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(schema).map_err(|e| Error::json("schema", e))?;
    std::fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses JSONL text, validating every record against `schema`.
///
/// All malformed records are reported together, each with its line number.
pub fn parse_sentences(text: &str, schema: &EventSchema) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotatedSentence>(line) {
            Ok(s) => match s.validate(schema) {
                Ok(()) => out.push(s),
                Err(e) => problems.push(format!("line {}: {e}", i + 1)),
            },
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems.join("; ")))
    }
}

pub fn read_sentences(path: impl AsRef<Path>, schema: &EventSchema) -> Result<Vec<AnnotatedSentence>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_sentences(&text, schema).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.as_ref().display())),
        other => other,
    })
}

pub fn sentences_to_jsonl(sentences: &[AnnotatedSentence]) -> Result<String> {
    let mut out = String::new();
    for s in sentences {
        let line = serde_json::to_string(s).map_err(|e| Error::json("sentence", e))?;
        writeln!(out, "{line}").expect("writing to a String");
    }
    Ok(out)
}

pub fn write_sentences(sentences: &[AnnotatedSentence], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), sentences_to_jsonl(sentences)?).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(dir: impl AsRef<Path>, schema: &EventSchema) -> Result<CorpusSplit> {
    let dir = dir.as_ref();
    let split = CorpusSplit {
        train: read_sentences(dir.join("train.jsonl"), schema)?,
        dev: read_sentences(dir.join("dev.jsonl"), schema)?,
        test: read_sentences(dir.join("test.jsonl"), schema)?,
    };
    split.validate(schema)?;
    Ok(split)
}

pub fn write_corpus(split: &CorpusSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, part) in split.parts() {
        write_sentences(part, dir.join(format!("{name}.jsonl")))?;
    }
    Ok(())
}
