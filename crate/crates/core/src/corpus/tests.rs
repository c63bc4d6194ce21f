use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        sents_per_split: [400, 60, 60],
        seed,
        ..SyntheticConfig::default()
    }
}

fn sentence(doc: &str, sent: &str, n_tokens: usize, triggers: Vec<TriggerSpan>) -> AnnotatedSentence {
    AnnotatedSentence {
        doc_id: doc.into(),
        sent_id: sent.into(),
        tokens: (0..n_tokens).map(|i| format!("w{i}")).collect(),
        triggers,
    }
}

#[test]
fn default_schema_concatenates_label_words() {
    let schema = default_schema(5);
    let words: Vec<&str> = schema.label_words().collect();
    assert_eq!(words, ["attack", "injure", "die", "end", "position", "transfer", "money"]);
    assert_eq!(schema.label_word_count(), 7);
    assert_eq!(default_schema(10).len(), 10);
}

#[test]
fn schema_rejects_duplicates_and_empty_labels() {
    assert!(EventSchema::new(vec![EventType::new("A", &["a"]), EventType::new("A", &["b"])]).is_err());
    assert!(EventSchema::new(vec![EventType::new("A", &[])]).is_err());
    assert!(EventSchema::new(vec![EventType::new("A", &["two words"])]).is_err());
    assert!(EventSchema::new(vec![]).is_err());
    let json = r#"{"types":[{"name":"Attack","label_words":["attack"]}]}"#;
    let s: EventSchema = serde_json::from_str(json).unwrap();
    assert_eq!(serde_json::to_string(&s).unwrap(), json);
}

#[test]
fn generation_is_deterministic() {
    let schema = default_schema(5);
    let a = generate_synthetic(&schema, &small_config(3)).unwrap();
    let b = generate_synthetic(&schema, &small_config(3)).unwrap();
    assert_eq!(sentences_to_jsonl(&a.train).unwrap(), sentences_to_jsonl(&b.train).unwrap());
    assert_eq!(sentences_to_jsonl(&a.test).unwrap(), sentences_to_jsonl(&b.test).unwrap());
    let c = generate_synthetic(&schema, &small_config(4)).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn generated_corpus_is_valid_and_sized() {
    let schema = default_schema(5);
    let split = generate_synthetic(&schema, &small_config(1)).unwrap();
    split.validate(&schema).unwrap();
    assert_eq!(split.train.len(), 400);
    assert_eq!(split.dev.len(), 60);
    assert_eq!(split.test.len(), 60);
    for s in split.train.iter() {
        for t in &s.tokens {
            assert!(t.chars().all(char::is_alphanumeric) || t.len() == 1, "{t}");
        }
    }
}

#[test]
fn zero_multi_event_fraction_gives_single_triggers() {
    let schema = default_schema(5);
    let cfg = SyntheticConfig {
        multi_event_fraction: 0.0,
        ..small_config(2)
    };
    let split = generate_synthetic(&schema, &cfg).unwrap();
    for (_, part) in split.parts() {
        for s in part {
            assert!(s.triggers.len() <= 1);
        }
    }
}

#[test]
fn trigger_histogram_matches_declared_fractions() {
    let schema = default_schema(5);
    let cfg = SyntheticConfig::default();
    let split = generate_synthetic(&schema, &cfg).unwrap();
    let all: Vec<&AnnotatedSentence> = split.parts().iter().flat_map(|(_, p)| p.iter()).collect();
    let n = all.len() as f64;
    let eventless = all.iter().filter(|s| s.triggers.is_empty()).count() as f64 / n;
    let multi = all.iter().filter(|s| s.triggers.len() >= 2).count() as f64 / n;
    // 2600 sentences: one binomial standard deviation is below 0.01.
    assert!((eventless - cfg.distractor_fraction).abs() < 0.03, "eventless {eventless}");
    assert!((multi - cfg.multi_event_fraction).abs() < 0.03, "multi {multi}");
}

#[test]
fn config_errors_are_listed() {
    let schema = default_schema(5);
    let bad = SyntheticConfig {
        n_types: 1,
        multi_event_fraction: 0.8,
        distractor_fraction: 0.5,
        ambiguous_fraction: 1.5,
        trigger_lexicon_size: 0,
        ..SyntheticConfig::default()
    };
    match generate_synthetic(&schema, &bad) {
        Err(Error::Config(errs)) => assert!(errs.len() >= 5, "{errs:?}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn lexicon_triggers_are_disjoint_from_context_words() {
    let schema = default_schema(8);
    let lex = SyntheticLexicon::build(&schema, 6);
    let mut seen = BTreeSet::new();
    for lexicon in &lex.triggers {
        assert_eq!(lexicon.len(), 6);
        for w in lexicon {
            assert!(seen.insert(w.clone()), "{w} shared");
        }
    }
    for w in lex.agents.iter().chain(&lex.patients).flatten() {
        assert!(!seen.contains(w), "{w}");
    }
    assert!(lex.triggers[0].contains(&"went off".to_string()));
    assert!(lex.triggers[1].contains(&"injuring".to_string()));
    assert_eq!(lex.types_of("fired"), vec![0, 3]);
}

#[test]
fn pseudo_words_fill_unknown_types() {
    let schema = EventSchema::new(vec![
        EventType::new("Foo", &["foo"]),
        EventType::new("Bar", &["bar"]),
    ])
    .unwrap();
    let lex = SyntheticLexicon::build(&schema, 4);
    assert_eq!(lex.ambiguous.len(), 1);
    assert_eq!(lex.triggers[0][0], "foo");
    let cfg = SyntheticConfig {
        n_types: 2,
        trigger_lexicon_size: 4,
        ..small_config(0)
    };
    generate_synthetic(&schema, &cfg).unwrap().validate(&schema).unwrap();
}

/// Greedy longest-match lookup; ambiguous words resolve to their first type.
fn bag_of_words_oracle(lex: &SyntheticLexicon, schema: &EventSchema, tokens: &[String]) -> Vec<TriggerSpan> {
    let phrases: Vec<Vec<String>> = lex
        .phrases()
        .iter()
        .map(|p| p.split(' ').map(str::to_string).collect())
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = phrases.iter().find(|p| tokens[i..].starts_with(p));
        match hit {
            Some(p) => {
                let ty = lex.types_of(&p.join(" "))[0];
                out.push(TriggerSpan::new(i, i + p.len() - 1, &schema.types()[ty].name));
                i += p.len();
            }
            None => i += 1,
        }
    }
    out
}

#[test]
fn bag_of_words_oracle_separates_ambiguous_triggers() {
    let schema = default_schema(5);
    let cfg = SyntheticConfig::default();
    let split = generate_synthetic(&schema, &cfg).unwrap();
    let lex = SyntheticLexicon::build(&schema, cfg.trigger_lexicon_size);
    // [tp, pred, gold] for unambiguous and ambiguous trigger words.
    let mut counts = [[0usize; 3]; 2];
    for s in &split.test {
        let pred = bag_of_words_oracle(&lex, &schema, &s.tokens);
        let class = |t: &TriggerSpan| {
            let phrase = s.tokens[t.start..=t.end].join(" ");
            usize::from(lex.types_of(&phrase).len() > 1)
        };
        for p in &pred {
            counts[class(p)][1] += 1;
            if s.triggers.contains(p) {
                counts[class(p)][0] += 1;
            }
        }
        for g in &s.triggers {
            counts[class(g)][2] += 1;
        }
    }
    let f1 = |[tp, p, g]: [usize; 3]| 2.0 * tp as f64 / (p + g) as f64;
    assert!(counts[1][2] > 20, "too few ambiguous triggers: {counts:?}");
    assert!(f1(counts[0]) >= 0.95, "unambiguous F1 {}", f1(counts[0]));
    assert!(f1(counts[1]) <= 0.70, "ambiguous F1 {}", f1(counts[1]));
}

#[test]
fn hand_written_file_parses_two_spans() {
    let schema = default_schema(5);
    let line = r#"{"doc_id":"d1","sent_id":"d1-00","tokens":["the","bomb","went","off","in","the","market",",","injuring","12","people","."],"triggers":[{"start":2,"end":3,"type":"Attack"},{"start":8,"end":8,"type":"Injure"}]}"#;
    let parsed = parse_sentences(line, &schema).unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(
        parsed[0].triggers,
        vec![TriggerSpan::new(2, 3, "Attack"), TriggerSpan::new(8, 8, "Injure")]
    );
}

#[test]
fn end_before_start_names_sentence() {
    let schema = default_schema(5);
    let text = concat!(
        r#"{"doc_id":"d1","sent_id":"d1-00","tokens":["a","b"],"triggers":[]}"#,
        "\n",
        r#"{"doc_id":"d1","sent_id":"d1-07","tokens":["a","b","c"],"triggers":[{"start":2,"end":1,"type":"Attack"}]}"#,
        "\nnot json\n"
    );
    let err = parse_sentences(text, &schema).unwrap_err().to_string();
    assert!(err.contains("d1-07"), "{err}");
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn validation_rejects_bad_spans() {
    let schema = default_schema(5);
    let oob = sentence("d", "s", 2, vec![TriggerSpan::new(1, 2, "Attack")]);
    assert!(oob.validate(&schema).is_err());
    let unknown = sentence("d", "s", 3, vec![TriggerSpan::new(0, 0, "Wedding")]);
    assert!(unknown.validate(&schema).unwrap_err().to_string().contains("Wedding"));
    let overlap = sentence(
        "d",
        "s",
        5,
        vec![TriggerSpan::new(0, 2, "Attack"), TriggerSpan::new(2, 3, "Die")],
    );
    assert!(overlap.validate(&schema).is_err());
}

#[test]
fn split_documents_must_be_disjoint() {
    let schema = default_schema(5);
    let split = CorpusSplit {
        train: vec![sentence("d1", "a", 2, vec![])],
        dev: vec![sentence("d1", "b", 2, vec![])],
        test: vec![],
    };
    assert!(split.validate(&schema).is_err());
}

#[test]
fn corpus_round_trips_through_files() {
    let schema = default_schema(5);
    let split = generate_synthetic(&schema, &small_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&split, dir.path()).unwrap();
    write_schema(&schema, dir.path().join("schema.json")).unwrap();
    let schema2 = read_schema(dir.path().join("schema.json")).unwrap();
    assert_eq!(schema, schema2);
    let back = read_corpus(dir.path(), &schema2).unwrap();
    assert_eq!(back, split);
}

fn ten_doc_split() -> CorpusSplit {
    let sizes = [3, 7, 2, 5, 4, 6, 1, 8, 3, 5];
    let mut train = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            train.push(sentence(&format!("doc{d}"), &format!("doc{d}-{k}"), 3, vec![]));
        }
    }
    CorpusSplit {
        train,
        dev: vec![sentence("dev0", "dev0-0", 3, vec![])],
        test: vec![],
    }
}

#[test]
fn subsample_full_fraction_is_identity() {
    let split = ten_doc_split();
    assert_eq!(split.subsample_training(1.0, 9).unwrap(), split);
    assert!(split.subsample_training(0.0, 9).is_err());
    assert!(split.subsample_training(1.5, 9).is_err());
}

#[test]
fn subsample_half_is_minimal_over_documents() {
    let split = ten_doc_split();
    let total = split.train.len();
    for seed in 0..20 {
        let sub = split.subsample_training(0.5, seed).unwrap();
        assert!(2 * sub.train.len() >= total);
        let docs = documents(&sub.train);
        // Dropping the last document taken falls below half, so dropping
        // the largest one does too.
        let largest = docs.iter().map(|d| d.1.len()).max().unwrap();
        assert!(2 * (sub.train.len() - largest) < total, "seed {seed}: not minimal");
        for (doc, idx) in docs {
            let full = split.train.iter().filter(|s| s.doc_id == doc).count();
            assert_eq!(idx.len(), full, "document {doc} was split");
        }
        assert_eq!(sub.dev, split.dev);
    }
}

#[test]
fn subsamples_are_nested() {
    let schema = default_schema(5);
    let split = generate_synthetic(&schema, &small_config(6)).unwrap();
    let ids = |f: f64| -> BTreeSet<String> {
        split
            .subsample_training(f, 11)
            .unwrap()
            .train
            .into_iter()
            .map(|s| s.sent_id)
            .collect()
    };
    let a = ids(0.2);
    let b = ids(0.4);
    let c = ids(0.8);
    assert!(a.is_subset(&b) && b.is_subset(&c));
    assert!(a.len() < b.len());
}

#[test]
fn filter_eventful_keeps_eventful_only() {
    let all_eventful = CorpusSplit {
        train: vec![sentence("d", "s", 2, vec![TriggerSpan::new(0, 0, "Die")])],
        dev: vec![],
        test: vec![],
    };
    assert_eq!(all_eventful.filter_eventful(), all_eventful);

    let schema = default_schema(5);
    let split = generate_synthetic(&schema, &SyntheticConfig::default()).unwrap();
    let kept = split.filter_eventful();
    let ratio = kept.train.len() as f64 / split.train.len() as f64;
    assert!((ratio - 0.75).abs() < 0.03, "retained {ratio}");
    assert!(kept.train.iter().all(AnnotatedSentence::is_eventful));
}

proptest! {
    #[test]
    fn subsample_never_splits_documents(fraction in 0.05f64..1.0, seed in 0u64..1000) {
        let split = ten_doc_split();
        let sub = split.subsample_training(fraction, seed).unwrap();
        prop_assert!(sub.train.len() as f64 >= fraction * split.train.len() as f64);
        for (doc, idx) in documents(&sub.train) {
            let full = split.train.iter().filter(|s| s.doc_id == doc).count();
            prop_assert_eq!(idx.len(), full);
        }
    }
}
