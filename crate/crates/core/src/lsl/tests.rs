use std::collections::BTreeMap;

use super::*;
use crate::autodiff::ParamStore;
use crate::corpus::{default_schema, EventType};

fn vocab_for(schema: &EventSchema) -> Vocabulary {
    let sents: Vec<Vec<String>> = vec![vec!["the".into(), "bombed".into()]];
    Vocabulary::build(&sents, schema, 1)
}

#[test]
fn one_type_shuffle_is_identity() {
    let schema = EventSchema::new(vec![EventType::new("End-Position", &["end", "position"])]).unwrap();
    let vocab = vocab_for(&schema);
    for seed in 0..5 {
        let l = shuffle_labels_seeded(&schema, &vocab, seed);
        assert_eq!(l, LabelSequence::canonical(&schema, &vocab));
    }
}

#[test]
fn shuffle_is_reproducible_and_keeps_groups() {
    let schema = default_schema(5);
    let vocab = vocab_for(&schema);
    let a = shuffle_labels_seeded(&schema, &vocab, 42);
    assert_eq!(a, shuffle_labels_seeded(&schema, &vocab, 42));
    let mut sorted = a.ids.clone();
    sorted.sort();
    let mut canon = LabelSequence::canonical(&schema, &vocab).ids;
    canon.sort();
    assert_eq!(sorted, canon);
    let end = vocab.id("end");
    let pos = a.ids.iter().position(|&i| i == end).unwrap();
    assert_eq!(a.ids[pos + 1], vocab.id("position"));
    let slots = a.canonical_slots(&schema);
    let canonical = LabelSequence::canonical(&schema, &vocab);
    for (i, &s) in slots.iter().enumerate() {
        assert_eq!(a.ids[i], canonical.ids[s]);
    }
}

#[test]
fn shuffle_first_type_is_uniform() {
    let schema = default_schema(5);
    let vocab = vocab_for(&schema);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut first = [0usize; 5];
    for _ in 0..10_000 {
        first[shuffle_labels(&schema, &vocab, &mut rng).type_order[0]] += 1;
    }
    // Binomial(10000, 0.2) has standard deviation 40, so ±150 is > 3.7σ.
    for c in first {
        assert!((c as i64 - 2000).abs() <= 150, "{first:?}");
    }
    let chi2: f64 = first.iter().map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0).sum();
    // 99.9th percentile of chi-square with 4 degrees of freedom.
    assert!(chi2 < 18.47, "chi2 {chi2}");
}

#[test]
fn gumbel_known_values() {
    // -ln(ln 2) evaluated to full precision.
    assert!((gumbel(0.5) - 0.366_512_920_581_664_3).abs() < 1e-15);
    assert!(gumbel((-1.0f64).exp()).abs() < 1e-15);
    assert!(gumbel(0.0).is_finite() && gumbel(1.0).is_finite());
}

#[test]
fn gumbel_mean_is_euler_mascheroni() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Tensor<f64> = gumbel_noise(&[1_000_000], &mut rng);
    let mean = noise.data().iter().sum::<f64>() / 1e6;
    assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
}

fn select(p: &[f64], tau: f64, noise: Option<&[f64]>, mode: LslMode) -> (Vec<f64>, Vec<f64>, usize) {
    let mut tape = Tape::new();
    let n = p.len();
    let logits = tape.constant(Tensor::from_f64([1, n], p).unwrap());
    let noise = noise.map(|g| Tensor::from_f64([1, n], g).unwrap());
    let s = gumbel_softmax_select(&mut tape, logits, tau, noise.as_ref(), mode).unwrap();
    (
        tape.value(s.soft).data().to_vec(),
        tape.value(s.output).data().to_vec(),
        s.hard[0],
    )
}

#[test]
fn temperature_never_moves_zero_noise_argmax() {
    let p = [0.3, -1.0, 2.5, 2.4];
    for tau in [0.01, 0.1, 1.0, 10.0, 100.0] {
        let (soft, _, hard) = select(&p, tau, None, LslMode::Soft);
        assert_eq!(hard, 2);
        assert_eq!(Tensor::<f64>::from_f64([1, 4], &soft).unwrap().argmax_rows()[0], 2);
    }
}

#[test]
fn gumbel_max_frequencies_follow_softmax() {
    let p = [0.0, 2f64.ln(), 3f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        let g: Tensor<f64> = gumbel_noise(&[3], &mut rng);
        let z: Vec<f64> = p.iter().zip(g.data()).map(|(a, b)| a + b).collect();
        counts[crate::autodiff::argmax(&z)] += 1;
    }
    for (c, want) in counts.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((*c as f64 / 1e5 - want).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn low_temperature_is_nearly_one_hot() {
    let (soft, _, _) = select(&[10.0, 0.0], 0.1, Some(&[0.0, 0.0]), LslMode::Soft);
    // e^{-100}
    assert!((soft[1] / 3.720_075_976_020_836e-44 - 1.0).abs() < 1e-9, "{soft:?}");
    let (soft, _, _) = select(&[0.2, 0.5, -0.1], 0.01, Some(&[0.1, 0.0, 0.3]), LslMode::Soft);
    assert!(soft.iter().cloned().fold(0.0, f64::max) > 0.999);
}

#[test]
fn straight_through_forward_is_exact_one_hot() {
    let (soft, out, hard) = select(&[0.1, 0.4, 0.3], 1.0, Some(&[0.2, -0.5, 0.1]), LslMode::StraightThrough);
    assert_eq!(hard, 2);
    assert_eq!(out, vec![0.0, 0.0, 1.0]);
    assert!(soft[2] < 1.0);
}

#[test]
fn nonpositive_temperature_is_rejected() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(Tensor::zeros([1, 2]));
    for tau in [0.0, -1.0, f64::NAN] {
        assert!(gumbel_softmax_select(&mut tape, logits, tau, None, LslMode::Soft).is_err());
    }
}

fn small_learner(mode: LslMode, vocab: usize) -> (LabelSemanticLearner, Embeddings, ParamStore<f64>) {
    let config = LslConfig {
        layers: 1,
        heads: 2,
        tau: 0.5,
        mode,
        ..LslConfig::default()
    };
    let lsl = LabelSemanticLearner::new(config, 8, 12, vocab).unwrap();
    let mut emb = Embeddings::new("emb", vocab, 8);
    emb.max_len = 16;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    emb.init(&mut init);
    lsl.init(&mut init);
    (lsl, emb, store)
}

fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for x in store.get_mut(&n).unwrap().data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn untrained_eval_copies_labels_deterministically() {
    let schema = default_schema(8);
    let vocab = vocab_for(&schema);
    let (lsl, emb, store) = {
        let config = LslConfig::default();
        let lsl = LabelSemanticLearner::new(config, 64, 128, vocab.len()).unwrap();
        let emb = Embeddings::new("emb", vocab.len(), 64);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        emb.init(&mut init);
        lsl.init(&mut init);
        (lsl, emb, store)
    };
    let labels = shuffle_labels_seeded(&schema, &vocab, 3);
    assert_eq!(labels.len(), schema.label_word_count());
    let run = || {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, ChaCha8Rng::seed_from_u64(0));
        lsl.generate(&mut g, &emb, &labels).unwrap().hard
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), labels.len());
    assert_eq!(a, labels.ids);
}

#[test]
fn output_length_matches_input_for_any_schema() {
    let (lsl, emb, mut store) = small_learner(LslMode::StraightThrough, 12);
    perturb(&mut store, 4);
    for n in 1..=8 {
        let labels = LabelSequence {
            ids: (0..n).map(|i| 5 + i % 7).collect(),
            owners: vec![0; n],
            type_order: vec![0],
        };
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, ChaCha8Rng::seed_from_u64(n as u64));
        g.train = true;
        let p = lsl.generate(&mut g, &emb, &labels).unwrap();
        assert_eq!(p.len(), n);
        assert_eq!(g.tape.shape(p.output), &[n, 12]);
    }
}

/// Sum of pivot embeddings weighted by fixed random coefficients, standing
/// in for a downstream classifier loss.
fn surrogate_loss(g: &mut Graph<'_, '_, f64>, emb: &Embeddings, p: &PivotSequence) -> Result<Var> {
    let table = g.param(&emb.word)?;
    let rows = g.tape.soft_lookup(p.output, table)?;
    let shape = g.tape.shape(rows).to_vec();
    let w = Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(77));
    let w = g.tape.constant(w);
    let y = g.tape.mul(rows, w)?;
    g.tape.sum(y)
}

#[test]
fn soft_mode_gradient_matches_finite_difference() {
    let (lsl, emb, mut store) = small_learner(LslMode::Soft, 12);
    perturb(&mut store, 8);
    let labels = LabelSequence {
        ids: vec![5, 9, 7],
        owners: vec![0, 1, 1],
        type_order: vec![0, 1],
    };
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("lsl.") || *n == "emb.word")
        .map(str::to_string)
        .collect();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let fixed: BTreeMap<String, Tensor<f64>> = store
        .iter()
        .filter(|(n, _)| !names.iter().any(|m| m == n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let report = crate::autodiff::check_gradients(
        |tape, vars| {
            let mut bindings: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
            for (n, t) in &fixed {
                bindings.push((n.clone(), tape.constant(t.clone())));
            }
            let mut g = Graph::with_bindings(tape, bindings, ChaCha8Rng::seed_from_u64(1));
            g.train = true;
            let p = lsl.generate(&mut g, &emb, &labels)?;
            surrogate_loss(&mut g, &emb, &p)
        },
        &params,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{:?}", report.worst.first());
    assert!(report.checked > 1000);
}

#[test]
fn straight_through_reaches_encoder_weights() {
    let (lsl, emb, mut store) = small_learner(LslMode::StraightThrough, 12);
    perturb(&mut store, 9);
    let labels = LabelSequence {
        ids: vec![5, 9, 7, 6],
        owners: vec![0, 1, 1, 2],
        type_order: vec![0, 1, 2],
    };
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, ChaCha8Rng::seed_from_u64(2));
    g.train = true;
    let p = lsl.generate(&mut g, &emb, &labels).unwrap();
    let loss = surrogate_loss(&mut g, &emb, &p).unwrap();
    g.tape.backward(loss).unwrap();
    let grads = g.grads();
    let enc = &grads["lsl.encoder.0.attn.wq"];
    assert!(enc.iter().any(|&x| x != 0.0));
}

#[test]
fn bypass_returns_label_one_hots() {
    let (lsl, emb, store) = small_learner(LslMode::Bypass, 12);
    let labels = LabelSequence {
        ids: vec![5, 9],
        owners: vec![0, 1],
        type_order: vec![0, 1],
    };
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, ChaCha8Rng::seed_from_u64(2));
    g.train = true;
    let p = lsl.generate(&mut g, &emb, &labels).unwrap();
    assert_eq!(p.hard, vec![5, 9]);
    assert!(!g.tape.requires_grad(p.output));
    assert!(g.bound().keys().all(|k| !k.starts_with("lsl.")));
}

#[test]
fn mode_parses_from_config_strings() {
    assert_eq!("soft".parse::<LslMode>().unwrap(), LslMode::Soft);
    assert_eq!("bypass".parse::<LslMode>().unwrap(), LslMode::Bypass);
    assert!("hard".parse::<LslMode>().is_err());
    let c: LslConfig = serde_json::from_str(r#"{"mode":"straight_through","tau":0.5}"#).unwrap();
    assert_eq!(c.mode, LslMode::StraightThrough);
    assert_eq!(c.layers, 3);
}
