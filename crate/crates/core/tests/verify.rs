//! Acceptance checks, one PASS/FAIL line each. Tolerances are the constants
//! below. Runs the full training protocol, so expect tens of minutes on one
//! core.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evdet_core::autodiff::{Tape, Tensor};
use evdet_core::classifier::assemble_input;
use evdet_core::corpus::{default_schema, generate_synthetic, AnnotatedSentence, EventSchema, EventType, SyntheticConfig, TriggerSpan};
use evdet_core::eval::{score, Prediction};
use evdet_core::experiments::{median, run_variant, RunResult, Variant};
use evdet_core::gradsuite::run_suite;
use evdet_core::lsl::{gumbel_noise, gumbel_softmax_select, shuffle_labels_seeded, LslMode};
use evdet_core::model::{Ablation, EventDetector, ModelConfig};
use evdet_core::text::Vocabulary;
use evdet_core::train::TrainConfig;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GUMBEL_SAMPLES: usize = 100_000;
const GUMBEL_TV: f64 = 0.02;
const LOW_TAU: f64 = 0.01;
const LOW_TAU_MAX: f64 = 0.999;
/// Smallest gap between the top two perturbed logits for a "distinct" case.
const DISTINCT_GAP: f64 = 0.1;
const PARTITION_TOL: f64 = 1e-9;
const FUZZ_CASES: usize = 1000;
const E2E_F1: f64 = 0.90;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const E2E_EPOCHS: usize = 50;
const SCARCE: f64 = 0.2;
const FULL_DATA: f64 = 1.0;
const ABLATION_MARGIN: f64 = 0.02;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradients() -> Outcome {
    let report = run_suite(GRAD_INSTANCES, 0, GRAD_TOL).expect("suite runs");
    let worst = report.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed: Vec<&str> = report.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
    let min_inst = report.groups.iter().map(|g| g.instances).min().unwrap_or(0);
    outcome(
        report.passed() && min_inst >= GRAD_INSTANCES,
        format!(
            "{} groups x {min_inst}+ instances, worst {} at {:.2e} (tol {GRAD_TOL:.0e}); failed: {failed:?}",
            report.groups.len(),
            worst.name,
            worst.max_rel_err
        ),
    )
}

fn gumbel_oracle() -> Outcome {
    let p = [0.0, 2f64.ln(), 3f64.ln()];
    let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    for _ in 0..GUMBEL_SAMPLES {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Tensor::from_f64([1, 3], &p).unwrap());
        let g: Tensor<f64> = gumbel_noise(&[1, 3], &mut rng);
        let s = gumbel_softmax_select(&mut tape, logits, 1.0, Some(&g), LslMode::StraightThrough).unwrap();
        counts[s.hard[0]] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / GUMBEL_SAMPLES as f64).collect();
    let tv = 0.5 * freq.iter().zip(want).map(|(f, w)| (f - w).abs()).sum::<f64>();
    outcome(
        tv <= GUMBEL_TV,
        format!("frequencies {:.4?}, total variation {tv:.4} (tol {GUMBEL_TV})", freq),
    )
}

fn gumbel_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_max = f64::INFINITY;
    let mut cases = 0;
    let mut st_exact = true;
    while cases < 200 {
        let n = rng.gen_range(2..10);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g: Tensor<f64> = gumbel_noise(&[1, n], &mut rng);
        let mut z: Vec<f64> = p.iter().zip(g.data()).map(|(a, b)| a + b).collect();
        z.sort_by(|a, b| b.total_cmp(a));
        if z[0] - z[1] < DISTINCT_GAP {
            continue;
        }
        cases += 1;
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Tensor::from_f64([1, n], &p).unwrap());
        let soft = gumbel_softmax_select(&mut tape, logits, LOW_TAU, Some(&g), LslMode::Soft).unwrap();
        let top = tape.value(soft.output).data().iter().cloned().fold(0.0, f64::max);
        min_max = min_max.min(top);

        let tau = rng.gen_range(0.05..5.0);
        let st = gumbel_softmax_select(&mut tape, logits, tau, Some(&g), LslMode::StraightThrough).unwrap();
        let out = tape.value(st.output).data();
        let one_hot = out.iter().enumerate().all(|(i, &x)| x == if i == st.hard[0] { 1.0 } else { 0.0 });
        st_exact &= one_hot;
    }
    outcome(
        min_max > LOW_TAU_MAX && st_exact,
        format!("{cases} cases: min soft max at tau {LOW_TAU} = {min_max:.6} (need > {LOW_TAU_MAX}); straight-through exactly one-hot: {st_exact}"),
    )
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(3..8)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn random_schema(rng: &mut ChaCha8Rng) -> EventSchema {
    let n = rng.gen_range(1..9);
    let mut used = BTreeSet::new();
    let types = (0..n)
        .map(|k| {
            let words: Vec<String> = (0..rng.gen_range(1..4))
                .map(|_| loop {
                    let w = random_word(rng);
                    if used.insert(w.clone()) {
                        break w;
                    }
                })
                .collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            EventType::new(&format!("Type{k}"), &refs)
        })
        .collect();
    EventSchema::new(types).unwrap()
}

fn small_model_config() -> ModelConfig {
    let mut c = ModelConfig {
        d_model: 16,
        d_ff: 32,
        ..ModelConfig::default()
    };
    c.lsl.layers = 1;
    c.lsl.heads = 2;
    c.tc.layers = 2;
    c.tc.heads = 2;
    c
}

fn structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut length_ok = 0;
    for i in 0..100 {
        let schema = random_schema(&mut rng);
        let corpus: Vec<Vec<String>> = (0..3).map(|_| (0..6).map(|_| random_word(&mut rng)).collect()).collect();
        let vocab = Vocabulary::build(&corpus, &schema, 1);
        let model = EventDetector::new(schema.clone(), vocab, small_model_config(), Ablation::default()).unwrap();
        let store = model.init_params::<f64>(i);
        let labels = shuffle_labels_seeded(&model.schema, &model.vocab, i);
        let pivots = model.pivot_tokens(&store, &labels).unwrap();
        if pivots.len() == labels.len() && labels.len() == schema.label_word_count() {
            length_ok += 1;
        }
    }

    let mut layout_ok = 0;
    for _ in 0..100 {
        let n_s = rng.gen_range(1..40);
        let n_l = rng.gen_range(1..12);
        let sentence: Vec<usize> = (0..n_s).map(|_| rng.gen_range(4..100)).collect();
        let input = assemble_input(&sentence, n_l, None).unwrap();
        let mut want = vec![0];
        want.extend(std::iter::repeat_n(1, n_l));
        want.push(0);
        want.extend(std::iter::repeat_n(0, n_s));
        want.push(1);
        if input.len() == n_s + n_l + 3 && input.segments == want {
            layout_ok += 1;
        }
    }

    let schema = default_schema(5);
    let data = generate_synthetic(
        &schema,
        &SyntheticConfig {
            sents_per_split: [40, 10, 10],
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let vocab = Vocabulary::build(&data.train, &schema, 1);
    let mut partition_err: f64 = 0.0;
    let mut heads = 0;
    for (seed, config) in [(0, small_model_config()), (1, ModelConfig::default())] {
        let model = EventDetector::new(schema.clone(), vocab.clone(), config, Ablation::default()).unwrap();
        let store = model.init_params::<f64>(seed);
        let labels = model.eval_labels(seed);
        for mask in [false, true] {
            let r = model.attention_report(&store, &data.train[..8], &labels, mask).unwrap();
            heads += r.heads.len();
            for h in &r.heads {
                partition_err = partition_err.max(h.max_partition_error);
            }
        }
    }
    outcome(
        length_ok == 100 && layout_ok == 100 && heads > 0 && partition_err <= PARTITION_TOL,
        format!(
            "pivot length {length_ok}/100, layout {layout_ok}/100, attention partition max err {partition_err:.1e} over {heads} heads (tol {PARTITION_TOL:.0e})"
        ),
    )
}

type Tuple = (String, String, usize, usize, String);

fn tuples<'a>(items: impl Iterator<Item = (&'a str, &'a str, &'a [TriggerSpan])>) -> BTreeSet<Tuple> {
    let mut out = BTreeSet::new();
    for (d, s, spans) in items {
        for t in spans {
            out.insert((d.to_string(), s.to_string(), t.start, t.end, t.type_name.clone()));
        }
    }
    out
}

fn scorer_oracle() -> Outcome {
    let types = ["Attack", "Die", "Meet", "Injure"];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    let mut total_gold = 0;
    for _ in 0..FUZZ_CASES {
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        for i in 0..rng.gen_range(1..8) {
            let doc = format!("d{}", i % 3);
            let id = format!("s{i}");
            let n = rng.gen_range(1..10);
            let mut triggers = Vec::new();
            let mut pos = 0;
            while pos < n {
                let len = rng.gen_range(1..=3).min(n - pos);
                if rng.gen_bool(0.35) {
                    triggers.push(TriggerSpan::new(pos, pos + len - 1, types[rng.gen_range(0..4)]));
                }
                pos += len;
            }
            let mut p: Vec<TriggerSpan> = triggers.iter().filter(|_| rng.gen_bool(0.6)).cloned().collect();
            for _ in 0..rng.gen_range(0..3) {
                let s = rng.gen_range(0..n);
                let e = (s + rng.gen_range(0..3)).min(n - 1);
                p.push(TriggerSpan::new(s, e, types[rng.gen_range(0..4)]));
            }
            if rng.gen_bool(0.9) {
                preds.push(Prediction {
                    doc_id: doc.clone(),
                    sent_id: id.clone(),
                    triggers: p,
                });
            }
            gold.push(AnnotatedSentence {
                doc_id: doc,
                sent_id: id,
                tokens: vec!["w".into(); n],
                triggers,
            });
        }
        let g = tuples(gold.iter().map(|s| (s.doc_id.as_str(), s.sent_id.as_str(), s.triggers.as_slice())));
        let p = tuples(preds.iter().map(|s| (s.doc_id.as_str(), s.sent_id.as_str(), s.triggers.as_slice())));
        let r = score(&gold, &preds).unwrap();
        total_gold += g.len();
        if r.all.gold != g.len() || r.all.predicted != p.len() || r.all.correct != g.intersection(&p).count() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{FUZZ_CASES} fuzzed cases ({total_gold} gold triggers), {mismatches} count mismatches"),
    )
}

struct Protocol {
    split: evdet_core::corpus::CorpusSplit,
    schema: EventSchema,
    base: TrainConfig,
    runs: Vec<(RunResult, Duration)>,
}

impl Protocol {
    fn new() -> Self {
        let schema = default_schema(5);
        let split = generate_synthetic(&schema, &SyntheticConfig::default()).unwrap();
        Protocol {
            split,
            schema,
            base: TrainConfig::default(),
            runs: Vec::new(),
        }
    }

    fn train(&self, variant: Variant, fraction: f64, seed: u64) -> (RunResult, Duration) {
        let t0 = Instant::now();
        let r = run_variant::<f32>(&self.split, &self.schema, &self.base, variant, fraction, seed, |_| {}).unwrap();
        let took = t0.elapsed();
        eprintln!(
            "  trained {:<10} fraction {fraction:.1} seed {seed}: test F1 {:.4}, {} epochs, {:.0}s",
            variant.name(),
            r.test.all.f1,
            r.log.epochs.len(),
            took.as_secs_f64()
        );
        (r, took)
    }

    fn run(&mut self, variant: Variant, fraction: f64, seed: u64) -> &(RunResult, Duration) {
        let found = self
            .runs
            .iter()
            .position(|(r, _)| r.variant == variant && r.fraction == fraction && r.seed == seed);
        let i = match found {
            Some(i) => i,
            None => {
                let r = self.train(variant, fraction, seed);
                self.runs.push(r);
                self.runs.len() - 1
            }
        };
        &self.runs[i]
    }

    fn median_f1(&mut self, variant: Variant, fraction: f64) -> f64 {
        let f1: Vec<f64> = SEEDS.iter().map(|&s| self.run(variant, fraction, s).0.test.all.f1).collect();
        median(&f1)
    }
}

fn end_to_end(p: &mut Protocol) -> Outcome {
    let (r, took) = p.run(Variant::Full, FULL_DATA, SEEDS[0]);
    let epochs = r.log.epochs.len();
    outcome(
        r.test.all.f1 >= E2E_F1 && *took <= E2E_BUDGET && epochs <= E2E_EPOCHS,
        format!(
            "test F1 {:.4} (need {E2E_F1}), {epochs} epochs, {:.0}s (budget {}s)",
            r.test.all.f1,
            took.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    )
}

fn ablation(p: &mut Protocol) -> Outcome {
    let full = p.median_f1(Variant::Full, SCARCE);
    let bypass = p.median_f1(Variant::BypassLsl, SCARCE);
    let none = p.median_f1(Variant::NoLabels, SCARCE);
    let gap = full - none;
    outcome(
        gap >= ABLATION_MARGIN,
        format!(
            "median F1 at {SCARCE}: full {full:.4}, bypass_lsl {bypass:.4}, no_labels {none:.4}; full - no_labels = {:+.2} points (need >= {:.0}); full >= bypass >= no_labels: {}",
            100.0 * gap,
            100.0 * ABLATION_MARGIN,
            full >= bypass && bypass >= none
        ),
    )
}

fn scarcity(p: &mut Protocol) -> Outcome {
    let full = (p.median_f1(Variant::Full, SCARCE), p.median_f1(Variant::Full, FULL_DATA));
    let none = (p.median_f1(Variant::NoLabels, SCARCE), p.median_f1(Variant::NoLabels, FULL_DATA));
    let (drop_full, drop_none) = (full.1 - full.0, none.1 - none.0);
    outcome(
        full.0 < full.1 && none.0 < none.1 && drop_full < drop_none,
        format!(
            "full {:.4} -> {:.4} (drop {:.4}); no_labels {:.4} -> {:.4} (drop {:.4})",
            full.0, full.1, drop_full, none.0, none.1, drop_none
        ),
    )
}

fn determinism(p: &mut Protocol) -> Outcome {
    let first = p.run(Variant::Full, SCARCE, SEEDS[0]).0.clone();
    let (again, _) = p.train(Variant::Full, SCARCE, SEEDS[0]);
    let logs = first.log.to_json().unwrap() == again.log.to_json().unwrap();
    let reports = serde_json::to_string(&first.test).unwrap() == serde_json::to_string(&again.test).unwrap();
    outcome(
        logs && reports,
        format!("repeat of full/{SCARCE}/seed {}: TrainLog identical {logs}, EvalReport identical {reports}", SEEDS[0]),
    )
}

fn main() -> ExitCode {
    let quick: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient integrity", gradients),
        ("2 gumbel-max oracle", gumbel_oracle),
        ("3 gumbel limit behaviour", gumbel_limit),
        ("4 structural contracts", structure),
        ("5 scorer oracle", scorer_oracle),
    ];
    let slow: Vec<(&str, fn(&mut Protocol) -> Outcome)> = vec![
        ("6 end-to-end learning", end_to_end),
        ("7 ablation direction", ablation),
        ("8 scarce-data direction", scarcity),
        ("9 determinism", determinism),
    ];
    let mut failed = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(name.to_string());
        }
    };
    for (name, f) in quick {
        report(name, f());
    }
    let mut protocol = Protocol::new();
    for (name, f) in slow {
        report(name, f(&mut protocol));
    }
    println!("{} of 9 criteria passed", 9 - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
