//! The standard finite-difference suite: every differentiable op and every
//! composed block, each on many randomized small instances in `f64`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, AttentionBlock, ParamStore, Tape, Tensor, Var};
use crate::classifier::{assemble_input, TriggerClassifier};
use crate::error::Result;
use crate::lsl::{gumbel_noise, gumbel_softmax_select, LabelSemanticLearner, LabelSequence, LslConfig, LslMode};
use crate::nn::{sequence_blocks, Embeddings, Graph, Init, MultiHeadAttention, TransformerLayer};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor<f64>>,
    build: Build,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Scalar readout with fixed, unequal weights on every element.
fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(x).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn random_blocks(rng: &mut ChaCha8Rng, nq: usize, nk: usize) -> Vec<AttentionBlock> {
    let (sq, sk) = (nq / 2, nk / 2);
    let mut blocks = Vec::new();
    for (q, k) in [(0..sq, 0..sk), (sq..nq, sk..nk)] {
        let mut mask: Vec<bool> = (0..q.len() * k.len()).map(|_| rng.gen_bool(0.7)).collect();
        for i in 0..q.len() {
            mask[i * k.len() + rng.gen_range(0..k.len())] = true;
        }
        blocks.push(AttentionBlock {
            query: q,
            key: k,
            mask: Some(mask),
        });
    }
    blocks
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(1..5);
    let n = rng.gen_range(2..5);
    let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..m)).collect();
    let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let heads = rng.gen_range(1..3);
    let nq = rng.gen_range(2..6);
    let nk = rng.gen_range(2..7);
    let blocks = random_blocks(rng, nq, nk);
    let r = rng.gen::<u64>();
    let c = |name, params, build: Build| Case { name, params, build };
    vec![
        c("matmul", vec![random(&[m, k], rng), random(&[k, n], rng)], Box::new(move |tp, p| {
            let y = tp.matmul(p[0], p[1])?;
            readout(tp, y, r)
        })),
        c("add", vec![random(&[m, k], rng), random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.add(p[0], p[1])?;
            readout(tp, y, r)
        })),
        c("sub", vec![random(&[m, k], rng), random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.sub(p[0], p[1])?;
            readout(tp, y, r)
        })),
        c("mul", vec![random(&[m, k], rng), random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.mul(p[0], p[1])?;
            readout(tp, y, r)
        })),
        c("add_bias", vec![random(&[m, k], rng), random(&[k], rng)], Box::new(move |tp, p| {
            let y = tp.add_bias(p[0], p[1])?;
            readout(tp, y, r)
        })),
        c("scale", vec![random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.scale(p[0], -1.7)?;
            readout(tp, y, r)
        })),
        c("relu", vec![random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.relu(p[0])?;
            readout(tp, y, r)
        })),
        c("softmax", vec![random(&[m, n], rng)], Box::new(move |tp, p| {
            let y = tp.softmax(p[0])?;
            readout(tp, y, r)
        })),
        c("softmax_axis", vec![random(&[m, n, 2], rng)], Box::new(move |tp, p| {
            let y = tp.softmax_axis(p[0], 1)?;
            readout(tp, y, r)
        })),
        c("layer_norm", vec![random(&[m, n], rng), random(&[n], rng), random(&[n], rng)], Box::new(move |tp, p| {
            let y = tp.layer_norm(p[0], p[1], p[2], 1e-5)?;
            readout(tp, y, r)
        })),
        c("select_rows", vec![random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.select_rows(p[0], &ids)?;
            readout(tp, y, r)
        })),
        c("soft_lookup", vec![random(&[m, n], rng), random(&[n, k], rng)], Box::new(move |tp, p| {
            let d = tp.softmax(p[0])?;
            let y = tp.soft_lookup(d, p[1])?;
            readout(tp, y, r)
        })),
        c("concat_slice", vec![random(&[m, k], rng), random(&[2, k], rng)], Box::new(move |tp, p| {
            let y = tp.concat_rows(&[p[0], p[1], p[0]])?;
            let rows = tp.value(y).rows();
            let y = tp.slice_rows(y, 1..rows)?;
            readout(tp, y, r)
        })),
        c("transpose_reshape", vec![random(&[m, k], rng)], Box::new(move |tp, p| {
            let y = tp.transpose(p[0])?;
            let len = tp.value(y).len();
            let y = tp.reshape(y, &[len])?;
            readout(tp, y, r)
        })),
        c("sum", vec![random(&[m, k], rng)], Box::new(|tp, p| {
            let y = tp.mul(p[0], p[0])?;
            tp.sum(y)
        })),
        c("mean", vec![random(&[m, k], rng)], Box::new(|tp, p| {
            let y = tp.mul(p[0], p[0])?;
            tp.mean(y)
        })),
        c("cross_entropy", vec![random(&[m, n], rng)], {
            let targets = targets.clone();
            Box::new(move |tp, p| tp.cross_entropy(p[0], &targets, None))
        }),
        c("cross_entropy_weighted", vec![random(&[m, n], rng)], Box::new(move |tp, p| {
            tp.cross_entropy(p[0], &targets, Some(&weights))
        })),
        c("attention", vec![random(&[nq, 2 * heads], rng), random(&[nk, 2 * heads], rng), random(&[nk, 2 * heads], rng)], Box::new(move |tp, p| {
            let y = tp.attention(p[0], p[1], p[2], heads, blocks.clone())?;
            readout(tp, y, r)
        })),
    ]
}

/// Initializes with `init_fn`, then jitters every value so that zero-initialized
/// outputs do not hide gradient paths.
fn jittered_store(seed: u64, init_fn: impl FnOnce(&mut Init<'_, f64, ChaCha8Rng>)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_fn(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for x in store.get_mut(&n).expect("listed name").data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    store
}

fn store_params(store: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

fn block_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let seed = rng.gen::<u64>();
    let heads = rng.gen_range(1..3);
    let d = 2 * heads * rng.gen_range(1..3);
    let d_ff = rng.gen_range(3..9);
    let lens: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..4)).collect();
    let total: usize = lens.iter().sum();
    let mem_len = rng.gen_range(1..4);
    let mut cases = Vec::new();

    let mha = MultiHeadAttention::new("mha", d, heads).expect("heads divide width");
    let store = jittered_store(seed, |i| mha.init(i, false));
    let (names, mut params) = store_params(&store);
    params.push(random(&[total, d], rng));
    let blocks = sequence_blocks(&lens);
    cases.push(Case {
        name: "attention_layer",
        params,
        build: Box::new(move |tp, vars| {
            let mut g = Graph::with_bindings(tp, names.iter().cloned().zip(vars.iter().copied()), ChaCha8Rng::seed_from_u64(0));
            let x = vars[names.len()];
            let y = mha.forward(&mut g, x, x, blocks.clone())?;
            readout(g.tape, y, seed)
        }),
    });

    for decoder in [false, true] {
        let layer = if decoder {
            TransformerLayer::decoder("dec", d, heads, d_ff)
        } else {
            TransformerLayer::encoder("enc", d, heads, d_ff)
        }
        .expect("heads divide width");
        let store = jittered_store(seed ^ 1, |i| layer.init(i, true));
        let (names, mut params) = store_params(&store);
        params.push(random(&[total, d], rng));
        params.push(random(&[mem_len, d], rng));
        let blocks = sequence_blocks(&lens);
        let mem_blocks: Vec<AttentionBlock> = blocks.iter().map(|b| AttentionBlock::full(b.query.clone(), 0..mem_len)).collect();
        cases.push(Case {
            name: if decoder { "decoder_layer" } else { "encoder_layer" },
            params,
            build: Box::new(move |tp, vars| {
                let mut g = Graph::with_bindings(tp, names.iter().cloned().zip(vars.iter().copied()), ChaCha8Rng::seed_from_u64(0));
                let x = vars[names.len()];
                let mem = vars[names.len() + 1];
                let memory = decoder.then_some((mem, mem_blocks.as_slice()));
                let y = layer.forward(&mut g, x, &blocks, memory)?;
                readout(g.tape, y, seed)
            }),
        });
    }

    // Learner end to end in soft mode with frozen noise.
    let vocab = rng.gen_range(8..14);
    let config = LslConfig {
        layers: 1,
        heads,
        tau: 0.5,
        mode: LslMode::Soft,
        ..LslConfig::default()
    };
    let lsl = LabelSemanticLearner::new(config, d, d_ff, vocab).expect("valid learner");
    let mut emb = Embeddings::new("emb", vocab, d);
    emb.max_len = 16;
    let store = jittered_store(seed ^ 2, |i| {
        emb.init(i);
        lsl.init(i);
    });
    let n_labels = rng.gen_range(1..5);
    let labels = LabelSequence {
        ids: (0..n_labels).map(|_| rng.gen_range(5..vocab)).collect(),
        owners: vec![0; n_labels],
        type_order: vec![0],
    };
    let noise = gumbel_noise::<f64, _>(&[n_labels, vocab], rng);
    let (names, params) = store_params(&store);
    {
        let emb = emb.clone();
        cases.push(Case {
            name: "lsl_soft",
            params,
            build: Box::new(move |tp, vars| {
                let mut g = Graph::with_bindings(tp, names.iter().cloned().zip(vars.iter().copied()), ChaCha8Rng::seed_from_u64(0));
                let logits = lsl.logits(&mut g, &emb, &labels)?;
                let sel = gumbel_softmax_select(g.tape, logits, 0.5, Some(&noise), LslMode::Soft)?;
                let table = g.param(&emb.word)?;
                let rows = g.tape.soft_lookup(sel.output, table)?;
                readout(g.tape, rows, seed)
            }),
        });
    }

    // Classifier end to end, pivots given as a parameterized distribution.
    let n_tags = 2 * rng.gen_range(1..3) + 1;
    let tc = TriggerClassifier::new(1, heads, d, d_ff, n_tags).expect("valid classifier");
    let store = jittered_store(seed ^ 3, |i| {
        emb.init(i);
        tc.init(i);
    });
    let (names, mut params) = store_params(&store);
    let n_pivots = rng.gen_range(1..4);
    params.push(random(&[n_pivots, vocab], rng));
    let inputs: Vec<_> = lens
        .iter()
        .map(|&l| {
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(5..vocab)).collect();
            assemble_input(&ids, n_pivots, None).expect("short input")
        })
        .collect();
    let targets: Vec<usize> = (0..total).map(|_| rng.gen_range(0..n_tags)).collect();
    cases.push(Case {
        name: "trigger_classifier",
        params,
        build: Box::new(move |tp, vars| {
            let mut g = Graph::with_bindings(tp, names.iter().cloned().zip(vars.iter().copied()), ChaCha8Rng::seed_from_u64(0));
            let dist = g.tape.softmax(vars[names.len()])?;
            let y = tc.forward(&mut g, &emb, &inputs, Some(dist), false)?;
            g.tape.cross_entropy(y, &targets, None)
        }),
    });
    cases
}

/// Runs `instances` randomized instances of every group.
pub fn run_suite(instances: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&'static str, GroupResult> = BTreeMap::new();
    let mut order = Vec::new();
    for _ in 0..instances {
        let mut cases = op_cases(&mut rng);
        cases.extend(block_cases(&mut rng));
        for case in cases {
            let report = check_gradients(|tp, p| (case.build)(tp, p), &case.params)?;
            let entry = groups.entry(case.name).or_insert_with(|| {
                order.push(case.name);
                GroupResult {
                    name: case.name.to_string(),
                    instances: 0,
                    checked: 0,
                    max_rel_err: 0.0,
                    passed: true,
                }
            });
            entry.instances += 1;
            entry.checked += report.checked;
            entry.max_rel_err = entry.max_rel_err.max(report.max_rel_err);
            entry.passed &= report.passes(tolerance);
        }
    }
    Ok(SuiteReport {
        tolerance,
        groups: order.into_iter().filter_map(|n| groups.remove(n)).collect(),
    })
}
