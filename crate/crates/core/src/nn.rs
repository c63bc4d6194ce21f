//! Transformer building blocks shared by the label learner and the trigger
//! classifier.
//!
//! Layers are descriptors holding parameter names and sizes; the weights live
//! in a [`ParamStore`] and are bound onto a tape through a [`Graph`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionBlock, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Longest packed sequence the position table covers.
pub const MAX_LEN: usize = 256;
pub const LN_EPS: f64 = 1e-5;

/// One forward pass: the tape, parameter bindings and stochastic state.
pub struct Graph<'t, 's, T> {
    pub tape: &'t mut Tape<T>,
    store: Option<&'s ParamStore<T>>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    pub train: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
    /// Attention nodes recorded by name when `record_attention` is set.
    pub attention: Vec<(String, Var)>,
    pub record_attention: bool,
}

impl<'t, 's, T: Scalar> Graph<'t, 's, T> {
    pub fn new(tape: &'t mut Tape<T>, store: &'s ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Graph {
            tape,
            store: Some(store),
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            train: false,
            dropout: 0.0,
            rng,
            attention: Vec::new(),
            record_attention: false,
        }
    }

    /// A graph whose parameters are all supplied up front, as the gradient
    /// checker does.
    pub fn with_bindings(tape: &'t mut Tape<T>, bindings: impl IntoIterator<Item = (String, Var)>, rng: ChaCha8Rng) -> Self {
        Graph {
            tape,
            store: None,
            bound: bindings.into_iter().collect(),
            frozen: Vec::new(),
            train: false,
            dropout: 0.0,
            rng,
            attention: Vec::new(),
            record_attention: false,
        }
    }

    /// Parameters under `prefix` are bound as constants and get no gradient.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let value = store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.tape.constant(value)
        } else {
            self.tape.param(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let (rate, train) = (self.dropout, self.train);
        self.tape.dropout(x, rate, train, &mut self.rng)
    }
}

/// Parameter initialisation target.
pub struct Init<'a, T, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) {
        self.store.insert(name, Tensor::xavier(rows, cols, self.rng));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape.to_vec()));
    }

    fn ones(&mut self, name: &str, len: usize) {
        self.store.insert(name, Tensor::filled([len], T::one()));
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `{prefix}.w{tag}` and bias `{prefix}.b{tag}`.
    pub fn new(prefix: &str, tag: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: format!("{prefix}.w{tag}"),
            bias: format!("{prefix}.b{tag}"),
            d_in,
            d_out,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>, zero: bool) {
        if zero {
            init.zeros(&self.weight, &[self.d_in, self.d_out]);
        } else {
            init.xavier(&self.weight, self.d_in, self.d_out);
        }
        init.zeros(&self.bias, &[self.d_out]);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }

    pub fn names(&self) -> [&str; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            d,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        init.ones(&self.gain, self.d);
        init.zeros(&self.bias, &[self.d]);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain)?;
        let bias = g.param(&self.bias)?;
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Word, position and segment tables; a token's input vector is the sum of
/// its three rows.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub word: String,
    pub position: String,
    pub segment: String,
    pub vocab: usize,
    pub d: usize,
    pub max_len: usize,
}

/// Where a position's word vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Id(usize),
    /// Row `k` of an externally supplied distribution matrix over the
    /// vocabulary.
    Pivot(usize),
}

impl Embeddings {
    pub fn new(prefix: &str, vocab: usize, d: usize) -> Self {
        Embeddings {
            word: format!("{prefix}.word"),
            position: format!("{prefix}.pos"),
            segment: format!("{prefix}.seg"),
            vocab,
            d,
            max_len: MAX_LEN,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        init.xavier(&self.word, self.vocab, self.d);
        init.xavier(&self.position, self.max_len, self.d);
        init.xavier(&self.segment, 2, self.d);
    }

    /// Word vectors for `sources`; pivot rows are `distributions · E_w`, so a
    /// one-hot row reproduces the hard lookup and soft rows stay
    /// differentiable.
    pub fn words<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        sources: &[TokenSource],
        distributions: Option<Var>,
    ) -> Result<Var> {
        let table = g.param(&self.word)?;
        let n_pivots = distributions.map_or(0, |d| g.tape.value(d).rows());
        let mut ids = Vec::with_capacity(sources.len());
        for s in sources {
            ids.push(match *s {
                TokenSource::Id(id) if id < self.vocab => id,
                TokenSource::Id(id) => {
                    return Err(Error::Index {
                        what: "vocabulary id",
                        index: id,
                        size: self.vocab,
                    })
                }
                TokenSource::Pivot(k) if k < n_pivots => self.vocab + k,
                TokenSource::Pivot(k) => {
                    return Err(Error::Index {
                        what: "pivot row",
                        index: k,
                        size: n_pivots,
                    })
                }
            });
        }
        let table = match distributions {
            Some(dist) if n_pivots > 0 => {
                let pivots = g.tape.soft_lookup(dist, table)?;
                g.tape.concat_rows(&[table, pivots])?
            }
            _ => table,
        };
        g.tape.select_rows(table, &ids)
    }

    /// `E_w(x_i) + E_p(pos_i) + E_s(seg_i)` for every position.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        sources: &[TokenSource],
        distributions: Option<Var>,
        segments: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if segments.len() != sources.len() || positions.len() != sources.len() {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![sources.len()],
                rhs: vec![segments.len(), positions.len()],
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::Length {
                len: p + 1,
                max: self.max_len,
            });
        }
        if let Some(&s) = segments.iter().find(|&&s| s > 1) {
            return Err(Error::Index {
                what: "segment id",
                index: s,
                size: 2,
            });
        }
        let w = self.words(g, sources, distributions)?;
        let pos_table = g.param(&self.position)?;
        let seg_table = g.param(&self.segment)?;
        let p = g.tape.select_rows(pos_table, positions)?;
        let s = g.tape.select_rows(seg_table, segments)?;
        let ws = g.tape.add(w, p)?;
        g.tape.add(ws, s)
    }
}

/// Multi-head attention with one `d × d` projection per role; head `h` uses
/// columns `h·d_h .. (h+1)·d_h`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Param(format!("{heads} heads do not divide width {d}")));
        }
        Ok(MultiHeadAttention {
            name: prefix.to_string(),
            q: Linear::new(prefix, "q", d, d),
            k: Linear::new(prefix, "k", d, d),
            v: Linear::new(prefix, "v", d, d),
            o: Linear::new(prefix, "o", d, d),
            heads,
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>, zero_output: bool) {
        self.q.init(init, false);
        self.k.init(init, false);
        self.v.init(init, false);
        self.o.init(init, zero_output);
    }

    /// Queries from `x_q`, keys and values from `x_kv`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        x_q: Var,
        x_kv: Var,
        blocks: Vec<AttentionBlock>,
    ) -> Result<Var> {
        let q = self.q.forward(g, x_q)?;
        let k = self.k.forward(g, x_kv)?;
        let v = self.v.forward(g, x_kv)?;
        let a = g.tape.attention(q, k, v, self.heads, blocks)?;
        if g.record_attention {
            g.attention.push((self.name.clone(), a));
        }
        self.o.forward(g, a)
    }
}

/// `Linear → ReLU → Linear`; the position-wise sublayer and the prediction
/// head.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        FeedForward {
            hidden: Linear::new(prefix, "1", d_in, d_hidden),
            output: Linear::new(prefix, "2", d_hidden, d_out),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>, zero_output: bool) {
        self.hidden.init(init, false);
        self.output.init(init, zero_output);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tape.relu(h)?;
        self.output.forward(g, h)
    }
}

/// Pre-norm transformer layer. With `cross` set it is a decoder layer that
/// also attends to a memory sequence.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn encoder(prefix: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(TransformerLayer {
            self_norm: LayerNorm::new(&format!("{prefix}.ln1"), d),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.attn"), d, heads)?,
            cross: None,
            ffn_norm: LayerNorm::new(&format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, d_ff, d),
        })
    }

    pub fn decoder(prefix: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let mut layer = Self::encoder(prefix, d, heads, d_ff)?;
        layer.cross = Some((
            LayerNorm::new(&format!("{prefix}.ln_cross"), d),
            MultiHeadAttention::new(&format!("{prefix}.cross"), d, heads)?,
        ));
        Ok(layer)
    }

    /// `zero_output` zeroes every projection that writes into the residual
    /// stream, making the fresh layer an exact identity.
    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>, zero_output: bool) {
        self.self_norm.init(init);
        self.self_attn.init(init, zero_output);
        if let Some((norm, attn)) = &self.cross {
            norm.init(init);
            attn.init(init, zero_output);
        }
        self.ffn_norm.init(init);
        self.ffn.init(init, zero_output);
    }

    /// `blocks` describe self-attention; `memory` is the decoder's encoder
    /// output with its own block layout.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        x: Var,
        blocks: &[AttentionBlock],
        memory: Option<(Var, &[AttentionBlock])>,
    ) -> Result<Var> {
        let h = self.self_norm.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, blocks.to_vec())?;
        let a = g.dropout(a)?;
        let mut x = g.tape.add(x, a)?;
        match (&self.cross, memory) {
            (Some((norm, attn)), Some((mem, mem_blocks))) => {
                let h = norm.forward(g, x)?;
                let a = attn.forward(g, h, mem, mem_blocks.to_vec())?;
                let a = g.dropout(a)?;
                x = g.tape.add(x, a)?;
            }
            (None, None) => {}
            _ => return Err(Error::Param("memory must be given exactly to decoder layers".into())),
        }
        let h = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let f = g.dropout(f)?;
        g.tape.add(x, f)
    }
}

/// One full-visibility block per packed sequence.
pub fn sequence_blocks(lengths: &[usize]) -> Vec<AttentionBlock> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let b = AttentionBlock::full(start..start + n, start..start + n);
            start += n;
            b
        })
        .collect()
}

/// Names of every parameter a set of layers would create, for dead-subgraph
/// checks.
pub fn collect_names<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> BTreeSet<String> {
    store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect()
}
