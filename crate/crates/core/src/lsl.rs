//! Label semantic learner: turns the shuffled label-word sequence into an
//! equally long sequence of pivot tokens chosen by Gumbel-Softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::EventSchema;
use crate::error::{Error, Result};
use crate::nn::{sequence_blocks, Embeddings, FeedForward, Graph, Init, LayerNorm, TokenSource, TransformerLayer};
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// Clamp applied to uniform draws before the double logarithm.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LslMode {
    /// The relaxed distribution itself is passed on.
    Soft,
    /// One-hot forward pass, relaxed backward pass.
    #[default]
    StraightThrough,
    /// No learner: the pivots are the label words themselves.
    Bypass,
}

impl std::str::FromStr for LslMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(LslMode::Soft),
            "straight_through" => Ok(LslMode::StraightThrough),
            "bypass" => Ok(LslMode::Bypass),
            _ => Err(Error::Param(format!(
                "unknown lsl mode `{s}` (expected soft, straight_through or bypass)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LslConfig {
    pub layers: usize,
    pub heads: usize,
    pub tau: f64,
    pub mode: LslMode,
    /// Weight of the tied word-similarity logits.
    pub copy_scale: f64,
    pub freeze: bool,
}

impl Default for LslConfig {
    fn default() -> Self {
        LslConfig {
            layers: 3,
            heads: 4,
            tau: 0.1,
            mode: LslMode::StraightThrough,
            copy_scale: 8.0,
            freeze: false,
        }
    }
}

/// Label words of every type, concatenated in some type order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub ids: Vec<usize>,
    /// Event type index owning each position.
    pub owners: Vec<usize>,
    pub type_order: Vec<usize>,
}

impl LabelSequence {
    pub fn from_order(schema: &EventSchema, vocab: &Vocabulary, type_order: &[usize]) -> Self {
        let mut ids = Vec::new();
        let mut owners = Vec::new();
        for &t in type_order {
            for w in &schema.types()[t].label_words {
                ids.push(vocab.id(w));
                owners.push(t);
            }
        }
        LabelSequence {
            ids,
            owners,
            type_order: type_order.to_vec(),
        }
    }

    pub fn canonical(schema: &EventSchema, vocab: &Vocabulary) -> Self {
        let order: Vec<usize> = (0..schema.len()).collect();
        Self::from_order(schema, vocab, &order)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position each slot would take in schema order, for pinning position
    /// embeddings independent of the shuffle.
    pub fn canonical_slots(&self, schema: &EventSchema) -> Vec<usize> {
        let mut start = vec![0; schema.len()];
        let mut acc = 0;
        for (k, t) in schema.types().iter().enumerate() {
            start[k] = acc;
            acc += t.label_words.len();
        }
        let mut out = Vec::with_capacity(self.len());
        let mut i = 0;
        for &t in &self.type_order {
            for j in 0..schema.types()[t].label_words.len() {
                out.push(start[t] + j);
                i += 1;
            }
        }
        debug_assert_eq!(i, self.len());
        out
    }
}

/// Permutes whole event types; words inside a type keep their order.
pub fn shuffle_labels<R: Rng + ?Sized>(schema: &EventSchema, vocab: &Vocabulary, rng: &mut R) -> LabelSequence {
    let mut order: Vec<usize> = (0..schema.len()).collect();
    order.shuffle(rng);
    LabelSequence::from_order(schema, vocab, &order)
}

pub fn shuffle_labels_seeded(schema: &EventSchema, vocab: &Vocabulary, seed: u64) -> LabelSequence {
    shuffle_labels(schema, vocab, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `−ln(−ln u)` with `u` clamped to `[ε, 1−ε]`.
pub fn gumbel(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::zeros(shape.to_vec());
    for x in t.data_mut() {
        *x = T::lit(gumbel(rng.gen::<f64>()));
    }
    t
}

/// Result of a Gumbel-Softmax draw over each row of a logit matrix.
#[derive(Clone, Debug)]
pub struct Selection {
    /// `softmax((p + G) / τ)`.
    pub soft: Var,
    /// What downstream consumers read: `soft` itself, or its straight-through
    /// one-hot.
    pub output: Var,
    pub hard: Vec<usize>,
}

pub fn gumbel_softmax_select<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: f64,
    noise: Option<&Tensor<T>>,
    mode: LslMode,
) -> Result<Selection> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature {tau} must be positive")));
    }
    let perturbed = match noise {
        Some(g) => {
            let g = tape.constant(g.clone());
            tape.add(logits, g)?
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, T::lit(1.0 / tau))?;
    let soft = tape.softmax(scaled)?;
    // Ranking (p + G) directly keeps ties and underflow out of the argmax.
    let hard = tape.value(perturbed).argmax_rows();
    let output = match mode {
        LslMode::StraightThrough => tape.straight_through(soft, &hard)?,
        LslMode::Soft | LslMode::Bypass => soft,
    };
    Ok(Selection { soft, output, hard })
}

/// The learner's pivot output for one label sequence.
#[derive(Clone, Debug)]
pub struct PivotSequence {
    pub labels: LabelSequence,
    /// `[n × V]` rows consumed by the classifier's word embedding.
    pub output: Var,
    pub soft: Var,
    pub hard: Vec<usize>,
}

impl PivotSequence {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }
}

/// Encoder-decoder over the label words with a per-position vocabulary head.
///
/// Logits are `FFNN(h) + κ/d · h·norm(E_w)ᵀ`, where `h` is the normalised
/// decoder output. Residual output projections and the head's last layer
/// start at zero, so an untrained learner reproduces its input words.
#[derive(Clone, Debug)]
pub struct LabelSemanticLearner {
    pub config: LslConfig,
    pub encoder: Vec<TransformerLayer>,
    pub decoder: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub head: FeedForward,
    d: usize,
    vocab: usize,
}

impl LabelSemanticLearner {
    pub fn new(config: LslConfig, d: usize, d_ff: usize, vocab: usize) -> Result<Self> {
        let encoder = (0..config.layers)
            .map(|l| TransformerLayer::encoder(&format!("lsl.encoder.{l}"), d, config.heads, d_ff))
            .collect::<Result<_>>()?;
        let decoder = (0..config.layers)
            .map(|l| TransformerLayer::decoder(&format!("lsl.decoder.{l}"), d, config.heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(LabelSemanticLearner {
            config,
            encoder,
            decoder,
            final_norm: LayerNorm::new("lsl.final_norm", d),
            head: FeedForward::new("lsl.head", d, d_ff, vocab),
            d,
            vocab,
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        for l in self.encoder.iter().chain(&self.decoder) {
            l.init(init, true);
        }
        self.final_norm.init(init);
        self.head.init(init, true);
    }

    /// Vocabulary logits `[n × V]` for every label position.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, emb: &Embeddings, labels: &LabelSequence) -> Result<Var> {
        let n = labels.len();
        let sources: Vec<TokenSource> = labels.ids.iter().map(|&i| TokenSource::Id(i)).collect();
        let positions: Vec<usize> = (0..n).collect();
        let x = emb.embed(g, &sources, None, &vec![1; n], &positions)?;
        let blocks = sequence_blocks(&[n]);
        let mut memory = x;
        for l in &self.encoder {
            memory = l.forward(g, memory, &blocks, None)?;
        }
        let mut h = x;
        for l in &self.decoder {
            h = l.forward(g, h, &blocks, Some((memory, &blocks)))?;
        }
        let h = self.final_norm.forward(g, h)?;
        let learned = self.head.forward(g, h)?;

        let table = g.param(&emb.word)?;
        let ones = g.tape.constant(Tensor::filled([self.d], T::one()));
        let zeros = g.tape.constant(Tensor::zeros([self.d]));
        let normed = g.tape.layer_norm(table, ones, zeros, crate::nn::LN_EPS)?;
        // The query carries the label's own normalized embedding so the copy
        // choice survives position and segment components in `h`.
        let own = g.tape.select_rows(normed, &labels.ids)?;
        let query = g.tape.add(h, own)?;
        let normed_t = g.tape.transpose(normed)?;
        let sim = g.tape.matmul(query, normed_t)?;
        let copy = g.tape.scale(sim, T::lit(self.config.copy_scale / self.d as f64))?;
        g.tape.add(learned, copy)
    }

    /// Pivot tokens for `labels`. Gumbel noise is drawn from the graph's RNG
    /// only in training mode; evaluation selects the plain argmax.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, emb: &Embeddings, labels: &LabelSequence) -> Result<PivotSequence> {
        if self.config.mode == LslMode::Bypass {
            let one_hot = g.tape.constant(Tensor::one_hot(labels.len(), self.vocab, &labels.ids)?);
            return Ok(PivotSequence {
                labels: labels.clone(),
                output: one_hot,
                soft: one_hot,
                hard: labels.ids.clone(),
            });
        }
        let logits = self.logits(g, emb, labels)?;
        let noise = g
            .train
            .then(|| gumbel_noise::<T, _>(&[labels.len(), self.vocab], &mut g.rng));
        let sel = gumbel_softmax_select(g.tape, logits, self.config.tau, noise.as_ref(), self.config.mode)?;
        Ok(PivotSequence {
            labels: labels.clone(),
            output: sel.output,
            soft: sel.soft,
            hard: sel.hard,
        })
    }
}

#[cfg(test)]
mod tests;
