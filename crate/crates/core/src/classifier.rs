//! Trigger classifier: pivots and sentence encoded jointly, BIO tags
//! predicted at sentence positions.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionBlock, Tape, Var};
use crate::corpus::{EventSchema, TriggerSpan};
use crate::error::{Error, Result};
use crate::nn::{Embeddings, FeedForward, Graph, Init, LayerNorm, TokenSource, TransformerLayer, MAX_LEN};
use crate::scalar::Scalar;
use crate::text::{CLS, SEP};

/// `O`, then `B-k`, `I-k` for every event type `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    types: Vec<String>,
}

pub const OUTSIDE: usize = 0;

impl TagSet {
    pub fn new(schema: &EventSchema) -> Self {
        TagSet {
            types: schema.types().iter().map(|t| t.name.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        2 * self.types.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn begin(&self, k: usize) -> usize {
        1 + 2 * k
    }

    pub fn inside(&self, k: usize) -> usize {
        2 + 2 * k
    }

    /// Event type index of a `B-`/`I-` tag.
    pub fn type_of(&self, tag: usize) -> Option<usize> {
        (tag != OUTSIDE && tag < self.len()).then(|| (tag - 1) / 2)
    }

    pub fn name(&self, tag: usize) -> String {
        match self.type_of(tag) {
            None => "O".into(),
            Some(k) if tag % 2 == 1 => format!("B-{}", self.types[k]),
            Some(k) => format!("I-{}", self.types[k]),
        }
    }

    pub fn encode(&self, spans: &[TriggerSpan], len: usize) -> Result<Vec<usize>> {
        let mut tags = vec![OUTSIDE; len];
        for s in spans {
            let k = self
                .types
                .iter()
                .position(|t| *t == s.type_name)
                .ok_or_else(|| Error::Validation(format!("unknown event type `{}`", s.type_name)))?;
            if s.end < s.start || s.end >= len {
                return Err(Error::Validation(format!(
                    "span {}..={} invalid for {len} tokens",
                    s.start, s.end
                )));
            }
            if tags[s.start..=s.end].iter().any(|&t| t != OUTSIDE) {
                return Err(Error::Validation(format!("span {}..={} overlaps another", s.start, s.end)));
            }
            tags[s.start] = self.begin(k);
            for t in &mut tags[s.start + 1..=s.end] {
                *t = self.inside(k);
            }
        }
        Ok(tags)
    }

    /// BIO decoding. An `I-k` that does not continue a `k` span opens a new
    /// span as if it were `B-k`.
    pub fn decode(&self, tags: &[usize]) -> Vec<TriggerSpan> {
        let mut spans: Vec<TriggerSpan> = Vec::new();
        let mut open: Option<usize> = None;
        for (i, &tag) in tags.iter().enumerate() {
            match self.type_of(tag) {
                None => open = None,
                Some(k) if tag % 2 == 0 && open == Some(k) => {
                    spans.last_mut().expect("open span").end = i;
                }
                Some(k) => {
                    spans.push(TriggerSpan::new(i, i, &self.types[k]));
                    open = Some(k);
                }
            }
        }
        spans
    }
}

/// Which group a packed position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Sentence,
    Pivot,
    Special,
}

/// One classifier input: `⟨CLS, L′, SEP, s, SEP⟩`, or `⟨CLS, s, SEP⟩`
/// without labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub sources: Vec<TokenSource>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub pivots: Range<usize>,
    pub sentence: Range<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn group(&self, i: usize) -> Group {
        if self.sentence.contains(&i) {
            Group::Sentence
        } else if self.pivots.contains(&i) {
            Group::Pivot
        } else {
            Group::Special
        }
    }
}

/// Lays out one sentence behind `n_pivots` pivot slots.
///
/// `pivot_positions` overrides the position index of each pivot slot
/// (counted from the first slot); sentences longer than the position table
/// are rejected rather than cut.
pub fn assemble_input(sentence: &[usize], n_pivots: usize, pivot_positions: Option<&[usize]>) -> Result<EncodedInput> {
    let n_s = sentence.len();
    let with_labels = n_pivots > 0;
    let len = if with_labels { n_s + n_pivots + 3 } else { n_s + 2 };
    if len > MAX_LEN {
        return Err(Error::Length { len, max: MAX_LEN });
    }
    if let Some(p) = pivot_positions {
        if p.len() != n_pivots || p.iter().any(|&x| x >= n_pivots) {
            return Err(Error::Param(format!(
                "pivot positions {p:?} are not slots of {n_pivots} pivots"
            )));
        }
    }
    let mut sources = Vec::with_capacity(len);
    let mut segments = Vec::with_capacity(len);
    sources.push(TokenSource::Id(CLS));
    segments.push(0);
    let pivots = 1..1 + n_pivots;
    if with_labels {
        sources.extend((0..n_pivots).map(TokenSource::Pivot));
        segments.extend(std::iter::repeat_n(1, n_pivots));
        sources.push(TokenSource::Id(SEP));
        segments.push(0);
    }
    let start = sources.len();
    sources.extend(sentence.iter().map(|&id| TokenSource::Id(id)));
    segments.extend(std::iter::repeat_n(0, n_s));
    sources.push(TokenSource::Id(SEP));
    segments.push(usize::from(with_labels));
    let mut positions: Vec<usize> = (0..len).collect();
    if let Some(p) = pivot_positions {
        for (j, &slot) in p.iter().enumerate() {
            positions[1 + j] = 1 + slot;
        }
    }
    Ok(EncodedInput {
        sources,
        segments,
        positions,
        pivots: if with_labels { pivots } else { 1..1 },
        sentence: start..start + n_s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcConfig {
    pub layers: usize,
    pub small_layers: usize,
    pub heads: usize,
    /// Loss weight of the `O` tag relative to trigger tags.
    pub outside_weight: f64,
}

impl Default for TcConfig {
    fn default() -> Self {
        TcConfig {
            layers: 4,
            small_layers: 2,
            heads: 4,
            outside_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TriggerClassifier {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub head: FeedForward,
    pub n_tags: usize,
}

impl TriggerClassifier {
    pub fn new(layers: usize, heads: usize, d: usize, d_ff: usize, n_tags: usize) -> Result<Self> {
        Ok(TriggerClassifier {
            layers: (0..layers)
                .map(|l| TransformerLayer::encoder(&format!("tc.layer.{l}"), d, heads, d_ff))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new("tc.final_norm", d),
            head: FeedForward::new("tc.head", d, d_ff, n_tags),
            n_tags,
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        for l in &self.layers {
            l.init(init, false);
        }
        self.final_norm.init(init);
        self.head.init(init, false);
    }

    /// Tag logits `[Σ N_s × |tags|]` for a packed batch, sentence tokens only,
    /// in batch order.
    ///
    /// `pivots` holds the `[n × V]` pivot rows every input refers to. With
    /// `mask_pivot_keys`, no query may attend to a pivot position.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        emb: &Embeddings,
        batch: &[EncodedInput],
        pivots: Option<Var>,
        mask_pivot_keys: bool,
    ) -> Result<Var> {
        let total: usize = batch.iter().map(EncodedInput::len).sum();
        let mut sources = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        let mut sentence_rows = Vec::new();
        let mut blocks = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for input in batch {
            sources.extend_from_slice(&input.sources);
            segments.extend_from_slice(&input.segments);
            positions.extend_from_slice(&input.positions);
            sentence_rows.extend(input.sentence.clone().map(|i| offset + i));
            let n = input.len();
            let mask = (mask_pivot_keys && !input.pivots.is_empty()).then(|| {
                (0..n * n).map(|ij| !input.pivots.contains(&(ij % n))).collect()
            });
            blocks.push(AttentionBlock {
                query: offset..offset + n,
                key: offset..offset + n,
                mask,
            });
            offset += n;
        }
        let x = emb.embed(g, &sources, pivots, &segments, &positions)?;
        let mut h = g.dropout(x)?;
        for l in &self.layers {
            h = l.forward(g, h, &blocks, None)?;
        }
        let h = self.final_norm.forward(g, h)?;
        let h = g.tape.select_rows(h, &sentence_rows)?;
        self.head.forward(g, h)
    }
}

/// Mean attention mass from one query group to each key group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMass {
    pub to_sentence: f64,
    pub to_pivots: f64,
    pub to_special: f64,
    pub queries: usize,
}

impl GroupMass {
    fn add(&mut self, m: [f64; 3]) {
        self.to_sentence += m[0];
        self.to_pivots += m[1];
        self.to_special += m[2];
        self.queries += 1;
    }

    fn finish(&mut self) {
        if self.queries > 0 {
            let n = self.queries as f64;
            self.to_sentence /= n;
            self.to_pivots /= n;
            self.to_special /= n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInteraction {
    pub layer: usize,
    pub head: usize,
    /// Queries at sentence positions.
    pub sentence: GroupMass,
    /// Queries at pivot positions.
    pub pivots: GroupMass,
    /// Largest deviation from 1 of any query's total mass.
    pub max_partition_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub heads: Vec<HeadInteraction>,
    /// Mean sentence→pivot mass at gold trigger tokens, over layers and heads.
    pub trigger_to_pivots: Option<f64>,
    /// The same at non-trigger sentence tokens.
    pub other_to_pivots: Option<f64>,
}

/// Partitions every recorded attention node's mass by key group.
///
/// `attention` lists one node per layer, in layer order, each recorded over
/// `batch` packed as in [`TriggerClassifier::forward`]. `trigger_flags`
/// marks gold trigger tokens per sentence.
pub fn interaction_report<T: Scalar>(
    tape: &Tape<T>,
    attention: &[Var],
    batch: &[EncodedInput],
    trigger_flags: Option<&[Vec<bool>]>,
) -> Result<AttentionReport> {
    let mut heads = Vec::new();
    let mut trig = (0.0, 0usize);
    let mut other = (0.0, 0usize);
    for (layer, &a) in attention.iter().enumerate() {
        let probs = tape
            .attention_probs(a)
            .ok_or_else(|| Error::Param("not an attention node".into()))?;
        if probs.blocks.len() != batch.len() {
            return Err(Error::Param("attention blocks do not match the batch".into()));
        }
        for head in 0..probs.heads {
            let mut hi = HeadInteraction {
                layer,
                head,
                sentence: GroupMass::default(),
                pivots: GroupMass::default(),
                max_partition_error: 0.0,
            };
            for (b, input) in batch.iter().enumerate() {
                let w = probs.weights(b, head);
                let n = input.len();
                for i in 0..n {
                    let mut m = [0.0; 3];
                    for j in 0..n {
                        let slot = match input.group(j) {
                            Group::Sentence => 0,
                            Group::Pivot => 1,
                            Group::Special => 2,
                        };
                        m[slot] += w[i * n + j].as_f64();
                    }
                    let total: f64 = m.iter().sum();
                    hi.max_partition_error = hi.max_partition_error.max((total - 1.0).abs());
                    match input.group(i) {
                        Group::Sentence => {
                            hi.sentence.add(m);
                            if let Some(flags) = trigger_flags {
                                let is_trigger = flags[b][i - input.sentence.start];
                                let acc = if is_trigger { &mut trig } else { &mut other };
                                acc.0 += m[1];
                                acc.1 += 1;
                            }
                        }
                        Group::Pivot => hi.pivots.add(m),
                        Group::Special => {}
                    }
                }
            }
            hi.sentence.finish();
            hi.pivots.finish();
            heads.push(hi);
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(AttentionReport {
        heads,
        trigger_to_pivots: mean(trig),
        other_to_pivots: mean(other),
    })
}
