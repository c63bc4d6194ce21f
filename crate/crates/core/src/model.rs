//! The two-stage detector: label learner feeding the trigger classifier
//! through a shared embedding stack.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::classifier::{assemble_input, interaction_report, AttentionReport, EncodedInput, TagSet, TcConfig, TriggerClassifier, OUTSIDE};
use crate::corpus::{AnnotatedSentence, EventSchema, TriggerSpan};
use crate::error::{Error, Result};
use crate::lsl::{shuffle_labels_seeded, LabelSemanticLearner, LabelSequence, LslConfig, LslMode, PivotSequence};
use crate::nn::{Embeddings, Graph, Init};
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// Sentences per tape when predicting.
pub const PREDICT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    /// Probability of keeping an activation under dropout.
    pub dropout_keep: f64,
    pub lsl: LslConfig,
    pub tc: TcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            dropout_keep: 0.9,
            lsl: LslConfig::default(),
            tc: TcConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.d_ff == 0 {
            errs.push("model.d_model and model.d_ff must be positive".into());
        }
        for (name, h) in [("lsl.heads", self.lsl.heads), ("tc.heads", self.tc.heads)] {
            if h == 0 || !self.d_model.is_multiple_of(h) {
                errs.push(format!("{name} = {h} must divide model.d_model = {}", self.d_model));
            }
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            errs.push(format!("model.dropout_keep = {} must lie in (0, 1]", self.dropout_keep));
        }
        if !(self.lsl.tau > 0.0 && self.lsl.tau.is_finite()) {
            errs.push(format!("lsl.tau = {} must be positive", self.lsl.tau));
        }
        if self.tc.layers == 0 || self.tc.small_layers == 0 {
            errs.push("tc.layers and tc.small_layers must be positive".into());
        }
        if !(self.tc.outside_weight > 0.0) {
            errs.push(format!("tc.outside_weight = {} must be positive", self.tc.outside_weight));
        }
        errs
    }
}

/// The ablation switches of the comparison table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Pivots are the label words themselves.
    pub bypass_lsl: bool,
    /// The classifier sees the sentence alone.
    pub no_labels: bool,
    /// The classifier uses `tc.small_layers` layers.
    pub small_tc: bool,
}

/// How pivot slots are numbered by the position table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PivotLayout {
    /// Positions follow the (shuffled) slot order.
    #[default]
    Packed,
    /// Every label word keeps the position it has in schema order.
    Canonical,
}

pub struct Forward {
    pub logits: Var,
    pub inputs: Vec<EncodedInput>,
    pub pivots: Option<PivotSequence>,
}

#[derive(Clone, Debug)]
pub struct EventDetector {
    pub schema: EventSchema,
    pub vocab: Vocabulary,
    pub tags: TagSet,
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub emb: Embeddings,
    pub lsl: LabelSemanticLearner,
    pub tc: TriggerClassifier,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    ablation: Ablation,
}

impl EventDetector {
    pub fn new(schema: EventSchema, vocab: Vocabulary, config: ModelConfig, ablation: Ablation) -> Result<Self> {
        let errs = config.problems();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if let Some(w) = schema.label_words().find(|w| !vocab.contains(w)) {
            return Err(Error::Validation(format!("label word `{w}` missing from the vocabulary")));
        }
        let d = config.d_model;
        let emb = Embeddings::new("emb", vocab.len(), d);
        let mut lsl_config = config.lsl.clone();
        if ablation.bypass_lsl {
            lsl_config.mode = LslMode::Bypass;
        }
        let lsl = LabelSemanticLearner::new(lsl_config, d, config.d_ff, vocab.len())?;
        let layers = if ablation.small_tc {
            config.tc.small_layers
        } else {
            config.tc.layers
        };
        let tags = TagSet::new(&schema);
        let tc = TriggerClassifier::new(layers, config.tc.heads, d, config.d_ff, tags.len())?;
        Ok(EventDetector {
            schema,
            vocab,
            tags,
            config,
            ablation,
            emb,
            lsl,
            tc,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        self.emb.init(&mut init);
        self.lsl.init(&mut init);
        self.tc.init(&mut init);
        store
    }

    pub fn uses_labels(&self) -> bool {
        !self.ablation.no_labels
    }

    /// Whether the learner runs and receives gradient.
    pub fn lsl_trainable(&self) -> bool {
        self.uses_labels() && self.lsl.config.mode != LslMode::Bypass && !self.lsl.config.freeze
    }

    /// Whether a parameter is updated during training.
    pub fn is_trainable(&self, name: &str) -> bool {
        !name.starts_with("lsl.") || self.lsl_trainable()
    }

    /// A graph configured for this model: dropout in training mode, learner
    /// frozen when requested.
    pub fn graph<'t, 's, T: Scalar>(
        &self,
        tape: &'t mut Tape<T>,
        store: &'s ParamStore<T>,
        train: bool,
        seed: u64,
    ) -> Graph<'t, 's, T> {
        let mut g = Graph::new(tape, store, ChaCha8Rng::seed_from_u64(seed));
        g.train = train;
        g.dropout = 1.0 - self.config.dropout_keep;
        if self.lsl.config.freeze {
            g.freeze("lsl.");
        }
        g
    }

    /// The fixed label order used outside training.
    pub fn eval_labels(&self, seed: u64) -> LabelSequence {
        shuffle_labels_seeded(&self.schema, &self.vocab, seed)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        sentences: &[Vec<usize>],
        labels: &LabelSequence,
        layout: PivotLayout,
        mask_pivot_keys: bool,
    ) -> Result<Forward> {
        let (pivots, n_pivots) = if self.uses_labels() {
            let p = self.lsl.generate(g, &self.emb, labels)?;
            let n = p.len();
            (Some(p), n)
        } else {
            (None, 0)
        };
        let slots = match layout {
            PivotLayout::Canonical if n_pivots > 0 => Some(labels.canonical_slots(&self.schema)),
            _ => None,
        };
        let inputs = sentences
            .iter()
            .map(|s| assemble_input(s, n_pivots, slots.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let dist = pivots.as_ref().map(|p| p.output);
        let logits = self.tc.forward(g, &self.emb, &inputs, dist, mask_pivot_keys)?;
        Ok(Forward { logits, inputs, pivots })
    }

    /// Mean token cross-entropy of a batch.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, batch: &[&AnnotatedSentence], labels: &LabelSequence) -> Result<Var> {
        let ids: Vec<Vec<usize>> = batch.iter().map(|s| self.encode_tokens(&s.tokens)).collect();
        let mut targets = Vec::new();
        for s in batch {
            targets.extend(self.tags.encode(&s.triggers, s.tokens.len())?);
        }
        let f = self.forward(g, &ids, labels, PivotLayout::Packed, false)?;
        let weights: Option<Vec<T>> = (self.config.tc.outside_weight != 1.0).then(|| {
            (0..self.tags.len())
                .map(|t| T::lit(if t == OUTSIDE { self.config.tc.outside_weight } else { 1.0 }))
                .collect()
        });
        g.tape.cross_entropy(f.logits, &targets, weights.as_deref())
    }

    /// Arg-max tag ids per sentence in evaluation mode.
    pub fn predict_tags<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sentences: &[Vec<String>],
        labels: &LabelSequence,
        layout: PivotLayout,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let mut g = self.graph(&mut tape, store, false, 0);
            let ids: Vec<Vec<usize>> = chunk.iter().map(|s| self.encode_tokens(s)).collect();
            let f = self.forward(&mut g, &ids, labels, layout, false)?;
            let tags = g.tape.value(f.logits).argmax_rows();
            let mut at = 0;
            for s in chunk {
                out.push(tags[at..at + s.len()].to_vec());
                at += s.len();
            }
        }
        Ok(out)
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, sentences: &[Vec<String>], labels: &LabelSequence) -> Result<Vec<Vec<TriggerSpan>>> {
        Ok(self
            .predict_tags(store, sentences, labels, PivotLayout::Packed)?
            .iter()
            .map(|t| self.tags.decode(t))
            .collect())
    }

    /// Pivot tokens the learner produces for `labels` in evaluation mode.
    pub fn pivot_tokens<T: Scalar>(&self, store: &ParamStore<T>, labels: &LabelSequence) -> Result<Vec<String>> {
        if !self.uses_labels() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut g = self.graph(&mut tape, store, false, 0);
        let p = self.lsl.generate(&mut g, &self.emb, labels)?;
        Ok(self.vocab.decode(&p.hard))
    }

    /// Attention mass by key group over `sentences`, with gold trigger
    /// positions taken from their annotations.
    pub fn attention_report<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sentences: &[AnnotatedSentence],
        labels: &LabelSequence,
        mask_pivot_keys: bool,
    ) -> Result<AttentionReport> {
        let mut tape = Tape::new();
        let mut g = self.graph(&mut tape, store, false, 0);
        g.record_attention = true;
        let ids: Vec<Vec<usize>> = sentences.iter().map(|s| self.encode_tokens(&s.tokens)).collect();
        let f = self.forward(&mut g, &ids, labels, PivotLayout::Packed, mask_pivot_keys)?;
        let nodes: Vec<Var> = g
            .attention
            .iter()
            .filter(|(name, _)| name.starts_with("tc."))
            .map(|(_, v)| *v)
            .collect();
        let flags: Vec<Vec<bool>> = sentences
            .iter()
            .map(|s| {
                let mut f = vec![false; s.tokens.len()];
                for t in &s.triggers {
                    f[t.start..=t.end].iter_mut().for_each(|x| *x = true);
                }
                f
            })
            .collect();
        interaction_report(g.tape, &nodes, &f.inputs, Some(&flags))
    }

    /// Writes `model.json`, `schema.json`, `vocab.json` and `params.json`.
    pub fn save<T: Scalar>(&self, store: &ParamStore<T>, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = ModelFile {
            config: self.config.clone(),
            ablation: self.ablation,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("model", e))?;
        let path = dir.join("model.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        crate::corpus::write_schema(&self.schema, dir.join("schema.json"))?;
        self.vocab.save(dir.join("vocab.json"))?;
        store.save(dir.join("params.json"))
    }

    pub fn load<T: Scalar>(dir: &Path) -> Result<(Self, ParamStore<T>)> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let schema = crate::corpus::read_schema(dir.join("schema.json"))?;
        let vocab = Vocabulary::load(dir.join("vocab.json"))?;
        let model = EventDetector::new(schema, vocab, file.config, file.ablation)?;
        let store = ParamStore::load(dir.join("params.json"))?;
        store.check_compatible(&model.init_params::<T>(0))?;
        Ok((model, store))
    }
}
