//! Adam, early stopping and the joint training loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::corpus::{AnnotatedSentence, CorpusSplit, EventSchema};
use crate::error::{Error, Result};
use crate::eval::{score, EvalReport, Prediction, Scores};
use crate::lsl::{shuffle_labels, LabelSequence};
use crate::model::{Ablation, EventDetector, ModelConfig};
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// Bias-corrected Adam over named parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry keep their
    /// value and moments; a non-finite gradient aborts before anything moves.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (name, g) in grads {
            let p = store.get_mut(name)?.data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored score has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Drop eventless sentences from the training split.
    pub eventful_only: bool,
    /// Global gradient-norm bound.
    pub clip: f64,
    /// Seed of the fixed label order used for dev and test.
    pub eval_shuffle_seed: u64,
    pub vocab_min_count: usize,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            eventful_only: false,
            clip: 1.0,
            eval_shuffle_seed: 0,
            vocab_min_count: 1,
            model: ModelConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Every problem with the configuration, model included.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr = {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            errs.push("train.max_epochs must be at least 1".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            errs.push(format!(
                "train.patience = {} must lie in [1, train.max_epochs = {}]",
                self.patience, self.max_epochs
            ));
        }
        if !(self.clip > 0.0) {
            errs.push(format!("train.clip = {} must be positive", self.clip));
        }
        if self.vocab_min_count == 0 {
            errs.push("train.vocab_min_count must be at least 1".into());
        }
        errs.extend(self.model.problems());
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub dev: Scores,
    pub best_dev_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub stop_reason: StopReason,
    /// Trainable parameters that never saw a nonzero gradient in epoch 1.
    pub dead_params: Vec<String>,
}

impl TrainLog {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("train log", e))
    }
}

pub struct Trained<T> {
    pub model: EventDetector,
    /// Parameters of the best dev epoch.
    pub store: ParamStore<T>,
    pub log: TrainLog,
}

impl<T: Scalar> Trained<T> {
    pub fn eval_labels(&self, config: &TrainConfig) -> LabelSequence {
        self.model.eval_labels(config.eval_shuffle_seed)
    }

    pub fn evaluate(&self, config: &TrainConfig, gold: &[AnnotatedSentence]) -> Result<(EvalReport, Vec<Prediction>)> {
        evaluate(&self.model, &self.store, gold, &self.eval_labels(config))
    }
}

/// Predicts every sentence of `gold` and scores the result.
pub fn evaluate<T: Scalar>(
    model: &EventDetector,
    store: &ParamStore<T>,
    gold: &[AnnotatedSentence],
    labels: &LabelSequence,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let sentences: Vec<Vec<String>> = gold.iter().map(|s| s.tokens.clone()).collect();
    let spans = model.predict(store, &sentences, labels)?;
    let preds: Vec<Prediction> = gold
        .iter()
        .zip(spans)
        .map(|(s, triggers)| Prediction {
            doc_id: s.doc_id.clone(),
            sent_id: s.sent_id.clone(),
            triggers,
        })
        .collect();
    Ok((score(gold, &preds)?, preds))
}

/// Builds the vocabulary and model a configuration implies for `split`.
pub fn build_model(config: &TrainConfig, split: &CorpusSplit, schema: &EventSchema) -> Result<EventDetector> {
    let vocab = Vocabulary::build(&split.train, schema, config.vocab_min_count);
    EventDetector::new(schema.clone(), vocab, config.model.clone(), config.ablation)
}

pub fn train<T: Scalar>(config: &TrainConfig, split: &CorpusSplit, schema: &EventSchema) -> Result<Trained<T>> {
    train_with(config, split, schema, |_| {})
}

/// Trains with `on_epoch` called after every epoch.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    split: &CorpusSplit,
    schema: &EventSchema,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained<T>> {
    config.validate()?;
    split.validate(schema)?;
    let split = if config.eventful_only {
        split.filter_eventful()
    } else {
        split.clone()
    };
    if split.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let model = build_model(config, &split, schema)?;
    let mut store = model.init_params::<T>(config.seed);
    let trainable: BTreeSet<String> = store.names().filter(|n| model.is_trainable(n)).map(str::to_string).collect();
    let eval_labels = model.eval_labels(config.eval_shuffle_seed);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let mut adam = Adam::new(config.lr);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = store.clone();
    let mut epochs = Vec::new();
    let mut alive: BTreeSet<String> = BTreeSet::new();
    let mut dead_params = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let labels = shuffle_labels(schema, &model.vocab, &mut rng);
        let mut total = 0.0;
        let mut max_norm: f64 = 0.0;
        let batches = order.chunks(config.batch_size);
        let n_batches = batches.len();
        for (b, idx) in batches.enumerate() {
            let batch: Vec<&AnnotatedSentence> = idx.iter().map(|&i| &split.train[i]).collect();
            let mut tape = Tape::new();
            let mut g = model.graph(&mut tape, &store, true, rng.gen());
            let loss = model.loss(&mut g, &batch, &labels)?;
            let value = g.tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            g.tape.backward(loss)?;
            let mut grads = g.grads();
            grads.retain(|k, _| trainable.contains(k));
            if epoch == 1 {
                for (k, v) in &grads {
                    if v.iter().any(|x| *x != T::zero()) {
                        alive.insert(k.clone());
                    }
                }
            }
            max_norm = max_norm.max(clip_global_norm(&mut grads, config.clip));
            adam.step(&mut store, &grads)?;
            total += value;
        }
        if epoch == 1 {
            dead_params = trainable.difference(&alive).cloned().collect();
        }
        let (report, _) = evaluate(&model, &store, &split.dev, &eval_labels)?;
        let verdict = stopper.observe(epoch, report.all.f1);
        if verdict == Verdict::Improved {
            best = store.clone();
        }
        let log = EpochLog {
            epoch,
            train_loss: total / n_batches as f64,
            grad_norm: max_norm,
            dev: report.all,
            best_dev_f1: stopper.best,
        };
        on_epoch(&log);
        epochs.push(log);
        if verdict == Verdict::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok(Trained {
        model,
        store: best,
        log: TrainLog {
            epochs,
            best_epoch: stopper.best_epoch,
            best_dev_f1: stopper.best,
            stop_reason,
            dead_params,
        },
    })
}

#[cfg(test)]
mod tests;
