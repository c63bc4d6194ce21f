//! Layered configuration: defaults, then a TOML file, then `--set` flags.
//!
//! Every setting has a dotted key (`train.lr`, `lsl.tau`, ...). Problems
//! are collected across all layers and reported together.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use evdet_core::classifier::TcConfig;
use evdet_core::corpus::{default_schema, SyntheticConfig};
use evdet_core::experiments::{Variant, DEFAULT_FRACTIONS};
use evdet_core::gradsuite::{DEFAULT_INSTANCES, DEFAULT_TOLERANCE};
use evdet_core::lsl::LslConfig;
use evdet_core::model::{Ablation, ModelConfig};
use evdet_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eventful_only: bool,
    pub clip: f64,
    pub eval_shuffle_seed: u64,
    pub vocab_min_count: usize,
    pub precision: Precision,
    /// Share of training documents used by `train`.
    pub fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            eventful_only: t.eventful_only,
            clip: t.clip,
            eval_shuffle_seed: t.eval_shuffle_seed,
            vocab_min_count: t.vocab_min_count,
            precision: Precision::default(),
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_keep: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            d_ff: m.d_ff,
            dropout_keep: m.dropout_keep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// Training fraction of the ablation matrix.
    pub ablation_fraction: f64,
    pub variants: Vec<Variant>,
    pub curve_variants: Vec<Variant>,
    pub gradcheck_instances: usize,
    pub gradcheck_tolerance: f64,
    pub gradcheck_seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![1, 2, 3],
            fractions: DEFAULT_FRACTIONS.to_vec(),
            ablation_fraction: 0.2,
            variants: Variant::ALL.to_vec(),
            curve_variants: vec![Variant::Full, Variant::NoLabels],
            gradcheck_instances: DEFAULT_INSTANCES,
            gradcheck_tolerance: DEFAULT_TOLERANCE,
            gradcheck_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: SyntheticConfig,
    pub train: TrainSection,
    pub model: ModelSection,
    pub lsl: LslConfig,
    pub tc: TcConfig,
    pub ablation: Ablation,
    pub experiment: ExperimentSection,
}

impl Settings {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            eventful_only: t.eventful_only,
            clip: t.clip,
            eval_shuffle_seed: t.eval_shuffle_seed,
            vocab_min_count: t.vocab_min_count,
            model: ModelConfig {
                d_model: self.model.d_model,
                d_ff: self.model.d_ff,
                dropout_keep: self.model.dropout_keep,
                lsl: self.lsl.clone(),
                tc: self.tc.clone(),
            },
            ablation: self.ablation,
        }
    }

    /// Semantic problems across every section.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = self.train_config().problems();
        if let Err(evdet_core::Error::Config(e)) = self.data.validate(&default_schema(self.data.n_types.max(2))) {
            errs.extend(e.into_iter().map(|m| format!("data: {m}")));
        }
        if !(self.train.fraction > 0.0 && self.train.fraction <= 1.0) {
            errs.push(format!("train.fraction = {} must lie in (0, 1]", self.train.fraction));
        }
        let x = &self.experiment;
        if x.seeds.is_empty() {
            errs.push("experiment.seeds must not be empty".into());
        }
        for (key, fractions) in [("experiment.fractions", &x.fractions), ("experiment.ablation_fraction", &vec![x.ablation_fraction])] {
            for f in fractions.iter().filter(|f| !(**f > 0.0 && **f <= 1.0)) {
                errs.push(format!("{key}: {f} outside (0, 1]"));
            }
        }
        if x.gradcheck_instances == 0 {
            errs.push("experiment.gradcheck_instances must be at least 1".into());
        }
        if !(x.gradcheck_tolerance > 0.0) {
            errs.push(format!("experiment.gradcheck_tolerance = {} must be positive", x.gradcheck_tolerance));
        }
        errs
    }

    /// Dotted-key view of every setting.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("settings serialize"), &mut out);
        out
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug)]
pub enum Origin {
    File(String),
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::File(p) => write!(f, "{p}"),
            Origin::Flag => write!(f, "--set"),
        }
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} configuration problem(s): {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

/// Accumulates layers over the defaults.
pub struct Layers {
    values: BTreeMap<String, Value>,
    defaults: BTreeMap<String, Value>,
    errors: Vec<String>,
}

impl Default for Layers {
    fn default() -> Self {
        let defaults = Settings::default().flatten();
        Layers {
            values: defaults.clone(),
            defaults,
            errors: Vec::new(),
        }
    }
}

impl Layers {
    fn apply(&mut self, key: &str, v: Value, origin: &Origin) {
        let Some(default) = self.defaults.get(key) else {
            self.errors.push(format!("{origin}: unknown key `{key}`"));
            return;
        };
        // Type-check against the defaults one key at a time so every bad
        // value is reported, not just the first.
        let mut probe = self.defaults.clone();
        probe.insert(key.to_string(), v.clone());
        match serde_json::from_value::<Settings>(unflatten(&probe)) {
            Ok(_) => {
                self.values.insert(key.to_string(), v);
            }
            Err(e) => {
                let expected = match default {
                    Value::Bool(_) => "a boolean",
                    Value::Number(_) => "a number",
                    Value::String(_) => "a string",
                    Value::Array(_) => "a list",
                    _ => "a value",
                };
                self.errors.push(format!("{origin}: `{key}` = {v}: expected {expected} ({e})"));
            }
        }
    }

    pub fn file(&mut self, path: &Path) {
        let origin = Origin::File(path.display().to_string());
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                self.errors.push(format!("{origin}: {e}"));
                return;
            }
        };
        let table: toml::Table = match toml::from_str(&text) {
            Ok(t) => t,
            Err(e) => {
                self.errors.push(format!("{origin}: {e}"));
                return;
            }
        };
        let json = serde_json::to_value(table).expect("toml converts to json");
        self.json(&json, &origin);
    }

    /// Applies a nested JSON object of settings.
    pub fn json(&mut self, json: &Value, origin: &Origin) {
        let mut flat = BTreeMap::new();
        flatten_into("", json, &mut flat);
        for (k, v) in flat {
            self.apply(&k, v, origin);
        }
    }

    /// Applies one `key=value` override; the value is read as a TOML literal
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) {
        let Some((key, raw)) = assignment.split_once('=') else {
            self.errors.push(format!("--set {assignment}: expected key=value"));
            return;
        };
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .map(|v| serde_json::to_value(v).expect("toml converts to json"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.apply(key.trim(), value, &Origin::Flag);
    }

    pub fn finish(self) -> Result<Settings, ConfigErrors> {
        let mut errors = self.errors;
        let settings = match serde_json::from_value::<Settings>(unflatten(&self.values)) {
            Ok(s) => s,
            Err(e) => {
                errors.push(e.to_string());
                return Err(ConfigErrors(errors));
            }
        };
        errors.extend(settings.problems());
        if errors.is_empty() {
            Ok(settings)
        } else {
            Err(ConfigErrors(errors))
        }
    }
}
