//! Ablation matrix, scarce-data curve and label-order sensitivity.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::corpus::{AnnotatedSentence, CorpusSplit, EventSchema};
use crate::error::{Error, Result};
use crate::eval::{score, EvalReport, Prediction};
use crate::lsl::shuffle_labels;
use crate::model::{Ablation, EventDetector, PivotLayout};
use crate::scalar::Scalar;
use crate::train::{train_with, EpochLog, TrainConfig, TrainLog};

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// The five rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    BypassLsl,
    NoLabels,
    SmallTc,
    SmallTcNoLabels,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::BypassLsl,
        Variant::NoLabels,
        Variant::SmallTc,
        Variant::SmallTcNoLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BypassLsl => "bypass_lsl",
            Variant::NoLabels => "no_labels",
            Variant::SmallTc => "small_tc",
            Variant::SmallTcNoLabels => "small_tc_no_labels",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::BypassLsl => a.bypass_lsl = true,
            Variant::NoLabels => a.no_labels = true,
            Variant::SmallTc => a.small_tc = true,
            Variant::SmallTcNoLabels => {
                a.small_tc = true;
                a.no_labels = true;
            }
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown variant `{s}`")))
    }
}

/// One training run on a (possibly subsampled) split, scored on test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub train_sentences: usize,
    pub test: EvalReport,
    pub log: TrainLog,
}

/// Trains `variant` with `seed` on the `fraction` subsample (drawn with the
/// same seed, so fractions nest) and scores the best checkpoint on test.
pub fn run_variant<T: Scalar>(
    split: &CorpusSplit,
    schema: &EventSchema,
    base: &TrainConfig,
    variant: Variant,
    fraction: f64,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    let data = split.subsample_training(fraction, seed)?;
    let config = TrainConfig {
        seed,
        ablation: variant.ablation(),
        ..base.clone()
    };
    let trained = train_with::<T>(&config, &data, schema, on_epoch)?;
    let (test, _) = trained.evaluate(&config, &data.test)?;
    Ok(RunResult {
        variant,
        fraction,
        seed,
        train_sentences: data.train.len(),
        test,
        log: trained.log,
    })
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub f1: Vec<f64>,
    pub median_f1: f64,
    /// Median F1 minus the full model's median F1.
    pub delta_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aggregates runs at `fraction`; rows follow [`Variant::ALL`] order and
    /// only variants present in `runs` appear.
    pub fn from_runs(runs: &[RunResult], fraction: f64) -> Self {
        let mut by: BTreeMap<Variant, Vec<&RunResult>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.fraction == fraction) {
            by.entry(r.variant).or_default().push(r);
        }
        let mut seeds: Vec<u64> = by.values().flatten().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let med = |v: &[&RunResult]| median(&v.iter().map(|r| r.test.all.f1).collect::<Vec<_>>());
        let full = by.get(&Variant::Full).map(|v| med(v)).unwrap_or(f64::NAN);
        let rows = Variant::ALL
            .into_iter()
            .filter_map(|variant| {
                let v = by.get(&variant)?;
                let median_f1 = med(v);
                Some(AblationRow {
                    variant,
                    f1: v.iter().map(|r| r.test.all.f1).collect(),
                    median_f1,
                    delta_f1: median_f1 - full,
                })
            })
            .collect();
        AblationTable { fraction, seeds, rows }
    }

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains every variant for every seed at `fraction`.
pub fn run_ablation_matrix<T: Scalar>(
    split: &CorpusSplit,
    schema: &EventSchema,
    base: &TrainConfig,
    variants: &[Variant],
    fraction: f64,
    seeds: &[u64],
    mut progress: impl FnMut(&RunResult),
) -> Result<(AblationTable, Vec<RunResult>)> {
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let r = run_variant::<T>(split, schema, base, variant, fraction, seed, |_| {})?;
            progress(&r);
            runs.push(r);
        }
    }
    Ok((AblationTable::from_runs(&runs, fraction), runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub variant: Variant,
    pub points: Vec<CurvePoint>,
    /// `(fraction, median F1)` in ascending fraction order.
    pub medians: Vec<(f64, f64)>,
}

impl Curve {
    pub fn from_runs(runs: &[RunResult], variant: Variant) -> Self {
        let points: Vec<CurvePoint> = runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| CurvePoint {
                fraction: r.fraction,
                seed: r.seed,
                precision: r.test.all.precision,
                recall: r.test.all.recall,
                f1: r.test.all.f1,
            })
            .collect();
        let mut fractions: Vec<f64> = points.iter().map(|p| p.fraction).collect();
        fractions.sort_by(|a, b| a.total_cmp(b));
        fractions.dedup();
        let medians = fractions
            .into_iter()
            .map(|f| {
                let v: Vec<f64> = points.iter().filter(|p| p.fraction == f).map(|p| p.f1).collect();
                (f, median(&v))
            })
            .collect();
        Curve { variant, points, medians }
    }

    pub fn median_at(&self, fraction: f64) -> Option<f64> {
        self.medians.iter().find(|m| m.0 == fraction).map(|m| m.1)
    }

    /// Median F1 at the largest fraction minus median F1 at the smallest.
    pub fn drop(&self) -> Option<f64> {
        Some(self.medians.last()?.1 - self.medians.first()?.1)
    }

    /// CSV with columns `fraction,seed,P,R,F1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,seed,P,R,F1\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{},{}\n", p.fraction, p.seed, p.precision, p.recall, p.f1));
        }
        out
    }
}

pub fn run_scarce_curve<T: Scalar>(
    split: &CorpusSplit,
    schema: &EventSchema,
    base: &TrainConfig,
    variant: Variant,
    fractions: &[f64],
    seeds: &[u64],
    mut progress: impl FnMut(&RunResult),
) -> Result<(Curve, Vec<RunResult>)> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Param(format!("curve fraction {f} outside (0, 1]")));
    }
    let mut runs = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let r = run_variant::<T>(split, schema, base, variant, fraction, seed, |_| {})?;
            progress(&r);
            runs.push(r);
        }
    }
    Ok((Curve::from_runs(&runs, variant), runs))
}

/// How much eval-mode predictions depend on the order of type blocks in the
/// label sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSensitivity {
    pub orders: usize,
    /// Share of sentence tokens whose tag matches the first order's tag
    /// under every other order.
    pub token_agreement: f64,
    /// Sentences whose decoded spans are identical under every order.
    pub sentence_agreement: f64,
    pub f1: Vec<f64>,
}

pub fn label_order_sensitivity<T: Scalar>(
    model: &EventDetector,
    store: &ParamStore<T>,
    gold: &[AnnotatedSentence],
    orders: usize,
    seed: u64,
    layout: PivotLayout,
) -> Result<OrderSensitivity> {
    let sentences: Vec<Vec<String>> = gold.iter().map(|s| s.tokens.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut f1 = Vec::new();
    for _ in 0..orders.max(1) {
        let labels = shuffle_labels(&model.schema, &model.vocab, &mut rng);
        let tags = model.predict_tags(store, &sentences, &labels, layout)?;
        let preds: Vec<Prediction> = gold
            .iter()
            .zip(&tags)
            .map(|(s, t)| Prediction {
                doc_id: s.doc_id.clone(),
                sent_id: s.sent_id.clone(),
                triggers: model.tags.decode(t),
            })
            .collect();
        f1.push(score(gold, &preds)?.all.f1);
        runs.push(tags);
    }
    let first = &runs[0];
    let mut same_tokens = 0;
    let mut tokens = 0;
    let mut same_sentences = 0;
    for (i, reference) in first.iter().enumerate() {
        tokens += reference.len();
        let mut all_equal = true;
        for (j, &t) in reference.iter().enumerate() {
            if runs.iter().all(|r| r[i][j] == t) {
                same_tokens += 1;
            } else {
                all_equal = false;
            }
        }
        let spans = model.tags.decode(reference);
        if all_equal || runs.iter().all(|r| model.tags.decode(&r[i]) == spans) {
            same_sentences += 1;
        }
    }
    Ok(OrderSensitivity {
        orders: runs.len(),
        token_agreement: same_tokens as f64 / tokens.max(1) as f64,
        sentence_agreement: same_sentences as f64 / first.len().max(1) as f64,
        f1,
    })
}
