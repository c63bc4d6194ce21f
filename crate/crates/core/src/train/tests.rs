use super::*;
use crate::corpus::{default_schema, generate_synthetic, SyntheticConfig};
use crate::model::tests::tiny_config;
use crate::Tensor;

fn store_of(values: &[(&str, f64)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, v) in values {
        s.insert(*n, Tensor::scalar(*v));
    }
    s
}

fn grads_of(values: &[(&str, f64)]) -> BTreeMap<String, Vec<f64>> {
    values.iter().map(|(n, v)| (n.to_string(), vec![*v])).collect()
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut s = store_of(&[("a", 0.5)]);
    let mut adam = Adam::new(0.1);
    adam.step(&mut s, &grads_of(&[("a", 0.0)])).unwrap();
    assert_eq!(s.get("a").unwrap().data()[0], 0.5);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut s = store_of(&[("a", 1.0)]);
    let mut adam = Adam::new(0.1);
    adam.step(&mut s, &grads_of(&[("a", 1.0)])).unwrap();
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    assert!((s.get("a").unwrap().data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_repeated_gradient_does_not_grow_the_step() {
    let mut s = store_of(&[("a", 0.0)]);
    let mut adam = Adam::new(0.01);
    let g = grads_of(&[("a", 0.3)]);
    adam.step(&mut s, &g).unwrap();
    let d1 = s.get("a").unwrap().data()[0];
    adam.step(&mut s, &g).unwrap();
    let d2 = s.get("a").unwrap().data()[0] - d1;
    assert!(d2.abs() <= d1.abs() + 1e-15, "{d1} {d2}");
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut s = store_of(&[("a", 0.0), ("b", 1.0)]);
    let mut adam = Adam::new(0.01);
    match adam.step(&mut s, &grads_of(&[("a", 1.0), ("b", f64::NAN)])) {
        Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "b"),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.get("a").unwrap().data()[0], 0.0);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn clipping_bounds_the_joint_norm() {
    let mut g = grads_of(&[("a", 3.0), ("b", 4.0)]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
    let mut small = grads_of(&[("a", 0.1)]);
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small["a"][0], 0.1);
}

#[test]
fn early_stopping_returns_the_peak() {
    let mut s = EarlyStopping::new(5);
    let curve = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9, 0.8, 0.9, 0.7, 0.85, 0.6, 0.95];
    let mut stopped = None;
    for (i, f) in curve.iter().enumerate() {
        if s.observe(i + 1, *f) == Verdict::Stop {
            stopped = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped, Some(12));
    assert_eq!(s.best_epoch, 7);
}

#[test]
fn config_errors_are_exhaustive() {
    let mut c = TrainConfig {
        lr: 0.0,
        batch_size: 0,
        patience: 60,
        clip: -1.0,
        ..TrainConfig::default()
    };
    c.model.dropout_keep = 2.0;
    match c.validate() {
        Err(Error::Config(e)) => assert_eq!(e.len(), 5, "{e:?}"),
        other => panic!("{other:?}"),
    }
    assert!(TrainConfig::default().validate().is_ok());
}

fn small_run(ablation: Ablation, epochs: usize) -> (TrainConfig, CorpusSplit, EventSchema) {
    let schema = default_schema(3);
    let split = generate_synthetic(
        &schema,
        &SyntheticConfig {
            n_types: 3,
            sents_per_split: [48, 12, 12],
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let config = TrainConfig {
        lr: 3e-3,
        max_epochs: epochs,
        patience: epochs,
        model: tiny_config(),
        ablation,
        ..TrainConfig::default()
    };
    (config, split, schema)
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let (config, split, schema) = small_run(Ablation::default(), 3);
    let a = train::<f64>(&config, &split, &schema).unwrap();
    let b = train::<f64>(&config, &split, &schema).unwrap();
    assert_eq!(a.log.to_json().unwrap(), b.log.to_json().unwrap());
    assert_eq!(a.store, b.store);
    assert!(a.log.dead_params.is_empty(), "{:?}", a.log.dead_params);
    let mut running = f64::NEG_INFINITY;
    for e in &a.log.epochs {
        running = running.max(e.dev.f1);
        assert_eq!(e.best_dev_f1, running);
    }
    let (dev, _) = a.evaluate(&config, &split.dev).unwrap();
    assert_eq!(dev.all.f1, a.log.best_dev_f1);
}

#[test]
fn bypass_leaves_learner_untouched() {
    let (config, split, schema) = small_run(
        Ablation {
            bypass_lsl: true,
            ..Ablation::default()
        },
        2,
    );
    let t = train::<f64>(&config, &split, &schema).unwrap();
    let init = t.model.init_params::<f64>(config.seed);
    let mut lsl = 0;
    for (name, value) in init.iter().filter(|(n, _)| n.starts_with("lsl.")) {
        assert_eq!(t.store.get(name).unwrap(), value, "{name}");
        lsl += 1;
    }
    assert!(lsl > 0);
    assert!(t.log.dead_params.is_empty(), "{:?}", t.log.dead_params);
    let changed = init.iter().filter(|(n, v)| t.store.get(n).unwrap() != *v).count();
    assert!(changed > 0);
}

#[test]
fn loss_decreases_on_a_tiny_corpus() {
    let (config, split, schema) = small_run(Ablation::default(), 4);
    let t = train::<f32>(&config, &split, &schema).unwrap();
    let losses: Vec<f64> = t.log.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}
