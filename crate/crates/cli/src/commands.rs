use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use evdet_core::corpus::{default_schema, generate_synthetic, read_corpus, read_schema, read_sentences, write_corpus, write_schema, CorpusSplit, EventSchema};
use evdet_core::eval::{predictions_to_jsonl, read_predictions, score, Prediction};
use evdet_core::experiments::{run_ablation_matrix, run_scarce_curve, AblationTable, RunResult};
use evdet_core::gradsuite::run_suite;
use evdet_core::model::EventDetector;
use evdet_core::train::{evaluate, train_with, EpochLog};
use evdet_core::Scalar;

use crate::rundir::RunDir;
use crate::settings::{Precision, Settings};
use crate::Command;

const CORPUS_FILES: [&str; 4] = ["schema.json", "train.jsonl", "dev.jsonl", "test.jsonl"];

pub fn run(command: &Command, s: &Settings, out: &Path) -> Result<ExitCode> {
    match command {
        Command::GenData => gen_data(s, out),
        Command::Train { data } => dispatch(s, |p| match p {
            Precision::F32 => train_cmd::<f32>(s, out, data),
            Precision::F64 => train_cmd::<f64>(s, out, data),
        }),
        Command::Predict { model, input } => dispatch(s, |p| match p {
            Precision::F32 => predict::<f32>(s, out, model, input),
            Precision::F64 => predict::<f64>(s, out, model, input),
        }),
        Command::Eval { gold, pred, schema } => eval(s, out, gold, pred, schema.as_deref()),
        Command::Ablate { data } => dispatch(s, |p| match p {
            Precision::F32 => ablate::<f32>(s, out, data),
            Precision::F64 => ablate::<f64>(s, out, data),
        }),
        Command::ScarceCurve { data } => dispatch(s, |p| match p {
            Precision::F32 => curve::<f32>(s, out, data),
            Precision::F64 => curve::<f64>(s, out, data),
        }),
        Command::GradCheck => grad_check(s, out),
        Command::AttnReport { model, input, mask_pivots } => dispatch(s, |p| match p {
            Precision::F32 => attn_report::<f32>(s, out, model, input, *mask_pivots),
            Precision::F64 => attn_report::<f64>(s, out, model, input, *mask_pivots),
        }),
    }
}

fn dispatch(s: &Settings, f: impl FnOnce(Precision) -> Result<ExitCode>) -> Result<ExitCode> {
    f(s.train.precision)
}

fn done(dir: RunDir) -> Result<ExitCode> {
    let path = dir.finish()?;
    println!("run directory: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_corpus(data: &Path, run: &mut RunDir) -> Result<(EventSchema, CorpusSplit)> {
    let schema = read_schema(data.join("schema.json"))?;
    let split = read_corpus(data, &schema)?;
    for f in CORPUS_FILES {
        run.input(&data.join(f))?;
    }
    run.arg("data", data.display());
    Ok((schema, split))
}

fn epoch_line(e: &EpochLog) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  dev P {:.4} R {:.4} F1 {:.4}  best {:.4}",
        e.epoch, e.train_loss, e.dev.precision, e.dev.recall, e.dev.f1, e.best_dev_f1
    );
}

fn progress(r: &RunResult) {
    eprintln!(
        "{:<20} fraction {:.2} seed {:>3}  test F1 {:.4}  (best epoch {})",
        r.variant.name(),
        r.fraction,
        r.seed,
        r.test.all.f1,
        r.log.best_epoch
    );
}

fn gen_data(s: &Settings, out: &Path) -> Result<ExitCode> {
    let schema = default_schema(s.data.n_types);
    let split = generate_synthetic(&schema, &s.data)?;
    let run = RunDir::create(out, "gen-data", s, s.data.seed)?;
    write_corpus(&split, &run.path)?;
    write_schema(&schema, run.file("schema.json"))?;
    for (name, part) in split.parts() {
        println!("{name}: {} sentences", part.len());
    }
    done(run)
}

fn train_cmd<T: Scalar>(s: &Settings, out: &Path, data: &Path) -> Result<ExitCode> {
    let config = s.train_config();
    let mut run = RunDir::create(out, "train", s, config.seed)?;
    let (schema, split) = load_corpus(data, &mut run)?;
    let split = split.subsample_training(s.train.fraction, config.seed)?;
    let trained = train_with::<T>(&config, &split, &schema, epoch_line)?;
    let (report, preds) = trained.evaluate(&config, &split.test)?;
    trained.model.save(&trained.store, &run.file("model"))?;
    run.write("train_log.json", trained.log.to_json()? + "\n")?;
    run.write_json("eval_report.json", &report)?;
    run.write("predictions.jsonl", predictions_to_jsonl(&preds)?)?;
    println!(
        "best epoch {} (dev F1 {:.4}); test P {:.4} R {:.4} F1 {:.4}",
        trained.log.best_epoch, trained.log.best_dev_f1, report.all.precision, report.all.recall, report.all.f1
    );
    done(run)
}

/// Loads a model directory, falling back to the parent of a run's `model/`.
fn load_model<T: Scalar>(path: &Path) -> Result<(EventDetector, evdet_core::ParamStore<T>)> {
    let dir: PathBuf = if path.join("model.json").exists() {
        path.to_path_buf()
    } else {
        path.join("model")
    };
    EventDetector::load::<T>(&dir).with_context(|| format!("loading model from {}", path.display()))
}

fn predict<T: Scalar>(s: &Settings, out: &Path, model_dir: &Path, input: &Path) -> Result<ExitCode> {
    let (model, store) = load_model::<T>(model_dir)?;
    let mut run = RunDir::create(out, "predict", s, s.train.eval_shuffle_seed)?;
    run.input(input)?;
    run.arg("model", model_dir.display());
    run.arg("input", input.display());
    let sentences = read_sentences(input, &model.schema)?;
    let labels = model.eval_labels(s.train.eval_shuffle_seed);
    let (_, preds) = evaluate(&model, &store, &sentences, &labels)?;
    run.write("predictions.jsonl", predictions_to_jsonl(&preds)?)?;
    println!("{} sentences tagged", preds.len());
    done(run)
}

fn eval(s: &Settings, out: &Path, gold: &Path, pred: &Path, schema: Option<&Path>) -> Result<ExitCode> {
    let schema_path = match schema {
        Some(p) => p.to_path_buf(),
        None => gold.parent().unwrap_or(Path::new(".")).join("schema.json"),
    };
    let schema = read_schema(&schema_path).with_context(|| "eval needs --schema or schema.json beside the gold file")?;
    let gold_sents = read_sentences(gold, &schema)?;
    let preds: Vec<Prediction> = read_predictions(pred)?;
    let report = score(&gold_sents, &preds)?;
    let mut run = RunDir::create(out, "eval", s, 0)?;
    for p in [&schema_path, &gold.to_path_buf(), &pred.to_path_buf()] {
        run.input(p)?;
    }
    run.arg("gold", gold.display());
    run.arg("pred", pred.display());
    run.write_json("eval_report.json", &report)?;
    println!("P {:.4} R {:.4} F1 {:.4}", report.all.precision, report.all.recall, report.all.f1);
    for (name, slice) in [("1/1", report.single), ("1/N", report.multi)] {
        match slice {
            Some(x) => println!("{name}: F1 {:.4} over {} sentences", x.f1, x.sentences),
            None => println!("{name}: N/A"),
        }
    }
    done(run)
}

fn ablate<T: Scalar>(s: &Settings, out: &Path, data: &Path) -> Result<ExitCode> {
    let config = s.train_config();
    let x = &s.experiment;
    let mut run = RunDir::create(out, "ablate", s, x.seeds[0])?;
    let (schema, split) = load_corpus(data, &mut run)?;
    let (table, runs) = run_ablation_matrix::<T>(&split, &schema, &config, &x.variants, x.ablation_fraction, &x.seeds, progress)?;
    run.write_json("ablation.json", &table)?;
    run.write_json("runs.json", &runs)?;
    run.write("ablation.csv", ablation_csv(&table))?;
    for r in &table.rows {
        println!("{:<20} median F1 {:.4}  delta {:+.4}", r.variant.name(), r.median_f1, r.delta_f1);
    }
    done(run)
}

fn ablation_csv(t: &AblationTable) -> String {
    let mut out = String::from("variant,median_f1,delta_f1\n");
    for r in &t.rows {
        out.push_str(&format!("{},{},{}\n", r.variant.name(), r.median_f1, r.delta_f1));
    }
    out
}

fn curve<T: Scalar>(s: &Settings, out: &Path, data: &Path) -> Result<ExitCode> {
    let config = s.train_config();
    let x = &s.experiment;
    let mut run = RunDir::create(out, "scarce-curve", s, x.seeds[0])?;
    let (schema, split) = load_corpus(data, &mut run)?;
    let mut curves = Vec::new();
    for &variant in &x.curve_variants {
        let (curve, runs) = run_scarce_curve::<T>(&split, &schema, &config, variant, &x.fractions, &x.seeds, progress)?;
        run.write(&format!("curve_{}.csv", variant.name()), curve.to_csv())?;
        run.write_json(&format!("runs_{}.json", variant.name()), &runs)?;
        for (f, m) in &curve.medians {
            println!("{:<20} fraction {f:.2}  median F1 {m:.4}", variant.name());
        }
        curves.push(curve);
    }
    run.write_json("curve.json", &curves)?;
    done(run)
}

fn grad_check(s: &Settings, out: &Path) -> Result<ExitCode> {
    let x = &s.experiment;
    let report = run_suite(x.gradcheck_instances, x.gradcheck_seed, x.gradcheck_tolerance)?;
    let mut run = RunDir::create(out, "grad-check", s, x.gradcheck_seed)?;
    run.write_json("gradcheck.json", &report)?;
    for g in &report.groups {
        println!(
            "{} {:<24} {:>3} instances  max rel err {:.2e}",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.instances,
            g.max_rel_err
        );
    }
    let passed = report.passed();
    done(run)?;
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{}", serde_json::json!({"error": "gradcheck", "problems": report.groups.iter().filter(|g| !g.passed).map(|g| &g.name).collect::<Vec<_>>()}));
        Ok(ExitCode::from(3))
    }
}

fn attn_report<T: Scalar>(s: &Settings, out: &Path, model_dir: &Path, input: &Path, mask: bool) -> Result<ExitCode> {
    let (model, store) = load_model::<T>(model_dir)?;
    let sentences = read_sentences(input, &model.schema)?;
    if sentences.is_empty() {
        bail!("{} holds no sentences", input.display());
    }
    let labels = model.eval_labels(s.train.eval_shuffle_seed);
    let mut heads = Vec::new();
    let mut trig = (0.0, 0usize);
    let mut other = (0.0, 0usize);
    for chunk in sentences.chunks(evdet_core::model::PREDICT_CHUNK) {
        let r = model.attention_report(&store, chunk, &labels, mask)?;
        if let Some(t) = r.trigger_to_pivots {
            trig = (trig.0 + t * chunk.len() as f64, trig.1 + chunk.len());
        }
        if let Some(o) = r.other_to_pivots {
            other = (other.0 + o * chunk.len() as f64, other.1 + chunk.len());
        }
        heads.push(r.heads);
    }
    let mut run = RunDir::create(out, "attn-report", s, s.train.eval_shuffle_seed)?;
    run.input(input)?;
    run.arg("model", model_dir.display());
    run.arg("mask_pivots", mask);
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    let body = serde_json::json!({
        "pivot_keys_masked": mask,
        "trigger_to_pivots": mean(trig),
        "other_to_pivots": mean(other),
        "chunks": heads,
    });
    run.write_json("attention.json", &body)?;
    println!(
        "mean attention to pivots: trigger tokens {:?}, other tokens {:?}",
        mean(trig),
        mean(other)
    );
    done(run)
}
