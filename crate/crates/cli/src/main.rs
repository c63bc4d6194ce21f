//! `evdet`: data generation, training, prediction, scoring and the analysis
//! protocols, each writing into its own run directory.

mod commands;
mod rundir;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{ConfigErrors, Layers, Origin};

#[derive(Parser)]
#[command(name = "evdet", version, about = "Label-conditioned event trigger detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, env = "EVDET_CONFIG")]
    config: Option<PathBuf>,
    /// Take the configuration snapshot of an earlier run; applied before
    /// `--config`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Override one setting, e.g. `--set lsl.tau=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed of the command (`data.seed` for gen-data, `train.seed` otherwise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train one model and score it on the test split.
    Train {
        /// Corpus directory with schema.json and train/dev/test.jsonl.
        #[arg(long)]
        data: PathBuf,
    },
    /// Tag sentences with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// JSONL with doc_id, sent_id and tokens.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against gold annotations.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Defaults to schema.json next to the gold file.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Train and score every ablation variant for every seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on nested fractions of the training documents.
    ScarceCurve {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every op and block.
    GradCheck,
    /// Attention mass by key group for a trained model.
    AttnReport {
        #[arg(long)]
        model: PathBuf,
        /// Annotated JSONL; gold triggers select the trigger positions.
        #[arg(long)]
        input: PathBuf,
        /// Hide pivot keys from every query.
        #[arg(long)]
        mask_pivots: bool,
    },
}

fn settings(global: &Global, command: &Command) -> Result<settings::Settings, ConfigErrors> {
    let mut layers = Layers::default();
    if let Some(path) = &global.manifest {
        match rundir::read_manifest(path) {
            Ok(m) => {
                let json = serde_json::to_value(&m.config).expect("settings serialize");
                layers.json(&json, &Origin::File(path.display().to_string()));
            }
            Err(e) => return Err(ConfigErrors(vec![format!("{e:#}")])),
        }
    }
    if let Some(path) = &global.config {
        layers.file(path);
    }
    for s in &global.set {
        layers.set(s);
    }
    if let Some(seed) = global.seed {
        let key = match command {
            Command::GenData => "data.seed",
            _ => "train.seed",
        };
        layers.set(&format!("{key}={seed}"));
    }
    layers.finish()
}

fn report(kind: &str, problems: &[String]) {
    let body = serde_json::json!({ "error": kind, "problems": problems });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = match settings(&cli.global, &cli.command) {
        Ok(s) => s,
        Err(e) => {
            report("config", &e.0);
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli.command, &settings, &cli.global.out) {
        Ok(code) => code,
        Err(e) => {
            let problems = match e.downcast_ref::<evdet_core::Error>() {
                Some(evdet_core::Error::Config(list)) => list.clone(),
                _ => e.chain().map(|c| c.to_string()).collect(),
            };
            report("runtime", &problems);
            ExitCode::FAILURE
        }
    }
}
