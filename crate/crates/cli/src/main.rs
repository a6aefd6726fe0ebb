use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use promptfed::data::{generate_synthetic, load_jsonl, DatasetSchema, PAD_ID};
use promptfed::encoder::Encoder;
use promptfed::exec::Execution;
use promptfed::federation::evaluate_global;
use promptfed::generator::GeneratorParams;
use promptfed::harness::{self, ExperimentConfig, World};
use promptfed::{Error, Result};

/// Federated training of an input-conditioned prompt generator over a frozen
/// encoder.
#[derive(Parser)]
#[command(name = "promptfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Federated rounds (rounds before the request, for `unlearn`).
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true, value_parser = ["sequential", "parallel"])]
    execution: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// One federated run.
    Train(Overrides),
    /// The same run with [P; x], x only and P only encoder inputs.
    Ablate(Overrides),
    /// Selection ratio × prompt length × hidden size grid.
    Grid(Overrides),
    /// Train, forget part of one client's data, replace the global generator.
    Unlearn(Overrides),
    /// Accuracy of a saved generator over a saved encoder.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        /// JSON-lines dataset; defaults to the config's test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the configured train and test sets as JSON lines.
    GenData(Overrides),
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(rounds) = o.rounds {
        cfg.rounds = rounds;
        cfg.unlearn.rounds_before = rounds;
    }
    match o.execution.as_deref() {
        Some("sequential") => cfg.federation.execution = Execution::Sequential,
        Some("parallel") => cfg.federation.execution = Execution::Parallel,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train(o) => {
            let cfg = load_config(&o)?;
            let world = World::build(&cfg)?;
            let out = harness::run_experiment_in(&cfg, &world, Default::default())?;
            Ok(json!({
                "run_dir": out.run_dir.as_deref().map(path_str),
                "config_digest": out.config_digest,
                "rounds": cfg.rounds,
                "final_accuracy": out.final_accuracy,
                "bayes_accuracy": world.bayes_accuracy,
                "total_bytes": out.total_bytes,
            }))
        }
        Command::Ablate(o) => {
            let cfg = load_config(&o)?;
            let out = harness::run_ablation(&cfg)?;
            let finals: serde_json::Map<String, Value> = out
                .series
                .iter()
                .map(|(mode, run)| (mode.as_str().to_string(), json!(run.final_accuracy)))
                .collect();
            Ok(json!({ "run_dir": path_str(&out.run_dir), "final_accuracy": finals }))
        }
        Command::Grid(o) => {
            let cfg = load_config(&o)?;
            let out = harness::run_grid(&cfg)?;
            Ok(json!({ "run_dir": out.run_dir.as_deref().map(path_str), "rows": out.rows }))
        }
        Command::Unlearn(o) => {
            let cfg = load_config(&o)?;
            Ok(serde_json::to_value(harness::run_unlearning(&cfg)?)?)
        }
        Command::Eval {
            overrides,
            encoder,
            generator,
            data,
        } => {
            let encoder = Encoder::load(&encoder)?.freeze();
            let generator = GeneratorParams::load(&generator)?;
            let ecfg = *encoder.config();
            let test = match data {
                Some(path) => load_jsonl(
                    &path,
                    DatasetSchema {
                        vocab_size: ecfg.vocab_size,
                        num_classes: ecfg.num_classes,
                        pad_id: Some(PAD_ID),
                    },
                )?,
                None => {
                    let cfg = load_config(&overrides)?;
                    generate_synthetic(&cfg.reference_spec()?.with_seed(cfg.test_seed()), cfg.data.test_size)?
                }
            };
            let accuracy = evaluate_global(&generator, &test, &encoder, Execution::Parallel)?;
            Ok(json!({
                "accuracy": accuracy,
                "samples": test.len(),
                "encoder_digest": encoder.digest(),
                "generator_digest": generator.digest(),
            }))
        }
        Command::GenData(o) => {
            let cfg = load_config(&o)?;
            let spec = cfg.reference_spec()?;
            let train = generate_synthetic(&spec, cfg.data.train_size)?;
            let test = generate_synthetic(&spec.with_seed(cfg.test_seed()), cfg.data.test_size)?;
            let dir = &cfg.out_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
            train.save_jsonl(&dir.join("train.jsonl"))?;
            test.save_jsonl(&dir.join("test.jsonl"))?;
            let bayes = spec.bayes_accuracy(&test);
            let spec_path = dir.join("spec.json");
            let text = serde_json::to_string_pretty(&json!({ "spec": spec, "bayes_accuracy": bayes }))?;
            std::fs::write(&spec_path, text).map_err(|e| Error::Input(format!("{}: {e}", spec_path.display())))?;
            Ok(json!({
                "dir": path_str(dir),
                "train_digest": train.digest(),
                "test_digest": test.digest(),
                "bayes_accuracy": bayes,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
