//! Config-driven experiments: single runs, the input-mode ablation, the
//! ratio × prompt length × hidden size grid, and the unlearning protocol.
//!
//! Every run writes into `out_dir/<kind>-<config digest prefix>/`:
//! `config.toml`, `manifest.json` (data and encoder digests), `metrics.jsonl`
//! (one object per round, written as the run progresses), a summary CSV and
//! the final generator checkpoint.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_jsonl, DatasetSchema, SyntheticTaskSpec, TokenizedDataset, PAD_ID};
use crate::encoder::{pretrain_backbone, Encoder};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{evaluate_global, partition, Federation};
use crate::generator::{param_count, GeneratorParams, InputMode};
use crate::rng::{rng_for, Stream};
use crate::unlearning::{
    evaluate_forgetting, local_unlearn, server_replace, ClientAccuracy, ForgetSelection, UnlearnRequest,
};

pub use config::{BackboneMode, ExperimentConfig};

/// Everything shared by runs that differ only in generator or federation
/// settings: the frozen encoder and the train/test data.
#[derive(Clone, Debug)]
pub struct World {
    pub encoder: Arc<Encoder>,
    pub train: TokenizedDataset,
    pub test: TokenizedDataset,
    pub reference: Option<SyntheticTaskSpec>,
    pub bayes_accuracy: Option<f64>,
    pub pretrain_losses: Vec<f64>,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<World> {
        let (train, test, reference) = match (&cfg.data.train_path, &cfg.data.test_path) {
            (Some(train), Some(test)) => {
                let schema = DatasetSchema {
                    vocab_size: cfg.data.vocab_size,
                    num_classes: cfg.data.num_classes,
                    pad_id: Some(PAD_ID),
                };
                (load_jsonl(train, schema)?, load_jsonl(test, schema)?, None)
            }
            _ => {
                let spec = cfg.reference_spec()?;
                let train = generate_synthetic(&spec, cfg.data.train_size)?;
                let test = generate_synthetic(&spec.with_seed(cfg.test_seed()), cfg.data.test_size)?;
                (train, test, Some(spec))
            }
        };
        if test.is_empty() {
            return Err(Error::Config("test set is empty".into()));
        }
        let ecfg = cfg.encoder_config();
        let (encoder, pretrain_losses) = match (&cfg.backbone.path, cfg.backbone.mode) {
            (Some(path), _) => {
                let enc = Encoder::load(path)?;
                if enc.config() != &ecfg {
                    return Err(Error::Config(format!("{} does not match the encoder config", path.display())));
                }
                (enc.freeze(), Vec::new())
            }
            (None, BackboneMode::Random) => (Encoder::frozen_random(ecfg, cfg.backbone.seed)?, Vec::new()),
            (None, BackboneMode::Pretrained) => {
                let pretext = generate_synthetic(&cfg.pretext_spec()?, cfg.backbone.pretext_size)?;
                let out = pretrain_backbone(ecfg, &pretext, cfg.backbone.pretrain_options(), cfg.backbone.seed)?;
                (out.encoder, out.losses)
            }
        };
        let bayes_accuracy = reference.as_ref().map(|s| s.bayes_accuracy(&test));
        Ok(World {
            encoder: Arc::new(encoder),
            train,
            test,
            reference,
            bayes_accuracy,
            pretrain_losses,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_digest: String,
    pub seed: u64,
    pub round: u64,
    pub selected: Vec<usize>,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub bytes_transmitted: usize,
    pub total_bytes: usize,
    pub wall_time_ms: f64,
}

impl MetricsRow {
    /// Copy with timing zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> MetricsRow {
        MetricsRow {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_digest: String,
    pub rows: Vec<MetricsRow>,
    /// Global generator after every round, when requested.
    pub trajectory: Vec<GeneratorParams>,
    pub final_generator: GeneratorParams,
    pub final_accuracy: f64,
    pub total_bytes: usize,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub keep_trajectory: bool,
}

fn should_evaluate(cfg: &ExperimentConfig, round: usize) -> bool {
    round == cfg.rounds || (cfg.eval_every > 0 && round.is_multiple_of(cfg.eval_every))
}

fn new_federation(cfg: &ExperimentConfig, world: &World) -> Result<Federation> {
    let rc = cfg.round_config();
    let shards = partition(&world.train, rc.num_clients, cfg.federation.partition, cfg.seed)?;
    let initial = GeneratorParams::init(cfg.generator_config(), cfg.seed)?;
    Federation::new(world.encoder.clone(), initial, shards, rc, cfg.seed)
}

/// `rounds` federated rounds in memory. `observe` sees each metrics row and
/// the global generator it describes.
pub fn run_federated(
    cfg: &ExperimentConfig,
    world: &World,
    opts: RunOptions,
    mut observe: impl FnMut(&MetricsRow, &GeneratorParams) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let config_digest = cfg.digest();
    let mut fed = new_federation(cfg, world)?;
    let exec = cfg.federation.execution;
    let encoder_digest_before = fed.encoder().digest();

    let started = Instant::now();
    let initial = evaluate_global(fed.global(), &world.test, &world.encoder, exec)?;
    let row = MetricsRow {
        config_digest: config_digest.clone(),
        seed: cfg.seed,
        round: 0,
        selected: Vec::new(),
        accuracy: Some(initial),
        loss: None,
        bytes_transmitted: 0,
        total_bytes: 0,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    observe(&row, fed.global())?;
    let mut rows = vec![row];
    let mut trajectory = Vec::new();
    let mut final_accuracy = initial;

    for t in 1..=cfg.rounds {
        let test = should_evaluate(cfg, t).then_some(&world.test);
        let m = fed.run_round(test)?;
        if let Some(acc) = m.accuracy {
            final_accuracy = acc;
        }
        let row = MetricsRow {
            config_digest: config_digest.clone(),
            seed: cfg.seed,
            round: m.round,
            selected: m.selected,
            accuracy: m.accuracy,
            loss: m.mean_loss,
            bytes_transmitted: m.bytes_transmitted,
            total_bytes: fed.transport().total_bytes(),
            wall_time_ms: m.wall_time_ms,
        };
        log::debug!("round {t}: accuracy {:?} loss {:?}", row.accuracy, row.loss);
        observe(&row, fed.global())?;
        rows.push(row);
        if opts.keep_trajectory {
            trajectory.push(fed.global().clone());
        }
    }

    Ok(RunOutcome {
        config_digest,
        rows,
        trajectory,
        final_generator: fed.global().clone(),
        final_accuracy,
        total_bytes: fed.transport().total_bytes(),
        encoder_digest_before,
        encoder_digest_after: fed.encoder().digest(),
        run_dir: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    pub train_digest: String,
    pub test_digest: String,
    pub train_size: usize,
    pub test_size: usize,
    pub bayes_accuracy: Option<f64>,
    pub encoder_digest: String,
    pub pretrain_final_loss: Option<f64>,
    pub param_count: usize,
    pub serialized_size: usize,
}

impl Manifest {
    pub fn new(kind: &str, cfg: &ExperimentConfig, world: &World) -> Result<Manifest> {
        let gcfg = cfg.generator_config();
        Ok(Manifest {
            kind: kind.to_string(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            train_digest: world.train.digest(),
            test_digest: world.test.digest(),
            train_size: world.train.len(),
            test_size: world.test.len(),
            bayes_accuracy: world.bayes_accuracy,
            encoder_digest: world.encoder.digest(),
            pretrain_final_loss: world.pretrain_losses.last().copied(),
            param_count: param_count(&gcfg)?,
            serialized_size: GeneratorParams::zeros(gcfg)?.serialized_size(),
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `out_dir/<kind>-<first 12 hex digits of the config digest>`.
pub fn run_dir(cfg: &ExperimentConfig, kind: &str) -> PathBuf {
    cfg.out_dir.join(format!("{kind}-{}", &cfg.digest()[..12]))
}

fn prepare_dir(dir: &Path, cfg: &ExperimentConfig, manifest: &Manifest) -> Result<()> {
    if dir.exists() {
        log::info!("reusing {}", dir.display());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("manifest.json"), manifest)
}

/// Streams metrics rows and periodic checkpoints into a run directory.
struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    checkpoint_every: usize,
}

impl RunWriter {
    fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<RunWriter> {
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        if cfg.checkpoint_every > 0 {
            let ck = dir.join("checkpoints");
            std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        }
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
            checkpoint_every: cfg.checkpoint_every,
        })
    }

    fn observe(&mut self, row: &MetricsRow, global: &GeneratorParams) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        serde_json::to_writer(&mut self.metrics, row)?;
        writeln!(self.metrics).map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        if self.checkpoint_every > 0 && row.round > 0 && row.round.is_multiple_of(self.checkpoint_every as u64) {
            global.save(&self.dir.join("checkpoints").join(format!("round-{:04}.bin", row.round)))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SummaryRow {
    round: u64,
    accuracy: Option<f64>,
    loss: Option<f64>,
    bytes_transmitted: usize,
    total_bytes: usize,
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, world: &World, opts: RunOptions) -> Result<RunOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut writer = RunWriter::open(dir, cfg)?;
    let mut outcome = run_federated(cfg, world, opts, |row, g| writer.observe(row, g))?;
    let summary: Vec<SummaryRow> = outcome
        .rows
        .iter()
        .map(|r| SummaryRow {
            round: r.round,
            accuracy: r.accuracy,
            loss: r.loss,
            bytes_transmitted: r.bytes_transmitted,
            total_bytes: r.total_bytes,
        })
        .collect();
    write_csv(&dir.join("summary.csv"), &summary)?;
    outcome.final_generator.save(&dir.join("final.bin"))?;
    outcome.run_dir = Some(dir.to_path_buf());
    Ok(outcome)
}

/// Backbone, partition, federated rounds, final evaluation; all artifacts in
/// the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    run_experiment_in(cfg, &world, RunOptions::default())
}

pub fn run_experiment_in(cfg: &ExperimentConfig, world: &World, opts: RunOptions) -> Result<RunOutcome> {
    let dir = run_dir(cfg, "train");
    prepare_dir(&dir, cfg, &Manifest::new("train", cfg, world)?)?;
    world.encoder.save(&dir.join("encoder.bin"))?;
    write_run(&dir, cfg, world, opts)
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub series: Vec<(InputMode, RunOutcome)>,
    pub train_digest: String,
    pub test_digest: String,
    pub run_dir: PathBuf,
}

impl AblationOutcome {
    pub fn final_accuracy(&self, mode: InputMode) -> Option<f64> {
        self.series.iter().find(|(m, _)| *m == mode).map(|(_, o)| o.final_accuracy)
    }
}

pub const ABLATION_MODES: [InputMode; 3] = [InputMode::PromptAndText, InputMode::TextOnly, InputMode::PromptOnly];

/// The same run in `[P; x]`, `x` only and `P` only modes, with identical
/// seeds and data, plus a combined per-round table.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    run_ablation_in(cfg, &world)
}

#[derive(Serialize)]
struct AblationRow {
    round: u64,
    prompt_and_text: Option<f64>,
    text_only: Option<f64>,
    prompt_only: Option<f64>,
}

pub fn run_ablation_in(cfg: &ExperimentConfig, world: &World) -> Result<AblationOutcome> {
    let dir = run_dir(cfg, "ablate");
    prepare_dir(&dir, cfg, &Manifest::new("ablate", cfg, world)?)?;
    let mut series = Vec::new();
    for mode in ABLATION_MODES {
        let mut c = cfg.clone();
        c.generator.input_mode = mode;
        series.push((mode, write_run(&dir.join(mode.as_str()), &c, world, RunOptions::default())?));
    }
    let table: Vec<AblationRow> = (0..series[0].1.rows.len())
        .map(|i| AblationRow {
            round: series[0].1.rows[i].round,
            prompt_and_text: series[0].1.rows[i].accuracy,
            text_only: series[1].1.rows[i].accuracy,
            prompt_only: series[2].1.rows[i].accuracy,
        })
        .collect();
    write_csv(&dir.join("comparison.csv"), &table)?;
    Ok(AblationOutcome {
        series,
        train_digest: world.train.digest(),
        test_digest: world.test.digest(),
        run_dir: dir,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub selection_ratio: f64,
    pub prompt_len: usize,
    pub hidden: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub param_count: usize,
    pub total_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub run_dir: Option<PathBuf>,
}

/// Cells of the grid in row order: ratio, then prompt length, then hidden
/// size, then seed.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut cells = Vec::new();
    for &ratio in &cfg.grid.selection_ratios {
        for &prompt_len in &cfg.grid.prompt_lens {
            for &hidden in &cfg.grid.hiddens {
                for seed in cfg.grid_seeds() {
                    let mut c = cfg.clone();
                    c.federation.selection_ratio = ratio;
                    c.generator.prompt_len = prompt_len;
                    c.generator.hidden = hidden;
                    c.seed = seed;
                    c.eval_every = 0;
                    cells.push(c);
                }
            }
        }
    }
    cells
}

/// Runs every cell in memory (cells in parallel under `exec`) without
/// writing files.
pub fn simulate_grid(cfg: &ExperimentConfig, world: &World, exec: Execution) -> Result<Vec<GridRow>> {
    let cells = grid_cells(cfg);
    for c in &cells {
        c.validate()?;
    }
    let results = exec.map(cells.len(), |i| {
        let c = &cells[i];
        let out = run_federated(c, world, RunOptions::default(), |_, _| Ok(()))?;
        Ok(GridRow {
            selection_ratio: c.federation.selection_ratio,
            prompt_len: c.generator.prompt_len,
            hidden: c.generator.hidden,
            seed: c.seed,
            final_accuracy: out.final_accuracy,
            param_count: param_count(&c.generator_config())?,
            total_bytes: out.total_bytes,
        })
    });
    results.into_iter().collect()
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    let dir = run_dir(cfg, "grid");
    prepare_dir(&dir, cfg, &Manifest::new("grid", cfg, &world)?)?;
    let rows = simulate_grid(cfg, &world, cfg.federation.execution)?;
    write_csv(&dir.join("grid.csv"), &rows)?;
    Ok(GridOutcome {
        rows,
        run_dir: Some(dir),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub config_digest: String,
    pub client_id: usize,
    /// Shard-local indices of the forgotten samples.
    pub forget_indices: Vec<usize>,
    pub retain_size: usize,
    pub lambda: f64,
    pub epochs: usize,
    /// Epochs actually run; below `epochs` when early stopping triggered.
    pub epochs_run: usize,
    pub lr: f64,
    /// Global test accuracy: initial, before unlearning, after unlearning.
    pub global_accuracy: Vec<f64>,
    /// Accuracy on the forget set under its original labels.
    pub forget_accuracy_before: f64,
    pub forget_accuracy_after: f64,
    pub clients: Vec<ClientAccuracy>,
    pub unlearn_losses: Vec<f64>,
    pub unlearned_digest: String,
    pub global_digest_after: String,
    pub global_replaced_exactly: bool,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

impl UnlearnReport {
    pub fn global_degradation(&self) -> f64 {
        self.global_accuracy[1] - self.global_accuracy[2]
    }
}

/// The unlearning protocol: `unlearn.rounds_before` federated rounds at
/// `unlearn.prompt_len`, then one client forgets part of its shard and the
/// server adopts its generator.
pub fn run_unlearning(cfg: &ExperimentConfig) -> Result<UnlearnReport> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    run_unlearning_in(cfg, &world, true)
}

pub fn unlearning_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.rounds = cfg.unlearn.rounds_before;
    c.generator.prompt_len = cfg.unlearn.prompt_len;
    c
}

pub fn run_unlearning_in(cfg: &ExperimentConfig, world: &World, write: bool) -> Result<UnlearnReport> {
    let c = unlearning_config(cfg);
    c.validate()?;
    let u = &c.unlearn;
    let exec = c.federation.execution;
    let dir = run_dir(&c, "unlearn");
    let mut writer = if write {
        prepare_dir(&dir, &c, &Manifest::new("unlearn", &c, world)?)?;
        Some(RunWriter::open(&dir, &c)?)
    } else {
        None
    };

    let mut fed = new_federation(&c, world)?;
    let encoder_digest_before = fed.encoder().digest();
    let initial = evaluate_global(fed.global(), &world.test, &world.encoder, exec)?;
    for t in 1..=c.rounds {
        let m = fed.run_round(None)?;
        if let Some(w) = writer.as_mut() {
            let row = MetricsRow {
                config_digest: c.digest(),
                seed: c.seed,
                round: t as u64,
                selected: m.selected,
                accuracy: None,
                loss: m.mean_loss,
                bytes_transmitted: m.bytes_transmitted,
                total_bytes: fed.transport().total_bytes(),
                wall_time_ms: m.wall_time_ms,
            };
            w.observe(&row, fed.global())?;
        }
    }
    let before = fed.global().clone();
    let pre = evaluate_global(&before, &world.test, &world.encoder, exec)?;

    let client_id = match u.client {
        Some(id) => id,
        None => {
            // a client that took part in training
            let eligible: Vec<usize> = fed
                .clients
                .iter()
                .filter(|cl| cl.local_generator.is_some())
                .map(|cl| cl.id)
                .collect();
            if eligible.is_empty() {
                return Err(Error::Input("no client has participated before the unlearning request".into()));
            }
            let mut rng = rng_for(c.seed, Stream::Unlearn, &[u64::MAX]);
            eligible[rng.random_range(0..eligible.len())]
        }
    };
    let request = UnlearnRequest {
        client_id,
        forget: ForgetSelection::Fraction(u.forget_fraction),
        lambda: u.lambda,
        unlearn_epochs: u.epochs,
        lr: u.lr,
        retain_count: u.retain_count,
        early_stop: u.early_stop,
        seed: c.seed,
    };
    let outcome = local_unlearn(&fed.clients[client_id], &before, &world.encoder, &request)?;
    server_replace(&mut fed, client_id, &outcome.params)?;
    let after = fed.global().clone();

    let shard = &fed.clients[client_id].shard;
    let forget_set = shard.subset(&outcome.sets.forget);
    let n_sampled = u.sampled_clients.min(fed.clients.len());
    let mut rng = rng_for(c.seed, Stream::Unlearn, &[u64::MAX - 1]);
    let mut sampled = sample(&mut rng, fed.clients.len(), n_sampled).into_vec();
    sampled.sort_unstable();
    let sampled: Vec<usize> = sampled.into_iter().filter(|&i| !fed.clients[i].shard.is_empty()).collect();
    let private: Vec<(usize, &TokenizedDataset)> = sampled.iter().map(|&i| (i, &fed.clients[i].shard)).collect();
    let forgetting = evaluate_forgetting(&world.encoder, &before, &after, &forget_set, &world.test, &private, exec)?;

    let report = UnlearnReport {
        config_digest: c.digest(),
        client_id,
        forget_indices: outcome.sets.forget.clone(),
        retain_size: outcome.sets.retain.len(),
        lambda: u.lambda,
        epochs: u.epochs,
        epochs_run: outcome.losses.len(),
        lr: u.lr,
        global_accuracy: vec![initial, pre, forgetting.global_after],
        forget_accuracy_before: forgetting.forget_before,
        forget_accuracy_after: forgetting.forget_after,
        clients: forgetting.clients,
        unlearn_losses: outcome.losses.clone(),
        unlearned_digest: outcome.params.digest(),
        global_digest_after: after.digest(),
        global_replaced_exactly: after.bit_eq(&outcome.params),
        encoder_digest_before,
        encoder_digest_after: fed.encoder().digest(),
    };
    if let Some(mut w) = writer {
        let row = MetricsRow {
            config_digest: c.digest(),
            seed: c.seed,
            round: fed.server.round,
            selected: vec![client_id],
            accuracy: Some(forgetting.global_after),
            loss: outcome.losses.last().copied(),
            bytes_transmitted: before.serialized_size(),
            total_bytes: fed.transport().total_bytes(),
            wall_time_ms: 0.0,
        };
        w.observe(&row, &after)?;
        before.save(&dir.join("before.bin"))?;
        after.save(&dir.join("after.bin"))?;
        world.encoder.save(&dir.join("encoder.bin"))?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}
