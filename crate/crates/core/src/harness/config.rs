//! Experiment configuration: one TOML file, every key optional, unknown keys
//! rejected.
//!
//! ```toml
//! seed = 11            # generator init, partition, selection, local shuffles
//! rounds = 100
//! eval_every = 1       # 0 evaluates only before round 1 and after the last
//! checkpoint_every = 0 # 0 writes only the final checkpoint
//! out_dir = "runs"
//!
//! [data]               # reference task, or JSON-lines files
//! [backbone]           # "pretrained" or "random", pretext task settings
//! [encoder]
//! [generator]
//! [federation]
//! [unlearn]
//! [grid]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticTaskSpec;
use crate::encoder::{EncoderConfig, PretrainOptions};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{PartitionScheme, RoundConfig};
use crate::generator::{Activation, GeneratorConfig, InputMode};
use crate::rng::{derive_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub encoder: EncoderSection,
    pub generator: GeneratorSection,
    pub federation: FederationSection,
    pub unlearn: UnlearnSection,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 11,
            rounds: 100,
            eval_every: 1,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            encoder: EncoderSection::default(),
            generator: GeneratorSection::default(),
            federation: FederationSection::default(),
            unlearn: UnlearnSection::default(),
            grid: GridSection::default(),
        }
    }
}

/// Synthetic reference task. Token ids are laid out as
/// `[pad | class signal blocks | pretext-only signal blocks | noise]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub signal_rate: f64,
    pub signal_per_class: u32,
    pub train_size: usize,
    pub test_size: usize,
    /// Load these instead of generating; both or neither.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            num_classes: 2,
            vocab_size: 128,
            seq_len_min: 20,
            seq_len_max: 20,
            signal_rate: 0.3,
            signal_per_class: 8,
            train_size: 5000,
            test_size: 2000,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Trained on a related pretext task, then frozen.
    #[default]
    Pretrained,
    /// Random initialization, frozen as is.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub seed: u64,
    /// Signal tokens per class that the pretext task shares with the
    /// reference task. The other reference signal tokens appear in the
    /// pretext task only as noise.
    pub shared_signal: u32,
    pub pretext_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_offset: usize,
    /// Load a saved encoder instead of building one.
    pub path: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let p = PretrainOptions::default();
        BackboneConfig {
            mode: BackboneMode::Pretrained,
            seed: 5,
            shared_signal: 2,
            pretext_size: 4000,
            steps: p.steps,
            lr: p.lr,
            batch_size: p.batch_size,
            max_offset: p.max_offset,
            path: None,
        }
    }
}

impl BackboneConfig {
    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            max_offset: self.max_offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_e: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            d_e: e.d_e,
            layers: e.layers,
            heads: e.heads,
            d_ff: e.d_ff,
            max_len: e.max_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub hidden: usize,
    pub prompt_len: usize,
    pub activation: Activation,
    pub input_mode: InputMode,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            hidden: 10,
            prompt_len: 5,
            activation: Activation::Tanh,
            input_mode: InputMode::PromptAndText,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub selection_ratio: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub execution: Execution,
    pub partition: PartitionScheme,
}

impl Default for FederationSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        FederationSection {
            num_clients: r.num_clients,
            selection_ratio: r.selection_ratio,
            local_epochs: r.local_epochs,
            lr: r.lr,
            batch_size: r.batch_size,
            execution: r.execution,
            partition: PartitionScheme::Iid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    /// Federated rounds before the request.
    pub rounds_before: usize,
    /// Prompt length for the unlearning run (replaces `generator.prompt_len`).
    pub prompt_len: usize,
    /// Requesting client; drawn among participating clients with the
    /// experiment seed when absent.
    pub client: Option<usize>,
    pub forget_fraction: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Defaults to every shard sample outside the forget set.
    pub retain_count: Option<usize>,
    /// Stop at the first epoch that lowers forget-set accuracy; `epochs` caps it.
    pub early_stop: bool,
    /// Clients whose private-data accuracy is reported before and after.
    pub sampled_clients: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        UnlearnSection {
            rounds_before: 10,
            prompt_len: 10,
            client: None,
            forget_fraction: 0.2,
            lambda: 0.5,
            epochs: 400,
            lr: 0.002,
            retain_count: None,
            early_stop: true,
            sampled_clients: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub selection_ratios: Vec<f64>,
    pub prompt_lens: Vec<usize>,
    pub hiddens: Vec<usize>,
    /// Experiment seeds; empty means the top-level seed only.
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            selection_ratios: vec![0.05, 0.10, 0.20],
            prompt_lens: vec![1, 5, 10],
            hiddens: vec![5, 10, 20],
            seeds: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = self.encoder;
        EncoderConfig {
            d_e: e.d_e,
            layers: e.layers,
            heads: e.heads,
            d_ff: e.d_ff,
            vocab_size: self.data.vocab_size,
            max_len: e.max_len,
            num_classes: self.data.num_classes,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = self.generator;
        GeneratorConfig {
            d_e: self.encoder.d_e,
            hidden: g.hidden,
            prompt_len: g.prompt_len,
            activation: g.activation,
            input_mode: g.input_mode,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        let f = self.federation;
        RoundConfig {
            num_clients: f.num_clients,
            selection_ratio: f.selection_ratio,
            local_epochs: f.local_epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            execution: f.execution,
        }
    }

    fn signal_block_len(&self) -> u32 {
        self.data.signal_per_class * self.data.num_classes as u32
    }

    /// The reference task, seeded by `data.seed`.
    pub fn reference_spec(&self) -> Result<SyntheticTaskSpec> {
        let d = &self.data;
        let noise_start = 1 + self.signal_block_len() + self.pretext_only_per_class() * d.num_classes as u32;
        SyntheticTaskSpec::blocks(
            d.num_classes,
            d.vocab_size,
            (d.seq_len_min, d.seq_len_max),
            d.signal_rate,
            1,
            d.signal_per_class,
            noise_start,
            d.seed,
        )
    }

    fn pretext_only_per_class(&self) -> u32 {
        self.data.signal_per_class.saturating_sub(self.backbone.shared_signal)
    }

    /// The backbone's pretext task: same classes and lengths, class `c`
    /// signals through the first `shared_signal` reference tokens of class `c`
    /// plus its own tokens.
    pub fn pretext_spec(&self) -> Result<SyntheticTaskSpec> {
        let mut spec = self.reference_spec()?;
        let per = self.data.signal_per_class;
        let shared = self.backbone.shared_signal;
        let own = self.pretext_only_per_class();
        let own_start = 1 + self.signal_block_len();
        let mut reference_only = Vec::new();
        for (c, tokens) in spec.signal_tokens.iter_mut().enumerate() {
            let c = c as u32;
            let block = 1 + c * per;
            reference_only.extend(block + shared..block + per);
            let own_block = own_start + c * own;
            *tokens = (block..block + shared).chain(own_block..own_block + own).collect();
        }
        reference_only.extend_from_slice(&spec.noise_tokens);
        spec.noise_tokens = reference_only;
        spec.seed = derive_seed(self.backbone.seed, Stream::Pretrain, &[0]);
        spec.validate()?;
        Ok(spec)
    }

    /// Seed of the held-out test set.
    pub fn test_seed(&self) -> u64 {
        derive_seed(self.data.seed, Stream::Data, &[1])
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.generator_config().validate()?;
        self.round_config().validate()?;
        let d = &self.data;
        if d.train_path.is_some() != d.test_path.is_some() {
            return Err(Error::Config("data.train_path and data.test_path go together".into()));
        }
        if d.train_path.is_none() {
            if d.train_size < self.federation.num_clients {
                return Err(Error::Config(format!(
                    "{} training samples cannot cover {} clients",
                    d.train_size, self.federation.num_clients
                )));
            }
            if d.test_size == 0 {
                return Err(Error::Config("data.test_size must be positive".into()));
            }
            self.reference_spec()?;
            if self.backbone.mode == BackboneMode::Pretrained && self.backbone.path.is_none() {
                if self.backbone.shared_signal > d.signal_per_class {
                    return Err(Error::Config("backbone.shared_signal exceeds data.signal_per_class".into()));
                }
                self.pretext_spec()?;
            }
        }
        if d.seq_len_max + self.generator.prompt_len > self.encoder.max_len
            && self.generator.input_mode == InputMode::PromptAndText
        {
            log::warn!("prompts plus the longest sequence exceed max_len; text tails will be cut");
        }
        let u = &self.unlearn;
        if !(u.forget_fraction > 0.0 && u.forget_fraction <= 1.0) {
            return Err(Error::Config(format!("unlearn.forget_fraction {} outside (0, 1]", u.forget_fraction)));
        }
        if !(u.lambda >= 0.0 && u.lambda.is_finite()) {
            return Err(Error::Config("unlearn.lambda must be non-negative".into()));
        }
        if let Some(c) = u.client {
            if c >= self.federation.num_clients {
                return Err(Error::Config(format!("unlearn.client {c} is not a client id")));
            }
        }
        let g = &self.grid;
        if g.selection_ratios.is_empty() || g.prompt_lens.is_empty() || g.hiddens.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form. Fields that cannot change any
    /// result (output location, sequential vs parallel execution) are
    /// normalized first.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.federation.execution = Execution::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn grid_seeds(&self) -> Vec<u64> {
        if self.grid.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.grid.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.federation.num_clients, 100);
    }

    #[test]
    fn readme_lists_the_defaults() {
        let readme = include_str!("../../../../README.md");
        let start = readme.find("```toml\n").expect("toml block") + 8;
        let len = readme[start..].find("```").unwrap();
        let cfg = ExperimentConfig::from_toml_str(&readme[start..start + len]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("roundz = 3"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml_str("[generator]\nhiden = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.federation.partition = PartitionScheme::LabelSkew { alpha: 0.5 };
        cfg.generator.input_mode = InputMode::PromptOnly;
        cfg.unlearn.client = Some(4);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[federation]\nselection_ratio = 0.0").is_err());
        assert!(ExperimentConfig::from_toml_str("[generator]\nhidden = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\ntrain_size = 10").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\ntrain_path = \"a.jsonl\"").is_err());
    }

    #[test]
    fn digest_ignores_location_and_execution() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.federation.execution = Execution::Sequential;
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn token_layout() {
        let cfg = ExperimentConfig::default();
        let r = cfg.reference_spec().unwrap();
        assert_eq!(r.signal_tokens[0], (1..9).collect::<Vec<u32>>());
        assert_eq!(r.signal_tokens[1], (9..17).collect::<Vec<u32>>());
        assert_eq!(r.noise_tokens[0], 29);
        let p = cfg.pretext_spec().unwrap();
        assert_eq!(p.signal_tokens[0], vec![1, 2, 17, 18, 19, 20, 21, 22]);
        assert_eq!(p.signal_tokens[1], vec![9, 10, 23, 24, 25, 26, 27, 28]);
        assert!(p.noise_tokens.contains(&3) && p.noise_tokens.contains(&16));
        assert!(!p.noise_tokens.contains(&1) && !p.noise_tokens.contains(&17));
        assert_eq!(p.noise_tokens.len(), 12 + r.noise_tokens.len());
    }
}
