//! Input-conditioned soft prompts.
//!
//! The generator is a two-layer MLP applied to the mean token embedding of
//! the input; its flat output of length `d_e × prompt_len` is reshaped row by
//! row into `prompt_len` prompt vectors that are prepended to the embedded
//! input before the frozen encoder. Only the generator's weights train.
//!
//! A static mode (a directly trained `[prompt_len, d_e]` matrix shared by all
//! inputs) is kept as a baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, TokenizedDataset};
use crate::encoder::{add_positions, encode_classify, token_embeddings, BoundEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::params::ParamSet;
use crate::rng::{rng_for, uniform_tensor, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// What the encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `[P; x]`, prompts generated from the input.
    #[default]
    PromptAndText,
    /// `x` only; the generator is bypassed.
    TextOnly,
    /// Generated prompts `P` only.
    PromptOnly,
    /// `[P_static; x]` with one trained prompt matrix for every input.
    StaticPrompt,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [
        InputMode::PromptAndText,
        InputMode::TextOnly,
        InputMode::PromptOnly,
        InputMode::StaticPrompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::PromptAndText => "prompt_and_text",
            InputMode::TextOnly => "text_only",
            InputMode::PromptOnly => "prompt_only",
            InputMode::StaticPrompt => "static_prompt",
        }
    }

    fn uses_mlp(self) -> bool {
        !matches!(self, InputMode::StaticPrompt)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Gelu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_e: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub input_mode: InputMode,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 {
            return Err(Error::Config("generator: d_e must be positive".into()));
        }
        if self.input_mode.uses_mlp() && self.hidden == 0 {
            return Err(Error::Config("generator: hidden width must be at least 1".into()));
        }
        if self.prompt_len == 0 && self.input_mode != InputMode::TextOnly {
            return Err(Error::Config("generator: prompt_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Flat generator output width.
    pub fn d_out(&self) -> usize {
        self.d_e * self.prompt_len
    }

    /// Rows prepended to (or replacing) the text.
    pub fn prompt_rows(&self) -> usize {
        match self.input_mode {
            InputMode::TextOnly => 0,
            _ => self.prompt_len,
        }
    }
}

/// `d_e·h + h + h·d_e·|P| + d_e·|P|` for the MLP, `|P|·d_e` for static prompts.
pub fn param_count(cfg: &GeneratorConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(if cfg.input_mode.uses_mlp() {
        cfg.d_e * cfg.hidden + cfg.hidden + cfg.hidden * cfg.d_out() + cfg.d_out()
    } else {
        cfg.prompt_len * cfg.d_e
    })
}

/// The trainable prompt parameters: the only tensors that are ever updated
/// or exchanged during federated training.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    config: GeneratorConfig,
    params: ParamSet,
}

impl GeneratorParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Generator, &[]);
        let mut params = ParamSet::new();
        if config.input_mode.uses_mlp() {
            let b_in = 1.0 / (config.d_e as f64).sqrt();
            let b_hidden = 1.0 / (config.hidden as f64).sqrt();
            params.push("w1", uniform_tensor(&mut rng, &[config.d_e, config.hidden], b_in));
            params.push("b1", uniform_tensor(&mut rng, &[config.hidden], b_in));
            params.push("w2", uniform_tensor(&mut rng, &[config.hidden, config.d_out()], b_hidden));
            params.push("b2", uniform_tensor(&mut rng, &[config.d_out()], b_hidden));
        } else {
            let b = 1.0 / (config.d_e as f64).sqrt();
            params.push("prompt", uniform_tensor(&mut rng, &[config.prompt_len, config.d_e], b));
        }
        Ok(GeneratorParams { config, params })
    }

    pub fn zeros(config: GeneratorConfig) -> Result<Self> {
        let mut g = GeneratorParams::init(config, 0)?;
        for i in 0..g.params.len() {
            g.params.tensor_mut(i).data_mut().fill(0.0);
        }
        Ok(g)
    }

    pub fn from_parts(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        let reference = GeneratorParams::init(config, 0)?;
        if !reference.params.same_structure(&params) {
            return Err(Error::Format("generator tensors do not match the config".into()));
        }
        Ok(GeneratorParams { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn same_structure(&self, other: &GeneratorParams) -> bool {
        self.config == other.config && self.params.same_structure(&other.params)
    }

    pub fn bit_eq(&self, other: &GeneratorParams) -> bool {
        self.config == other.config && self.params.bit_eq(&other.params)
    }

    pub fn digest(&self) -> String {
        self.params.content_digest()
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "generator", "config": self.config })
    }

    /// Wire representation; its length is the per-transfer payload size.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.encode(&self.meta())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = ParamSet::decode(bytes)?;
        Self::from_meta(meta, params)
    }

    pub fn serialized_size(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = ParamSet::load(path)?;
        Self::from_meta(meta, params)
    }

    fn from_meta(meta: serde_json::Value, params: ParamSet) -> Result<Self> {
        if meta["kind"] != "generator" {
            return Err(Error::Format("not a generator parameter file".into()));
        }
        let config: GeneratorConfig = serde_json::from_value(meta["config"].clone())?;
        GeneratorParams::from_parts(config, params)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGenerator {
        BoundGenerator {
            vars: (0..self.params.len()).map(|i| g.param(self.params.tensor(i).clone())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundGenerator {
    vars: Vec<Var>,
}

impl BoundGenerator {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// ē: mean over the non-pad rows of `x` (`[n, d_e]`), exact under row
/// permutation.
pub fn mean_embedding(g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    g.masked_mean_rows(x, mask)
}

/// Maps ē (`[d_e]`) to the prompt matrix `[prompt_len, d_e]`.
pub fn generate(g: &mut Graph, gen: &BoundGenerator, cfg: &GeneratorConfig, mean: Var) -> Result<Var> {
    if !cfg.input_mode.uses_mlp() {
        return Ok(gen.vars[0]);
    }
    if g.value(mean).len() != cfg.d_e {
        return Err(Error::shape("generate", g.shape(mean), &[cfg.d_e]));
    }
    if !g.value(mean).is_finite() {
        return Err(Error::Numeric("generate"));
    }
    let [w1, b1, w2, b2] = gen.vars[..] else {
        return Err(Error::Contract("MLP generator needs four tensors".into()));
    };
    let e = g.reshape(mean, &[1, cfg.d_e])?;
    let h = g.matmul(e, w1)?;
    let h = g.add_row(h, b1)?;
    let h = match cfg.activation {
        Activation::Tanh => g.tanh(h)?,
        Activation::Gelu => g.gelu(h)?,
        Activation::Identity => h,
    };
    let flat = g.matmul(h, w2)?;
    let flat = g.add_row(flat, b2)?;
    g.reshape(flat, &[cfg.prompt_len, cfg.d_e])
}

/// Builds the encoder input for `mode`. With prompts present, text rows
/// beyond `max_len` are dropped from the tail; prompts are never truncated.
pub fn compose(g: &mut Graph, prompts: Option<Var>, x: Var, mode: InputMode, max_len: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    let fit = |g: &mut Graph, budget: usize| -> Result<Var> {
        if n > budget {
            g.slice_rows(x, 0, budget)
        } else {
            Ok(x)
        }
    };
    match mode {
        InputMode::TextOnly => fit(g, max_len),
        InputMode::PromptOnly => prompts.ok_or_else(|| Error::Contract("prompt_only without prompts".into())),
        InputMode::PromptAndText | InputMode::StaticPrompt => {
            let p = prompts.ok_or_else(|| Error::Contract("prompt mode without prompts".into()))?;
            let rows = g.shape(p)[0];
            if rows >= max_len {
                return Err(Error::Length { len: rows + 1, max_len });
            }
            let x = fit(g, max_len - rows)?;
            g.concat_rows(&[p, x])
        }
    }
}

/// A graph with the frozen encoder and a generator bound into it.
pub struct Session<'a> {
    pub graph: Graph,
    encoder_cfg: &'a EncoderConfig,
    gen_cfg: GeneratorConfig,
    enc: BoundEncoder,
    gen: BoundGenerator,
}

impl<'a> Session<'a> {
    pub fn new(encoder: &'a Encoder, generator: &GeneratorParams) -> Result<Self> {
        let ecfg = encoder.config();
        let gcfg = *generator.config();
        if gcfg.d_e != ecfg.d_e {
            return Err(Error::Config(format!(
                "generator d_e {} does not match encoder d_e {}",
                gcfg.d_e, ecfg.d_e
            )));
        }
        if gcfg.prompt_rows() >= ecfg.max_len {
            return Err(Error::Length {
                len: gcfg.prompt_rows() + 1,
                max_len: ecfg.max_len,
            });
        }
        let mut graph = Graph::new();
        let gen = generator.bind(&mut graph);
        let enc = encoder.bind(&mut graph);
        Ok(Session {
            graph,
            encoder_cfg: ecfg,
            gen_cfg: gcfg,
            enc,
            gen,
        })
    }

    pub fn generator_vars(&self) -> &[Var] {
        self.gen.vars()
    }

    pub fn encoder_vars(&self) -> &[Var] {
        self.enc.vars()
    }

    /// `[d_e]` mean of the token embeddings of `tokens` (no positions).
    pub fn mean_embedding(&mut self, tokens: &[u32]) -> Result<Var> {
        let rows = token_embeddings(&mut self.graph, &self.enc, self.encoder_cfg, tokens)?;
        mean_embedding(&mut self.graph, rows, None)
    }

    /// Prompt matrix for a token sequence (`None` in text-only mode).
    pub fn prompts(&mut self, tokens: &[u32]) -> Result<Option<Var>> {
        match self.gen_cfg.input_mode {
            InputMode::TextOnly => Ok(None),
            InputMode::StaticPrompt => Ok(Some(self.gen.vars[0])),
            InputMode::PromptAndText | InputMode::PromptOnly => {
                let mean = self.mean_embedding(tokens)?;
                Ok(Some(generate(&mut self.graph, &self.gen, &self.gen_cfg, mean)?))
            }
        }
    }

    /// `[K]` logits for one input (pad tokens already removed).
    pub fn logits(&mut self, tokens: &[u32]) -> Result<Var> {
        let prompts = self.prompts(tokens)?;
        let mode = self.gen_cfg.input_mode;
        let cfg = self.encoder_cfg;
        let offset = self.gen_cfg.prompt_rows();
        let g = &mut self.graph;
        let z = if mode == InputMode::PromptOnly {
            compose(g, prompts, prompts.expect("generated"), mode, cfg.max_len)?
        } else {
            let keep = tokens.len().min(cfg.max_len - offset);
            let rows = token_embeddings(g, &self.enc, cfg, &tokens[..keep])?;
            let x = add_positions(g, &self.enc, cfg, rows, offset)?;
            compose(g, prompts, x, mode, cfg.max_len)?
        };
        encode_classify(g, &self.enc, cfg, z)
    }

    /// Summed cross-entropy over `batch` and the number of argmax-correct
    /// predictions (ties to the lowest class).
    pub fn batch_loss<'b, I>(&mut self, batch: I) -> Result<(Var, usize)>
    where
        I: IntoIterator<Item = (&'b [u32], usize)>,
    {
        let mut terms = Vec::new();
        let mut correct = 0;
        for (tokens, label) in batch {
            let logits = self.logits(tokens)?;
            if argmax(self.graph.value(logits).data()) == label {
                correct += 1;
            }
            terms.push(self.graph.cross_entropy(logits, label)?);
        }
        if terms.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok((self.graph.add_n(&terms)?, correct))
    }

    /// Gradients w.r.t. the generator tensors, in parameter order.
    pub fn generator_grads(&self) -> Vec<Option<Tensor>> {
        self.gen.vars().iter().map(|&v| self.graph.grad(v).cloned()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Option<Tensor>>,
}

/// Summed local loss over a batch and its gradient w.r.t. the generator.
pub fn forward_loss(encoder: &Encoder, generator: &GeneratorParams, batch: &[(&[u32], usize)]) -> Result<LossReport> {
    let mut s = Session::new(encoder, generator)?;
    let (loss, correct) = s.batch_loss(batch.iter().copied())?;
    s.graph.backward(loss)?;
    Ok(LossReport {
        loss: s.graph.value(loss).item()?,
        correct,
        grads: s.generator_grads(),
    })
}

/// Plain gradient descent `θ ← θ − lr·∇`; consumed gradients are cleared.
pub fn sgd_step(params: &mut GeneratorParams, grads: &mut [Option<Tensor>], lr: f64) -> Result<()> {
    params.params.axpy(-lr, grads)?;
    grads.iter_mut().for_each(|g| *g = None);
    Ok(())
}

/// Class prediction for one input.
pub fn predict(encoder: &Encoder, generator: &GeneratorParams, tokens: &[u32]) -> Result<usize> {
    let mut s = Session::new(encoder, generator)?;
    let logits = s.logits(tokens)?;
    Ok(argmax(s.graph.value(logits).data()))
}

/// Fraction of argmax-correct predictions on `data`.
pub fn accuracy(encoder: &Encoder, generator: &GeneratorParams, data: &TokenizedDataset, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy on an empty dataset".into()));
    }
    let hits = exec.map(data.len(), |i| predict(encoder, generator, &data.tokens(i)).map(|p| p == data.label(i)));
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}
