//! The frozen backbone: a small pre-norm transformer encoder with a mean-pool
//! classification head.
//!
//! Position information enters only through [`embed`]; the encoder body is
//! equivariant to row order and the mean pool is invariant to it, so prompt
//! rows carry no positional embedding and real tokens start at position
//! `offset` (the number of prompt rows prepended).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedDataset;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{rng_for, uniform_tensor, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_e: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_e: 32,
            layers: 2,
            heads: 4,
            d_ff: 64,
            vocab_size: 128,
            max_len: 64,
            num_classes: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.d_e < 2 || self.heads == 0 || !self.d_e.is_multiple_of(self.heads) {
            return bad("d_e must be at least 2 and divisible by heads");
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad("d_ff, vocab_size and max_len must be positive");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_e / self.heads
    }
}

/// Encoder weights plus the frozen flag. Once frozen the weights are only
/// ever bound into graphs as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
    frozen: bool,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gain", "ln2.bias", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

impl Encoder {
    /// Seeded initialization, not yet frozen.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Backbone, &[]);
        let d = config.d_e;
        let mut p = ParamSet::new();
        p.push("tok_emb", uniform_tensor(&mut rng, &[config.vocab_size, d], 1.0));
        p.push("pos_emb", uniform_tensor(&mut rng, &[config.max_len, d], 0.5));
        let lin = |rng: &mut crate::rng::SimRng, fan_in: usize, fan_out: usize| {
            uniform_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        for l in 0..config.layers {
            for name in LAYER_TENSORS {
                let t = match name {
                    "ln1.gain" | "ln2.gain" => Tensor::filled(&[d], 1.0),
                    "ln1.bias" | "ln2.bias" | "attn.bq" | "attn.bk" | "attn.bv" | "attn.bo" | "ff.b2" => {
                        Tensor::zeros(&[d])
                    }
                    "ff.b1" => Tensor::zeros(&[config.d_ff]),
                    "ff.w1" => lin(&mut rng, d, config.d_ff),
                    "ff.w2" => lin(&mut rng, config.d_ff, d),
                    _ => lin(&mut rng, d, d),
                };
                p.push(format!("layer{l}.{name}"), t);
            }
        }
        p.push("ln_f.gain", Tensor::filled(&[d], 1.0));
        p.push("ln_f.bias", Tensor::zeros(&[d]));
        p.push("head.w", lin(&mut rng, d, config.num_classes));
        p.push("head.b", Tensor::zeros(&[config.num_classes]));
        Ok(Encoder {
            config,
            params: p,
            frozen: false,
        })
    }

    /// Seeded random weights, frozen immediately.
    pub fn frozen_random(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut e = Encoder::init(config, seed)?;
        e.frozen = true;
        Ok(e)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Content digest of all weights.
    pub fn digest(&self) -> String {
        self.params.content_digest()
    }

    /// Binds the weights into `g`: as shared constants when frozen, otherwise
    /// as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        let mut vars = Vec::with_capacity(self.params.len());
        for i in 0..self.params.len() {
            let v = if self.frozen {
                g.constant(self.params.shared_at(i))
            } else {
                g.param(self.params.tensor(i).clone())
            };
            vars.push(v);
        }
        BoundEncoder {
            vars,
            layers: self.config.layers,
        }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "frozen": self.frozen,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.encode(&self.meta())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = ParamSet::load(path)?;
        if meta["kind"] != "encoder" {
            return Err(Error::Format(format!("{} is not an encoder file", path.display())));
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        let reference = Encoder::init(config, 0)?;
        if !reference.params.same_structure(&params) {
            return Err(Error::Format("encoder tensors do not match the stored config".into()));
        }
        Ok(Encoder {
            config,
            params,
            frozen: meta["frozen"].as_bool().unwrap_or(true),
        })
    }
}

/// Graph handles for every encoder tensor, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    vars: Vec<Var>,
    layers: usize,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize, name: &str) -> Var {
        let idx = LAYER_TENSORS.iter().position(|n| *n == name).expect("known tensor");
        self.vars[2 + l * LAYER_TENSORS.len() + idx]
    }

    fn tail(&self, k: usize) -> Var {
        self.vars[2 + self.layers * LAYER_TENSORS.len() + k]
    }
}

/// Token-embedding rows (no positions) for `tokens`.
pub fn token_embeddings(g: &mut Graph, enc: &BoundEncoder, cfg: &EncoderConfig, tokens: &[u32]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.gather_rows(enc.tok_emb(), &ids)
}

/// Adds positional rows `offset..offset+n` to an `[n, d_e]` block.
pub fn add_positions(g: &mut Graph, enc: &BoundEncoder, cfg: &EncoderConfig, rows: Var, offset: usize) -> Result<Var> {
    let n = g.shape(rows)[0];
    if offset + n > cfg.max_len {
        return Err(Error::Length {
            len: offset + n,
            max_len: cfg.max_len,
        });
    }
    let pos = g.slice_rows(enc.pos_emb(), offset, offset + n)?;
    g.add(rows, pos)
}

/// Token plus positional embeddings, with the first token at position `offset`.
pub fn embed(g: &mut Graph, enc: &BoundEncoder, cfg: &EncoderConfig, tokens: &[u32], offset: usize) -> Result<Var> {
    let rows = token_embeddings(g, enc, cfg, tokens)?;
    add_positions(g, enc, cfg, rows, offset)
}

/// Multi-head self-attention sublayer input→output for layer `l`; also
/// returns each head's attention weight matrix.
pub fn self_attention(
    g: &mut Graph,
    enc: &BoundEncoder,
    cfg: &EncoderConfig,
    l: usize,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let proj = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
        let y = g.matmul(x, enc.layer(l, w))?;
        g.add_row(y, enc.layer(l, b))
    };
    let q = proj(g, "attn.wq", "attn.bq")?;
    let k = proj(g, "attn.wk", "attn.bk")?;
    let v = proj(g, "attn.wv", "attn.bv")?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let w = g.softmax_rows(scores)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(cat, enc.layer(l, "attn.wo"))?;
    Ok((g.add_row(out, enc.layer(l, "attn.bo"))?, weights))
}

/// Encodes an `[m, d_e]` sequence and returns `[K]` logits.
pub fn encode_classify(g: &mut Graph, enc: &BoundEncoder, cfg: &EncoderConfig, z: Var) -> Result<Var> {
    let m = g.shape(z)[0];
    if m > cfg.max_len {
        return Err(Error::Length {
            len: m,
            max_len: cfg.max_len,
        });
    }
    let mut h = z;
    for l in 0..cfg.layers {
        let a = g.layer_norm(h, enc.layer(l, "ln1.gain"), enc.layer(l, "ln1.bias"))?;
        let (att, _) = self_attention(g, enc, cfg, l, a)?;
        h = g.add(h, att)?;
        let f = g.layer_norm(h, enc.layer(l, "ln2.gain"), enc.layer(l, "ln2.bias"))?;
        let f = g.matmul(f, enc.layer(l, "ff.w1"))?;
        let f = g.add_row(f, enc.layer(l, "ff.b1"))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, enc.layer(l, "ff.w2"))?;
        let f = g.add_row(f, enc.layer(l, "ff.b2"))?;
        h = g.add(h, f)?;
    }
    let h = g.layer_norm(h, enc.tail(0), enc.tail(1))?;
    let pooled = g.mean_rows(h)?;
    let pooled = g.reshape(pooled, &[1, cfg.d_e])?;
    let logits = g.matmul(pooled, enc.tail(2))?;
    let logits = g.add_row(logits, enc.tail(3))?;
    g.reshape(logits, &[cfg.num_classes])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Token sequences are placed at a random start position in
    /// `0..=max_offset` so positional rows used after prompt prepending are
    /// trained too.
    pub max_offset: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 300,
            lr: 0.1,
            batch_size: 16,
            max_offset: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    /// Mean batch cross-entropy per step.
    pub losses: Vec<f64>,
}

/// Trains every encoder weight with plain gradient descent on a pretext
/// classification task, then freezes the result.
pub fn pretrain_backbone(
    config: EncoderConfig,
    task: &TokenizedDataset,
    opts: PretrainOptions,
    seed: u64,
) -> Result<PretrainOutcome> {
    if task.num_classes() != config.num_classes {
        return Err(Error::Config(format!(
            "pretext task has {} classes, encoder head has {}",
            task.num_classes(),
            config.num_classes
        )));
    }
    if task.vocab_size() > config.vocab_size {
        return Err(Error::Config("pretext vocabulary exceeds encoder vocabulary".into()));
    }
    if task.is_empty() && opts.steps > 0 {
        return Err(Error::Input("empty pretext task".into()));
    }
    let mut enc = Encoder::init(config, seed)?;
    let mut rng = rng_for(seed, Stream::Pretrain, &[]);
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut g = Graph::new();
        let bound = enc.bind(&mut g);
        let mut terms = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.max(1) {
            let i = rng.random_range(0..task.len());
            let tokens = task.tokens(i);
            let n = tokens.len().min(config.max_len);
            let offset = rng.random_range(0..=opts.max_offset.min(config.max_len - n));
            let x = embed(&mut g, &bound, &config, &tokens[..n], offset)?;
            let logits = encode_classify(&mut g, &bound, &config, x)?;
            terms.push(g.cross_entropy(logits, task.label(i))?);
        }
        let total = g.add_n(&terms)?;
        let loss = g.scale(total, 1.0 / terms.len() as f64)?;
        losses.push(g.value(loss).item()?);
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| g.grad(v).cloned()).collect();
        enc.params.axpy(-opts.lr, &grads)?;
    }
    Ok(PretrainOutcome {
        encoder: enc.freeze(),
        losses,
    })
}
