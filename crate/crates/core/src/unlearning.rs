//! Client-side forgetting by random relabeling, and server-side replacement.
//!
//! The requesting client draws a forget set from its shard, relabels each
//! forget sample to a uniformly chosen wrong class, and minimizes
//!
//! ```text
//! L_u = Σ_retain ℓ(x, y) + λ · Σ_forget ℓ(x, ŷ)
//! ```
//!
//! by full-batch gradient descent, starting from the current global
//! generator, optionally stopping as soon as the forget set's original-label
//! accuracy falls below its starting value. The server then adopts the result
//! verbatim.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{evaluate_global, ClientState, Direction, Federation};
use crate::generator::{predict, sgd_step, GeneratorParams, LossReport, Session};
use crate::rng::{rng_for, SimRng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetSelection {
    /// `max(1, round(f · n))` samples drawn uniformly from the shard.
    Fraction(f64),
    /// Explicit shard-local indices.
    Indices(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub client_id: usize,
    pub forget: ForgetSelection,
    pub lambda: f64,
    pub unlearn_epochs: usize,
    pub lr: f64,
    /// Retain-set size; defaults to every shard sample outside the forget set.
    pub retain_count: Option<usize>,
    /// Stop after the first epoch that lowers forget-set accuracy on the
    /// original labels; `unlearn_epochs` is then an upper bound.
    pub early_stop: bool,
    pub seed: u64,
}

impl UnlearnRequest {
    pub fn new(client_id: usize, forget_fraction: f64) -> Self {
        UnlearnRequest {
            client_id,
            forget: ForgetSelection::Fraction(forget_fraction),
            lambda: 0.5,
            unlearn_epochs: 400,
            lr: 0.002,
            retain_count: None,
            early_stop: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let ForgetSelection::Fraction(f) = self.forget {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("forget fraction {f} outside (0, 1]")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabeledSample {
    pub tokens: Vec<u32>,
    pub original: usize,
    pub relabeled: usize,
}

/// A label drawn uniformly from the `num_classes - 1` classes other than
/// `label`.
pub fn relabel_one(label: usize, num_classes: usize, rng: &mut SimRng) -> Result<usize> {
    if num_classes < 2 {
        return Err(Error::Contract("relabeling needs at least two classes".into()));
    }
    if label >= num_classes {
        return Err(Error::Index {
            what: "label",
            index: label,
            bound: num_classes,
        });
    }
    let r = rng.random_range(0..num_classes - 1);
    Ok(if r >= label { r + 1 } else { r })
}

pub fn relabel(
    samples: impl IntoIterator<Item = (Vec<u32>, usize)>,
    num_classes: usize,
    rng: &mut SimRng,
) -> Result<Vec<RelabeledSample>> {
    samples
        .into_iter()
        .map(|(tokens, original)| {
            Ok(RelabeledSample {
                relabeled: relabel_one(original, num_classes, rng)?,
                tokens,
                original,
            })
        })
        .collect()
}

/// Shard-local index sets for one request: forget ⊆ shard, retain drawn from
/// the rest. Both sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnSets {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

pub fn draw_sets(shard: &TokenizedDataset, request: &UnlearnRequest) -> Result<UnlearnSets> {
    let n = shard.len();
    let mut rng = rng_for(request.seed, Stream::Unlearn, &[request.client_id as u64]);
    let mut forget = match &request.forget {
        ForgetSelection::Fraction(f) => {
            if n == 0 {
                Vec::new()
            } else {
                let k = ((f * n as f64).round() as usize).clamp(1, n);
                rand::seq::index::sample(&mut rng, n, k).into_vec()
            }
        }
        ForgetSelection::Indices(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Index {
                    what: "forget sample",
                    index: bad,
                    bound: n,
                });
            }
            idx.clone()
        }
    };
    forget.sort_unstable();
    forget.dedup();
    if forget.is_empty() {
        return Err(Error::Contract("forget set is empty".into()));
    }
    let rest: Vec<usize> = (0..n).filter(|i| forget.binary_search(i).is_err()).collect();
    let want = request.retain_count.unwrap_or(rest.len()).min(rest.len());
    let mut retain: Vec<usize> = rand::seq::index::sample(&mut rng, rest.len(), want)
        .into_iter()
        .map(|k| rest[k])
        .collect();
    retain.sort_unstable();
    Ok(UnlearnSets { forget, retain })
}

/// `Σ_retain ℓ + λ·Σ_forget ℓ(relabeled)` with its generator gradient.
/// `correct` counts retain samples predicted correctly.
pub fn unlearn_loss(
    encoder: &Encoder,
    generator: &GeneratorParams,
    retain: &[(&[u32], usize)],
    forget: &[RelabeledSample],
    lambda: f64,
) -> Result<LossReport> {
    if forget.is_empty() {
        return Err(Error::Contract("forget set is empty".into()));
    }
    let mut s = Session::new(encoder, generator)?;
    let forget_batch = forget.iter().map(|r| (r.tokens.as_slice(), r.relabeled));
    let (forget_loss, _) = s.batch_loss(forget_batch)?;
    let weighted = s.graph.scale(forget_loss, lambda)?;
    let (loss, correct) = if retain.is_empty() {
        (weighted, 0)
    } else {
        let (retain_loss, correct) = s.batch_loss(retain.iter().copied())?;
        (s.graph.add(retain_loss, weighted)?, correct)
    };
    s.graph.backward(loss)?;
    Ok(LossReport {
        loss: s.graph.value(loss).item()?,
        correct,
        grads: s.generator_grads(),
    })
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub params: GeneratorParams,
    pub sets: UnlearnSets,
    pub relabeled: Vec<RelabeledSample>,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Runs the request on `client`, starting from `global`.
pub fn local_unlearn(
    client: &ClientState,
    global: &GeneratorParams,
    encoder: &Encoder,
    request: &UnlearnRequest,
) -> Result<UnlearnOutcome> {
    request.validate()?;
    if client.id != request.client_id {
        return Err(Error::Contract(format!(
            "request for client {} sent to client {}",
            request.client_id, client.id
        )));
    }
    let shard = &client.shard;
    let sets = draw_sets(shard, request)?;
    let mut rng = rng_for(request.seed, Stream::Relabel, &[request.client_id as u64]);
    let relabeled = relabel(
        sets.forget.iter().map(|&i| (shard.tokens(i), shard.label(i))),
        shard.num_classes(),
        &mut rng,
    )?;
    let retain_tokens: Vec<Vec<u32>> = sets.retain.iter().map(|&i| shard.tokens(i)).collect();
    let retain: Vec<(&[u32], usize)> = retain_tokens
        .iter()
        .zip(&sets.retain)
        .map(|(t, &i)| (t.as_slice(), shard.label(i)))
        .collect();

    let forget_correct = |p: &GeneratorParams| -> Result<usize> {
        let mut n = 0;
        for r in &relabeled {
            n += usize::from(predict(encoder, p, &r.tokens)? == r.original);
        }
        Ok(n)
    };
    let start = if request.early_stop { forget_correct(global)? } else { 0 };

    let mut params = global.clone();
    let mut losses = Vec::with_capacity(request.unlearn_epochs);
    for _ in 0..request.unlearn_epochs {
        let mut report = unlearn_loss(encoder, &params, &retain, &relabeled, request.lambda)?;
        losses.push(report.loss);
        sgd_step(&mut params, &mut report.grads, request.lr)?;
        if request.early_stop && forget_correct(&params)? < start {
            break;
        }
    }
    Ok(UnlearnOutcome {
        params,
        sets,
        relabeled,
        losses,
    })
}

/// The requesting client uploads its unlearned generator and the server
/// adopts it as the new global generator, without averaging.
pub fn server_replace(federation: &mut Federation, client_id: usize, params: &GeneratorParams) -> Result<()> {
    if client_id >= federation.clients.len() {
        return Err(Error::Index {
            what: "client",
            index: client_id,
            bound: federation.clients.len(),
        });
    }
    if !params.same_structure(federation.global()) {
        return Err(Error::Aggregation { client: client_id });
    }
    let round = federation.server.round;
    let arrived = federation.transport_mut().send(round, client_id, Direction::Upload, params)?;
    federation.clients[client_id].local_generator = Some(params.clone());
    federation.server.global_generator = arrived;
    federation.server.round += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// Accuracy on the forget set under its original labels.
    pub forget_before: f64,
    pub forget_after: f64,
    pub global_before: f64,
    pub global_after: f64,
    pub clients: Vec<ClientAccuracy>,
}

impl ForgettingReport {
    pub fn forget_delta(&self) -> f64 {
        self.forget_after - self.forget_before
    }

    pub fn global_delta(&self) -> f64 {
        self.global_after - self.global_before
    }
}

/// Before/after comparison. `clients` pairs each sampled client id with its
/// private data.
pub fn evaluate_forgetting(
    encoder: &Encoder,
    before: &GeneratorParams,
    after: &GeneratorParams,
    forget_set: &TokenizedDataset,
    test: &TokenizedDataset,
    clients: &[(usize, &TokenizedDataset)],
    exec: Execution,
) -> Result<ForgettingReport> {
    let acc = |g: &GeneratorParams, d: &TokenizedDataset| evaluate_global(g, d, encoder, exec);
    let clients = clients
        .iter()
        .map(|&(client_id, data)| {
            Ok(ClientAccuracy {
                client_id,
                before: acc(before, data)?,
                after: acc(after, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForgettingReport {
        forget_before: acc(before, forget_set)?,
        forget_after: acc(after, forget_set)?,
        global_before: acc(before, test)?,
        global_after: acc(after, test)?,
        clients,
    })
}
