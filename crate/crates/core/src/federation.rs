//! Centralized federated rounds over the prompt generator.
//!
//! Each round: select clients, broadcast the global generator, train locally,
//! upload, and replace the global generator with the unweighted element-wise
//! mean of the uploads. Only generator parameters ever cross the
//! [`Transport`]; shards stay on their clients and the encoder is never
//! touched.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::TokenizedDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::generator::{accuracy, forward_loss, sgd_step, GeneratorParams};
use crate::rng::{derive_seed, rng_for, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    /// Seeded shuffle, then contiguous equal split (remainder to low ids).
    Iid,
    /// Per-class Dirichlet(α) proportions across clients.
    LabelSkew { alpha: f64 },
}

/// Client index lists; disjoint, each sorted ascending, union = `0..n`.
pub fn partition_indices(
    dataset: &TokenizedDataset,
    num_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = dataset.len();
    if num_clients == 0 || n < num_clients {
        return Err(Error::Partition {
            samples: n,
            clients: num_clients,
        });
    }
    let mut rng = rng_for(seed, Stream::Partition, &[]);
    let mut shards = vec![Vec::new(); num_clients];
    match scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (n / num_clients, n % num_clients);
            let mut start = 0;
            for (c, shard) in shards.iter_mut().enumerate() {
                let size = base + usize::from(c < extra);
                shard.extend_from_slice(&order[start..start + size]);
                start += size;
            }
        }
        PartitionScheme::LabelSkew { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
            for class in 0..dataset.num_classes() {
                let mut idx: Vec<usize> = (0..n).filter(|&i| dataset.label(i) == class).collect();
                idx.shuffle(&mut rng);
                let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut cum = 0.0;
                let mut start = 0;
                for (c, d) in draws.iter().enumerate() {
                    cum += d;
                    let end = if c + 1 == num_clients {
                        idx.len()
                    } else {
                        ((cum / total) * idx.len() as f64).round() as usize
                    }
                    .clamp(start, idx.len());
                    shards[c].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

pub fn partition(
    dataset: &TokenizedDataset,
    num_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<TokenizedDataset>> {
    Ok(partition_indices(dataset, num_clients, scheme, seed)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub num_clients: usize,
    pub selection_ratio: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            num_clients: 100,
            selection_ratio: 0.10,
            local_epochs: 1,
            lr: 0.05,
            batch_size: 8,
            execution: Execution::Parallel,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be positive".into()));
        }
        if !(self.selection_ratio > 0.0 && self.selection_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "selection_ratio {} outside (0, 1]",
                self.selection_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    /// Clients per round: `round(ratio × num_clients)`, at least one.
    pub fn clients_per_round(&self) -> usize {
        ((self.selection_ratio * self.num_clients as f64).round() as usize).clamp(1, self.num_clients)
    }
}

/// Uniform selection without replacement, seeded by `(seed, round)`, sorted.
pub fn select_clients(num_clients: usize, ratio: f64, seed: u64, round: u64) -> Vec<usize> {
    let cfg = RoundConfig {
        num_clients,
        selection_ratio: ratio,
        ..RoundConfig::default()
    };
    let count = cfg.clients_per_round();
    let mut rng = rng_for(seed, Stream::Selection, &[round]);
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, count).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub shard: TokenizedDataset,
    /// Last locally trained generator, if the client has participated.
    pub local_generator: Option<GeneratorParams>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global_generator: GeneratorParams,
    pub round: u64,
    pub encoder_digest: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: GeneratorParams,
    /// Summed loss per local epoch, measured batch by batch before each step.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
}

/// Local training from a copy of the global generator. Returns `None` for an
/// empty shard.
pub fn local_train(
    client: &ClientState,
    global: &GeneratorParams,
    encoder: &Encoder,
    cfg: &RoundConfig,
    round: u64,
) -> Result<Option<LocalUpdate>> {
    if client.shard.is_empty() {
        log::warn!("client {} has an empty shard; skipping", client.id);
        return Ok(None);
    }
    let mut params = global.clone();
    let mut rng = rng_for(client.seed, Stream::LocalTrain, &[round]);
    let mut order: Vec<usize> = (0..client.shard.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let tokens: Vec<Vec<u32>> = chunk.iter().map(|&i| client.shard.tokens(i)).collect();
            let batch: Vec<(&[u32], usize)> = tokens
                .iter()
                .zip(chunk)
                .map(|(t, &i)| (t.as_slice(), client.shard.label(i)))
                .collect();
            let mut report = forward_loss(encoder, &params, &batch)?;
            epoch_loss += report.loss;
            sgd_step(&mut params, &mut report.grads, cfg.lr)?;
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(Some(LocalUpdate {
        client_id: client.id,
        params,
        epoch_losses,
        samples: client.shard.len(),
    }))
}

/// Unweighted element-wise mean. Updates are summed in ascending client id
/// order whatever order they are passed in. An element on which every update
/// agrees bit for bit is copied through, since `N·x/N` need not round to `x`.
pub fn aggregate(updates: &[(usize, &GeneratorParams)]) -> Result<GeneratorParams> {
    let mut sorted: Vec<&(usize, &GeneratorParams)> = updates.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let (_, first) = **sorted
        .first()
        .ok_or_else(|| Error::Contract("aggregate of no updates".into()))?;
    if let Some((id, _)) = sorted.iter().find(|(_, p)| !p.same_structure(first)) {
        return Err(Error::Aggregation { client: *id });
    }
    let mut out = (*first).clone();
    let n = sorted.len() as f64;
    for t in 0..out.params().len() {
        let target = out.params_mut().tensor_mut(t).data_mut();
        for (j, out_v) in target.iter_mut().enumerate() {
            let first_v = *out_v;
            let mut sum = 0.0;
            let mut agree = true;
            for (_, p) in &sorted {
                let v = p.params().tensor(t).data()[j];
                agree &= v.to_bits() == first_v.to_bits();
                sum += v;
            }
            if !agree {
                *out_v = sum / n;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Broadcast,
    Upload,
}

/// Everything that can cross the client/server boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    GeneratorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub round: u64,
    pub client_id: usize,
    pub direction: Direction,
    pub kind: PayloadKind,
    pub bytes: usize,
}

/// Instrumented channel. Payloads are serialized and decoded on the other
/// side, so the receiver never shares memory with the sender.
#[derive(Clone, Debug, Default)]
pub struct Transport {
    log: Vec<TransferRecord>,
}

impl Transport {
    pub fn send(
        &mut self,
        round: u64,
        client_id: usize,
        direction: Direction,
        params: &GeneratorParams,
    ) -> Result<GeneratorParams> {
        let bytes = params.to_bytes();
        self.log.push(TransferRecord {
            round,
            client_id,
            direction,
            kind: PayloadKind::GeneratorParams,
            bytes: bytes.len(),
        });
        GeneratorParams::from_bytes(&bytes)
    }

    pub fn log(&self) -> &[TransferRecord] {
        &self.log
    }

    pub fn total_bytes(&self) -> usize {
        self.log.iter().map(|r| r.bytes).sum()
    }

    fn bytes_in_round(&self, round: u64) -> usize {
        self.log.iter().filter(|r| r.round == round).map(|r| r.bytes).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub selected: Vec<usize>,
    pub accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub bytes_transmitted: usize,
    pub wall_time_ms: f64,
}

/// Server, clients, the shared frozen encoder, and the transport between them.
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub config: RoundConfig,
    encoder: Arc<Encoder>,
    transport: Transport,
}

impl Federation {
    pub fn new(
        encoder: Arc<Encoder>,
        initial: GeneratorParams,
        shards: Vec<TokenizedDataset>,
        config: RoundConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !encoder.is_frozen() {
            return Err(Error::Contract("federated training requires a frozen encoder".into()));
        }
        if shards.len() != config.num_clients {
            return Err(Error::Config(format!(
                "{} shards for {} clients",
                shards.len(),
                config.num_clients
            )));
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState {
                id,
                shard,
                local_generator: None,
                seed: derive_seed(seed, Stream::LocalTrain, &[id as u64]),
            })
            .collect();
        Ok(Federation {
            server: ServerState {
                global_generator: initial,
                round: 0,
                encoder_digest: encoder.digest(),
                seed,
            },
            clients,
            config,
            encoder,
            transport: Transport::default(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn global(&self) -> &GeneratorParams {
        &self.server.global_generator
    }

    pub(crate) fn transport_mut(&mut self) -> &mut Transport {
        &mut self.transport
    }

    /// Select, broadcast, train locally, upload, aggregate. `test` (if given)
    /// is evaluated with the new global generator.
    pub fn run_round(&mut self, test: Option<&TokenizedDataset>) -> Result<RoundMetrics> {
        let started = Instant::now();
        let t = self.server.round;
        let selected = select_clients(self.config.num_clients, self.config.selection_ratio, self.server.seed, t);

        let mut received = Vec::with_capacity(selected.len());
        for &id in &selected {
            received.push(self.transport.send(t, id, Direction::Broadcast, &self.server.global_generator)?);
        }

        let (clients, encoder, cfg) = (&self.clients, self.encoder.as_ref(), &self.config);
        let results = cfg.execution.map(selected.len(), |k| {
            local_train(&clients[selected[k]], &received[k], encoder, cfg, t)
        });

        let mut uploads = Vec::with_capacity(selected.len());
        let mut losses = Vec::new();
        for result in results {
            let Some(update) = result? else { continue };
            let arrived = self.transport.send(t, update.client_id, Direction::Upload, &update.params)?;
            if let Some(last) = update.epoch_losses.last() {
                losses.push(last / update.samples as f64);
            }
            self.clients[update.client_id].local_generator = Some(update.params);
            uploads.push((update.client_id, arrived));
        }

        if !uploads.is_empty() {
            let refs: Vec<(usize, &GeneratorParams)> = uploads.iter().map(|(id, p)| (*id, p)).collect();
            self.server.global_generator = aggregate(&refs)?;
        }
        self.server.round += 1;

        let accuracy = match test {
            Some(test) => Some(evaluate_global(&self.server.global_generator, test, &self.encoder, cfg.execution)?),
            None => None,
        };
        Ok(RoundMetrics {
            round: self.server.round,
            selected,
            accuracy,
            mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            bytes_transmitted: self.transport.bytes_in_round(t),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Global test accuracy of a generator over the frozen encoder.
pub fn evaluate_global(
    generator: &GeneratorParams,
    test: &TokenizedDataset,
    encoder: &Encoder,
    exec: Execution,
) -> Result<f64> {
    accuracy(encoder, generator, test, exec)
}

/// Accuracy of an arbitrary predictor over `test`.
pub fn evaluate_predictions(test: &TokenizedDataset, mut predict: impl FnMut(&[u32]) -> usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let correct = (0..test.len()).filter(|&i| predict(&test.tokens(i)) == test.label(i)).count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticTaskSpec};
    use crate::encoder::EncoderConfig;
    use crate::generator::{Activation, GeneratorConfig, InputMode};
    use crate::rng::uniform_tensor;
    use proptest::prelude::*;

    fn task(n: usize, seed: u64) -> TokenizedDataset {
        let spec = SyntheticTaskSpec::blocks(2, 40, (6, 8), 0.5, 1, 4, 9, seed).unwrap();
        generate_synthetic(&spec, n).unwrap()
    }

    fn enc() -> Arc<Encoder> {
        let cfg = EncoderConfig {
            d_e: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            vocab_size: 40,
            max_len: 16,
            num_classes: 2,
        };
        Arc::new(Encoder::frozen_random(cfg, 3).unwrap())
    }

    fn gcfg() -> GeneratorConfig {
        GeneratorConfig {
            d_e: 8,
            hidden: 4,
            prompt_len: 2,
            activation: Activation::Tanh,
            input_mode: InputMode::PromptAndText,
        }
    }

    fn vector_params(values: &[f64]) -> GeneratorParams {
        let cfg = GeneratorConfig {
            d_e: values.len(),
            hidden: 1,
            prompt_len: 1,
            activation: Activation::Tanh,
            input_mode: InputMode::StaticPrompt,
        };
        let mut p = GeneratorParams::zeros(cfg).unwrap();
        p.params_mut().tensor_mut(0).data_mut().copy_from_slice(values);
        p
    }

    #[test]
    fn iid_partition_one_each() {
        let d = task(100, 1);
        let shards = partition_indices(&d, 100, PartitionScheme::Iid, 4).unwrap();
        assert!(shards.iter().all(|s| s.len() == 1));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn iid_remainder_goes_to_low_ids() {
        let d = task(103, 1);
        let shards = partition_indices(&d, 10, PartitionScheme::Iid, 4).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![11, 11, 11, 10, 10, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn partition_errors() {
        let d = task(5, 1);
        assert!(matches!(
            partition(&d, 6, PartitionScheme::Iid, 0),
            Err(Error::Partition { samples: 5, clients: 6 })
        ));
        assert!(partition(&d, 2, PartitionScheme::LabelSkew { alpha: 0.0 }, 0).is_err());
    }

    #[test]
    fn large_alpha_label_skew_is_near_global() {
        let d = task(1000, 2);
        let global: Vec<f64> = d.class_counts().iter().map(|&c| c as f64 / 1000.0).collect();
        let shards = partition(&d, 10, PartitionScheme::LabelSkew { alpha: 1000.0 }, 5).unwrap();
        for s in &shards {
            let tv: f64 = s
                .class_counts()
                .iter()
                .zip(&global)
                .map(|(&c, g)| (c as f64 / s.len() as f64 - g).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.1, "total variation {tv}");
        }
        assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), 1000);
    }

    #[test]
    fn small_alpha_label_skew_is_skewed() {
        let d = task(1000, 2);
        let idx = partition_indices(&d, 10, PartitionScheme::LabelSkew { alpha: 0.05 }, 5).unwrap();
        let mut all = idx.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let global = d.class_counts()[1] as f64 / 1000.0;
        let skew: Vec<f64> = idx
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| (s.iter().filter(|&&i| d.label(i) == 1).count() as f64 / s.len() as f64 - global).abs())
            .collect();
        let mean = skew.iter().sum::<f64>() / skew.len() as f64;
        assert!(mean > 0.25, "mean total variation {mean}");
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_clients(20, 1.0, 1, 0), (0..20).collect::<Vec<_>>());
        let s = select_clients(100, 0.05, 1, 3);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_clients(100, 0.05, 1, 3));
        assert_ne!(s, select_clients(100, 0.05, 1, 4));
        assert_eq!(select_clients(10, 0.01, 1, 0).len(), 1);
    }

    #[test]
    fn aggregate_examples() {
        let a = vector_params(&[1.0, 3.0]);
        let b = vector_params(&[3.0, 5.0]);
        let m = aggregate(&[(0, &a), (1, &b)]).unwrap();
        assert_eq!(m.params().tensor(0).data(), &[2.0, 4.0]);

        let same = vector_params(&[0.1, 0.7]);
        let m = aggregate(&[(0, &same), (1, &same), (2, &same)]).unwrap();
        assert!(m.bit_eq(&same));

        let other = vector_params(&[1.0, 2.0, 3.0]);
        assert!(matches!(aggregate(&[(0, &a), (7, &other)]), Err(Error::Aggregation { client: 7 })));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_order_independent_of_input_order() {
        let mut rng = rng_for(9, Stream::Evaluation, &[]);
        let ps: Vec<GeneratorParams> = (0..6)
            .map(|_| vector_params(uniform_tensor(&mut rng, &[4], 1.0).data()))
            .collect();
        let fwd: Vec<(usize, &GeneratorParams)> = ps.iter().enumerate().collect();
        let mut rev = fwd.clone();
        rev.reverse();
        assert!(aggregate(&fwd).unwrap().bit_eq(&aggregate(&rev).unwrap()));
    }

    proptest! {
        #[test]
        fn aggregation_is_linear(values in prop::collection::vec(-10.0f64..10.0, 12), a in -4.0f64..4.0) {
            let ups: Vec<GeneratorParams> = values.chunks(3).map(vector_params).collect();
            let scaled: Vec<GeneratorParams> = values.chunks(3)
                .map(|c| vector_params(&c.iter().map(|v| a * v).collect::<Vec<_>>()))
                .collect();
            let m = aggregate(&ups.iter().enumerate().collect::<Vec<_>>()).unwrap();
            let ms = aggregate(&scaled.iter().enumerate().collect::<Vec<_>>()).unwrap();
            for (x, y) in m.params().tensor(0).data().iter().zip(ms.params().tensor(0).data()) {
                prop_assert!((a * x - y).abs() <= 1e-13 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn local_train_no_op_cases() {
        let encoder = enc();
        let global = GeneratorParams::init(gcfg(), 1).unwrap();
        let client = ClientState {
            id: 0,
            shard: task(20, 3),
            local_generator: None,
            seed: 5,
        };
        let mut cfg = RoundConfig {
            local_epochs: 0,
            ..RoundConfig::default()
        };
        let u = local_train(&client, &global, &encoder, &cfg, 0).unwrap().unwrap();
        assert!(u.params.bit_eq(&global));
        cfg.local_epochs = 2;
        cfg.lr = 0.0;
        let u = local_train(&client, &global, &encoder, &cfg, 0).unwrap().unwrap();
        assert!(u.params.bit_eq(&global));

        let empty = ClientState {
            shard: client.shard.subset(&[]),
            ..client.clone()
        };
        assert!(local_train(&empty, &global, &encoder, &cfg, 0).unwrap().is_none());
    }

    #[test]
    fn local_training_decreases_loss() {
        let encoder = enc();
        let global = GeneratorParams::init(gcfg(), 1).unwrap();
        let client = ClientState {
            id: 0,
            shard: task(16, 3),
            local_generator: None,
            seed: 5,
        };
        // 20 epochs of one full batch each = 20 steps
        let cfg = RoundConfig {
            local_epochs: 20,
            batch_size: 16,
            lr: 0.05,
            ..RoundConfig::default()
        };
        let u = local_train(&client, &global, &encoder, &cfg, 0).unwrap().unwrap();
        assert!(u.epoch_losses.last().unwrap() < u.epoch_losses.first().unwrap(), "{:?}", u.epoch_losses);
    }

    fn small_federation(execution: Execution) -> (Federation, TokenizedDataset) {
        let d = task(120, 7);
        let shards = partition(&d, 12, PartitionScheme::Iid, 1).unwrap();
        let cfg = RoundConfig {
            num_clients: 12,
            selection_ratio: 0.25,
            local_epochs: 1,
            lr: 0.05,
            batch_size: 4,
            execution,
        };
        let fed = Federation::new(enc(), GeneratorParams::init(gcfg(), 2).unwrap(), shards, cfg, 11).unwrap();
        (fed, task(60, 8))
    }

    #[test]
    fn round_accounting_and_frozen_encoder() {
        let (mut fed, test) = small_federation(Execution::Sequential);
        let digest = fed.encoder().digest();
        let size = fed.global().serialized_size();
        let m = fed.run_round(Some(&test)).unwrap();
        assert_eq!(m.round, 1);
        assert_eq!(m.selected.len(), 3);
        assert_eq!(m.bytes_transmitted, 2 * 3 * size);
        assert!(m.accuracy.is_some());
        assert_eq!(fed.encoder().digest(), digest);
        assert!(fed.transport().log().iter().all(|r| r.kind == PayloadKind::GeneratorParams));
    }

    #[test]
    fn unchanged_updates_keep_global() {
        let (mut fed, _) = small_federation(Execution::Sequential);
        fed.config.lr = 0.0;
        let before = fed.global().clone();
        fed.run_round(None).unwrap();
        assert!(fed.global().bit_eq(&before));
        assert_eq!(fed.server.round, 1);
    }

    #[test]
    fn sequential_and_parallel_rounds_agree() {
        let (mut a, test) = small_federation(Execution::Sequential);
        let (mut b, _) = small_federation(Execution::Parallel);
        for _ in 0..3 {
            let ma = a.run_round(Some(&test)).unwrap();
            let mb = b.run_round(Some(&test)).unwrap();
            assert_eq!(ma.selected, mb.selected);
            assert_eq!(ma.accuracy, mb.accuracy);
            assert!(a.global().bit_eq(b.global()));
        }
    }

    #[test]
    fn federation_requires_frozen_encoder() {
        let d = task(20, 7);
        let shards = partition(&d, 4, PartitionScheme::Iid, 1).unwrap();
        let unfrozen = Arc::new(Encoder::init(*enc().config(), 1).unwrap());
        let cfg = RoundConfig {
            num_clients: 4,
            ..RoundConfig::default()
        };
        assert!(Federation::new(unfrozen, GeneratorParams::init(gcfg(), 2).unwrap(), shards, cfg, 1).is_err());
    }

    #[test]
    fn oracle_and_chance_evaluation() {
        let spec = SyntheticTaskSpec::blocks(2, 40, (6, 8), 1.0, 1, 4, 9, 1).unwrap();
        let d = generate_synthetic(&spec, 300).unwrap();
        assert_eq!(evaluate_predictions(&d, |t| spec.bayes_predict(t)).unwrap(), 1.0);
        let acc = evaluate_predictions(&d, |_| 0).unwrap();
        assert!((0.4..=0.6).contains(&acc), "{acc}");
        assert!(evaluate_predictions(&d.subset(&[]), |_| 0).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let encoder = enc();
        let g = GeneratorParams::init(gcfg(), 4).unwrap();
        let test = task(50, 2);
        let a = evaluate_global(&g, &test, &encoder, Execution::Sequential).unwrap();
        let b = evaluate_global(&g, &test, &encoder, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
