//! Token-id classification datasets: a synthetic generator with a known
//! generative process (and therefore a computable Bayes-optimal classifier),
//! padding, and JSON-lines ingestion.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Id reserved for padding in every generated vocabulary.
pub const PAD_ID: u32 = 0;

/// Generative process: each sample draws its class uniformly; each position
/// is, with probability `signal_rate`, a uniform draw from that class's
/// signal set, otherwise a uniform draw from the shared noise set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub signal_tokens: Vec<Vec<u32>>,
    pub noise_tokens: Vec<u32>,
    pub signal_rate: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Signal sets are consecutive blocks of `per_class` ids starting at
    /// `signal_start`; noise ids are `noise_start..vocab_size`.
    #[allow(clippy::too_many_arguments)]
    pub fn blocks(
        num_classes: usize,
        vocab_size: usize,
        seq_len: (usize, usize),
        signal_rate: f64,
        signal_start: u32,
        per_class: u32,
        noise_start: u32,
        seed: u64,
    ) -> Result<Self> {
        let signal_tokens = (0..num_classes as u32)
            .map(|c| {
                let s = signal_start + c * per_class;
                (s..s + per_class).collect()
            })
            .collect();
        let spec = SyntheticTaskSpec {
            num_classes,
            vocab_size,
            seq_len_min: seq_len.0,
            seq_len_max: seq_len.1,
            signal_tokens,
            noise_tokens: (noise_start..vocab_size as u32).collect(),
            signal_rate,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticTaskSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 || self.signal_tokens.len() != self.num_classes {
            return bad(format!(
                "need one signal set per class ({} classes, {} sets)",
                self.num_classes,
                self.signal_tokens.len()
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad(format!("bad length range {}..={}", self.seq_len_min, self.seq_len_max));
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return bad(format!("signal_rate {} outside [0, 1]", self.signal_rate));
        }
        if self.noise_tokens.is_empty() && self.signal_rate < 1.0 {
            return bad("noise set is empty".into());
        }
        let mut seen = vec![false; self.vocab_size];
        for &t in self.signal_tokens.iter().flatten().chain(&self.noise_tokens) {
            if t == PAD_ID || t as usize >= self.vocab_size {
                return bad(format!("token {t} is padding or outside vocab {}", self.vocab_size));
            }
            if std::mem::replace(&mut seen[t as usize], true) {
                return bad(format!("token {t} appears in more than one set"));
            }
        }
        if self.signal_tokens.iter().any(Vec::is_empty) && self.signal_rate > 0.0 {
            return bad("empty signal set".into());
        }
        Ok(())
    }

    fn class_of_signal(&self, token: u32) -> Option<usize> {
        self.signal_tokens.iter().position(|s| s.contains(&token))
    }

    /// Exact per-class log-likelihoods of a token sequence under the
    /// generative process (`-inf` for impossible classes).
    pub fn log_likelihoods(&self, tokens: &[u32]) -> Vec<f64> {
        let p = self.signal_rate;
        let noise_prob = (1.0 - p) / self.noise_tokens.len().max(1) as f64;
        (0..self.num_classes)
            .map(|c| {
                let signal_prob = p / self.signal_tokens[c].len().max(1) as f64;
                tokens
                    .iter()
                    .map(|&t| {
                        let prob = match self.class_of_signal(t) {
                            Some(owner) if owner == c => signal_prob,
                            Some(_) => 0.0,
                            None if self.noise_tokens.contains(&t) => noise_prob,
                            None => 0.0,
                        };
                        prob.ln()
                    })
                    .sum()
            })
            .collect()
    }

    /// Maximum-posterior class (uniform prior); ties go to the lowest index.
    pub fn bayes_predict(&self, tokens: &[u32]) -> usize {
        argmax(&self.log_likelihoods(tokens))
    }

    /// Accuracy of the Bayes-optimal classifier on `data`.
    pub fn bayes_accuracy(&self, data: &TokenizedDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len())
            .filter(|&i| self.bayes_predict(&data.tokens(i)) == data.label(i))
            .count();
        correct as f64 / data.len() as f64
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDataset {
    sequences: Vec<Vec<u32>>,
    labels: Vec<usize>,
    vocab_size: usize,
    num_classes: usize,
    pad_id: Option<u32>,
    spec: Option<SyntheticTaskSpec>,
}

/// Validation parameters for externally supplied data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSchema {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub pad_id: Option<u32>,
}

impl TokenizedDataset {
    pub fn new(sequences: Vec<Vec<u32>>, labels: Vec<usize>, schema: DatasetSchema) -> Result<Self> {
        if sequences.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        for (i, (seq, &label)) in sequences.iter().zip(&labels).enumerate() {
            validate_sample(seq, label, &schema).map_err(|m| Error::Input(format!("sample {i}: {m}")))?;
        }
        Ok(TokenizedDataset {
            sequences,
            labels,
            vocab_size: schema.vocab_size,
            num_classes: schema.num_classes,
            pad_id: schema.pad_id,
            spec: None,
        })
    }

    pub fn empty(schema: DatasetSchema) -> Self {
        TokenizedDataset::new(Vec::new(), Vec::new(), schema).expect("empty dataset is valid")
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            pad_id: self.pad_id,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pad_id(&self) -> Option<u32> {
        self.pad_id
    }

    pub fn spec(&self) -> Option<&SyntheticTaskSpec> {
        self.spec.as_ref()
    }

    /// Stored sequence including any padding.
    pub fn raw(&self, i: usize) -> &[u32] {
        &self.sequences[i]
    }

    /// Non-pad tokens of sample `i`, in order.
    pub fn tokens(&self, i: usize) -> Vec<u32> {
        match self.pad_id {
            Some(pad) => self.sequences[i].iter().copied().filter(|&t| t != pad).collect(),
            None => self.sequences[i].clone(),
        }
    }

    /// `true` at every non-pad position of sample `i`.
    pub fn pad_mask(&self, i: usize) -> Vec<bool> {
        self.sequences[i].iter().map(|&t| Some(t) != self.pad_id).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> TokenizedDataset {
        TokenizedDataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            pad_id: self.pad_id,
            spec: self.spec.clone(),
        }
    }

    /// Same samples with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<TokenizedDataset> {
        let mut out = TokenizedDataset::new(self.sequences.clone(), labels, self.schema())?;
        out.spec = self.spec.clone();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// SHA-256 over schema, sequences and labels, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        h.update(self.pad_id.map_or(u64::MAX, u64::from).to_le_bytes());
        for (seq, &label) in self.sequences.iter().zip(&self.labels) {
            h.update((seq.len() as u64).to_le_bytes());
            for t in seq {
                h.update(t.to_le_bytes());
            }
            h.update((label as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (seq, &label) in self.sequences.iter().zip(&self.labels) {
            let line = serde_json::to_string(&JsonlRecord {
                tokens: seq.clone(),
                label,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn validate_sample(seq: &[u32], label: usize, schema: &DatasetSchema) -> std::result::Result<(), String> {
    if label >= schema.num_classes {
        return Err(format!("label {label} outside 0..{}", schema.num_classes));
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= schema.vocab_size) {
        return Err(format!("token id {bad} outside vocabulary of size {}", schema.vocab_size));
    }
    if seq.iter().all(|&t| Some(t) == schema.pad_id) {
        return Err("sequence has no non-pad tokens".into());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    tokens: Vec<u32>,
    label: usize,
}

/// Draws `n_samples` from the generative process; deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n_samples: usize) -> Result<TokenizedDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Stream::Data, &[]);
    let mut sequences = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let class = rng.random_range(0..spec.num_classes);
        let len = rng.random_range(spec.seq_len_min..=spec.seq_len_max);
        let signal = &spec.signal_tokens[class];
        let seq = (0..len)
            .map(|_| {
                if rng.random_bool(spec.signal_rate) {
                    signal[rng.random_range(0..signal.len())]
                } else {
                    spec.noise_tokens[rng.random_range(0..spec.noise_tokens.len())]
                }
            })
            .collect();
        sequences.push(seq);
        labels.push(class);
    }
    let schema = DatasetSchema {
        vocab_size: spec.vocab_size,
        num_classes: spec.num_classes,
        pad_id: Some(PAD_ID),
    };
    let mut data = TokenizedDataset::new(sequences, labels, schema)?;
    data.spec = Some(spec.clone());
    Ok(data)
}

/// Right-pads every sequence to `max_len` with `pad_id` and truncates longer
/// tails. `pad_id` must lie inside the vocabulary and never occur as a real
/// token.
pub fn tokenize_and_pad(
    raw: &[Vec<u32>],
    labels: &[usize],
    max_len: usize,
    pad_id: u32,
    vocab_size: usize,
    num_classes: usize,
) -> Result<TokenizedDataset> {
    if pad_id as usize >= vocab_size {
        return Err(Error::Input(format!("pad id {pad_id} outside vocabulary {vocab_size}")));
    }
    let mut sequences = Vec::with_capacity(raw.len());
    for (i, seq) in raw.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Input(format!("sample {i} is an empty sequence")));
        }
        if seq.contains(&pad_id) {
            return Err(Error::Input(format!("sample {i} uses the reserved pad id {pad_id}")));
        }
        let mut s: Vec<u32> = seq.iter().copied().take(max_len).collect();
        s.resize(max_len, pad_id);
        sequences.push(s);
    }
    TokenizedDataset::new(
        sequences,
        labels.to_vec(),
        DatasetSchema {
            vocab_size,
            num_classes,
            pad_id: Some(pad_id),
        },
    )
}

/// Reads one `{"tokens": [...], "label": k}` object per line. Blank lines are
/// skipped; any malformed or out-of-range line is reported with its number.
pub fn load_jsonl(path: &Path, schema: DatasetSchema) -> Result<TokenizedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        validate_sample(&rec.tokens, rec.label, &schema).map_err(parse_err)?;
        sequences.push(rec.tokens);
        labels.push(rec.label);
    }
    TokenizedDataset::new(sequences, labels, schema)
}
