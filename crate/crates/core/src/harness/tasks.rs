//! Synthetic and file-backed token streams.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::SeededRng;

use super::train_config::{Task, TrainConfig};

/// Source of training batches; owns the task's data and RNG.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    task: Task,
    vocab: usize,
    seq: usize,
    sequences: usize,
    corpus: Vec<usize>,
    rng: SeededRng,
}

/// Stream id of the data RNG (parameters use stream 0).
pub const DATA_STREAM: u64 = 0x6461_7461;

fn load_corpus(path: &Path, vocab: usize) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if let Some(b) = bytes.iter().find(|&&b| b as usize >= vocab) {
        return Err(Error::Input(format!(
            "{} contains byte {b}, outside vocabulary {vocab}",
            path.display()
        )));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

impl TaskSampler {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let seq = config.sequence_len()?;
        let corpus = match &config.task {
            Task::CharLm { path } => {
                let c = load_corpus(path, config.model.vocab)?;
                if c.len() <= seq {
                    return Err(Error::Input(format!(
                        "{} holds {} bytes, fewer than one {}-token window",
                        path.display(),
                        c.len(),
                        seq + 1
                    )));
                }
                c
            }
            _ => Vec::new(),
        };
        Ok(Self {
            task: config.task.clone(),
            vocab: config.model.vocab,
            seq,
            sequences: config.sequences_per_batch()?,
            corpus,
            rng: SeededRng::new(config.seed, DATA_STREAM),
        })
    }

    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: SeededRng) {
        self.rng = rng;
    }

    /// The next batch; advances the sampler's RNG.
    pub fn next_batch(&mut self) -> Result<TokenBatch> {
        let mut tokens = Vec::with_capacity(self.sequences * self.seq);
        let mut targets = Vec::with_capacity(self.sequences * self.seq);
        for _ in 0..self.sequences {
            let (t, y) = self.sequence();
            tokens.extend(t);
            targets.extend(y);
        }
        TokenBatch::new(self.sequences, self.seq, tokens, targets)
    }

    fn sequence(&mut self) -> (Vec<usize>, Vec<Option<usize>>) {
        match &self.task {
            Task::Copy { prefix } => copy_sequence(&mut self.rng, *prefix, self.vocab),
            Task::ModularAdd { modulus } => {
                let a = self.rng.below(*modulus);
                let b = self.rng.below(*modulus);
                modular_add_sequence(a, b, *modulus)
            }
            Task::CharLm { .. } => {
                let start = self.rng.below(self.corpus.len() - self.seq);
                let w = &self.corpus[start..start + self.seq + 1];
                (w[..self.seq].to_vec(), w[1..].iter().map(|&t| Some(t)).collect())
            }
        }
    }
}

/// `prefix · sep · prefix` as next-token pairs; the separator is `vocab − 1`
/// and only positions predicting the copy carry targets.
pub fn copy_sequence(rng: &mut SeededRng, prefix: usize, vocab: usize) -> (Vec<usize>, Vec<Option<usize>>) {
    let sep = vocab - 1;
    let p: Vec<usize> = (0..prefix).map(|_| rng.below(sep)).collect();
    let mut full = p.clone();
    full.push(sep);
    full.extend(&p);
    let tokens = full[..2 * prefix].to_vec();
    let targets = (0..2 * prefix)
        .map(|i| (i >= prefix).then(|| full[i + 1]))
        .collect();
    (tokens, targets)
}

/// `a b =` with target `(a + b) mod p` on the `=` position; `=` is token `p`.
pub fn modular_add_sequence(a: usize, b: usize, modulus: usize) -> (Vec<usize>, Vec<Option<usize>>) {
    (vec![a, b, modulus], vec![None, None, Some((a + b) % modulus)])
}
