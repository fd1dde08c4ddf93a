use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::init::{default_base_std, InitKind, InitStrategy};
use crate::model::{Activation, ModelConfig, NormTopology};
use crate::norm::DEFAULT_EPS;

use super::config_file::ConfigDoc;

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// `prefix`, separator, `prefix` again; only the copy is scored.
    Copy { prefix: usize },
    /// `a b = (a + b) mod p`; only the answer is scored.
    ModularAdd { modulus: usize },
    /// Next-byte prediction over a text file.
    CharLm { path: PathBuf },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Copy { .. } => "copy",
            Task::ModularAdd { .. } => "modadd",
            Task::CharLm { .. } => "charlm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Input tokens per optimizer step (rounded down to whole sequences).
    pub batch_tokens: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub task: Task,
    pub seed: u64,
    /// Stride of `runlog.csv` rows.
    pub log_every: usize,
    /// Stride of propagation-trace snapshots; 0 disables them.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_tokens: 128,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            task: Task::Copy { prefix: 16 },
            seed: 0,
            log_every: 10,
            trace_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < min-lr ({}) <= peak-lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("adam eps and clip norm must be positive, weight decay non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log-every must be at least 1"));
        }
        let seq = self.sequence_len()?;
        if seq > self.model.seq_len {
            return Err(Error::config(format!(
                "task sequences of length {seq} exceed the model's {}",
                self.model.seq_len
            )));
        }
        if self.batch_tokens < seq {
            return Err(Error::config(format!(
                "batch of {} tokens holds no {seq}-token sequence",
                self.batch_tokens
            )));
        }
        match &self.task {
            Task::Copy { prefix } if *prefix == 0 || self.model.vocab < 3 => {
                Err(Error::config("copy task needs a prefix and a vocabulary of at least 3"))
            }
            Task::ModularAdd { modulus } if *modulus < 2 || self.model.vocab < modulus + 1 => Err(Error::config(
                format!("modular addition mod {modulus} needs vocabulary >= {}", modulus + 1),
            )),
            _ => Ok(()),
        }
    }

    /// Input length of one task sequence.
    pub fn sequence_len(&self) -> Result<usize> {
        Ok(match &self.task {
            Task::Copy { prefix } => 2 * prefix,
            Task::ModularAdd { .. } => 3,
            Task::CharLm { .. } => self.model.seq_len,
        })
    }

    pub fn sequences_per_batch(&self) -> Result<usize> {
        Ok((self.batch_tokens / self.sequence_len()?).max(1))
    }

    /// Reads a config document; absent keys keep their defaults. The block
    /// init std defaults to `1/√d_model`.
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        for section in doc.sections() {
            let known: &[&str] = match section {
                "model" => &[
                    "depth", "d_model", "n_heads", "d_ff", "topology", "init", "init_std", "vocab", "seq_len",
                    "activation", "eps",
                ],
                "train" => &[
                    "peak_lr", "min_lr", "warmup_steps", "total_steps", "batch_tokens", "beta1", "beta2",
                    "adam_eps", "weight_decay", "clip_norm", "task", "copy_prefix", "modulus", "data", "seed",
                    "log_every", "trace_every",
                ],
                other => return Err(Error::config(format!("unknown section [{other}]"))),
            };
            if let Some(k) = doc.keys(section).find(|k| !known.contains(k)) {
                return Err(Error::config(format!("unknown key `{k}` in [{section}]")));
            }
        }
        let d = TrainConfig::default();
        let dm = &d.model;
        let depth = doc.parse_or("model", "depth", dm.depth)?;
        let d_model = doc.parse_or("model", "d_model", dm.d_model)?;
        let kind = match doc.get("model", "init") {
            Some(s) => InitKind::parse(s)?,
            None => InitKind::Scaled,
        };
        let base = doc.parse_or("model", "init_std", default_base_std(d_model.max(1)))?;
        let topology = match doc.get("model", "topology") {
            Some(s) => NormTopology::parse(s)?,
            None => dm.topology,
        };
        let activation = match doc.get("model", "activation") {
            Some(s) => Activation::parse(s)?,
            None => dm.activation,
        };
        let seed = doc.parse_or("train", "seed", d.seed)?;
        let model = ModelConfig {
            depth,
            d_model,
            n_heads: doc.parse_or("model", "n_heads", dm.n_heads)?,
            d_ff: doc.parse_or("model", "d_ff", dm.d_ff)?,
            topology,
            init: match kind {
                InitKind::Global => InitStrategy::global(base),
                InitKind::Scaled => InitStrategy::scaled(base, depth),
            },
            vocab: doc.parse_or("model", "vocab", dm.vocab)?,
            seq_len: doc.parse_or("model", "seq_len", dm.seq_len)?,
            seed,
            activation,
            eps: doc.parse_or("model", "eps", DEFAULT_EPS)?,
        };
        let task = match doc.get("train", "task").unwrap_or("copy") {
            "copy" => Task::Copy {
                prefix: doc.parse_or("train", "copy_prefix", 16)?,
            },
            "modadd" => Task::ModularAdd {
                modulus: doc.parse_or("train", "modulus", 97)?,
            },
            "charlm" => Task::CharLm {
                path: doc
                    .get("train", "data")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::config("charlm task needs `data = <path>`"))?,
            },
            other => return Err(Error::config(format!("unknown task `{other}`"))),
        };
        let cfg = TrainConfig {
            model,
            peak_lr: doc.parse_or("train", "peak_lr", d.peak_lr)?,
            min_lr: doc.parse_or("train", "min_lr", d.min_lr)?,
            warmup_steps: doc.parse_or("train", "warmup_steps", d.warmup_steps)?,
            total_steps: doc.parse_or("train", "total_steps", d.total_steps)?,
            batch_tokens: doc.parse_or("train", "batch_tokens", d.batch_tokens)?,
            beta1: doc.parse_or("train", "beta1", d.beta1)?,
            beta2: doc.parse_or("train", "beta2", d.beta2)?,
            adam_eps: doc.parse_or("train", "adam_eps", d.adam_eps)?,
            weight_decay: doc.parse_or("train", "weight_decay", d.weight_decay)?,
            clip_norm: doc.parse_or("train", "clip_norm", d.clip_norm)?,
            task,
            seed,
            log_every: doc.parse_or("train", "log_every", d.log_every)?,
            trace_every: doc.parse_or("train", "trace_every", d.trace_every)?,
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_doc(&ConfigDoc::parse(text)?)
    }

    /// Full document; `TrainConfig::from_doc(&c.to_doc()) == c` for every
    /// config whose numbers survive `Display` (all finite `f64` do).
    pub fn to_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::default();
        let m = &self.model;
        doc.set("model", "depth", m.depth.to_string());
        doc.set("model", "d_model", m.d_model.to_string());
        doc.set("model", "n_heads", m.n_heads.to_string());
        doc.set("model", "d_ff", m.d_ff.to_string());
        doc.set("model", "topology", m.topology.to_string());
        doc.set("model", "init", m.init.kind.name());
        doc.set("model", "init_std", m.init.base_std.to_string());
        doc.set("model", "vocab", m.vocab.to_string());
        doc.set("model", "seq_len", m.seq_len.to_string());
        doc.set("model", "activation", m.activation.name());
        doc.set("model", "eps", m.eps.to_string());
        doc.set("train", "peak_lr", self.peak_lr.to_string());
        doc.set("train", "min_lr", self.min_lr.to_string());
        doc.set("train", "warmup_steps", self.warmup_steps.to_string());
        doc.set("train", "total_steps", self.total_steps.to_string());
        doc.set("train", "batch_tokens", self.batch_tokens.to_string());
        doc.set("train", "beta1", self.beta1.to_string());
        doc.set("train", "beta2", self.beta2.to_string());
        doc.set("train", "adam_eps", self.adam_eps.to_string());
        doc.set("train", "weight_decay", self.weight_decay.to_string());
        doc.set("train", "clip_norm", self.clip_norm.to_string());
        doc.set("train", "task", self.task.name());
        match &self.task {
            Task::Copy { prefix } => doc.set("train", "copy_prefix", prefix.to_string()),
            Task::ModularAdd { modulus } => doc.set("train", "modulus", modulus.to_string()),
            Task::CharLm { path } => doc.set("train", "data", path.display().to_string()),
        }
        doc.set("train", "seed", self.seed.to_string());
        doc.set("train", "log_every", self.log_every.to_string());
        doc.set("train", "trace_every", self.trace_every.to_string());
        doc
    }

    /// Same run with another seed (model init and data).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.model.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_doc(&c.to_doc()).unwrap(), c);
        let text = c.to_doc().to_string();
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn file_overrides() {
        let c = TrainConfig::parse(
            "[model]\ndepth = 24\ninit = global\ntopology = mixln:0.5\n[train]\ntask = modadd\nmodulus = 7\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(c.model.depth, 24);
        assert_eq!(c.model.init, InitStrategy::global(default_base_std(128)));
        assert_eq!(c.model.topology, NormTopology::MixLn { post_fraction: 0.5 });
        assert_eq!(c.task, Task::ModularAdd { modulus: 7 });
        assert_eq!((c.seed, c.model.seed), (9, 9));
        let scaled = TrainConfig::parse("[model]\ndepth = 48\n").unwrap();
        assert_eq!(scaled.model.init, InitStrategy::scaled(default_base_std(128), 48));
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(TrainConfig::parse("[optim]\nlr = 3\n").is_err());
        assert!(TrainConfig::parse("[train]\ntask = charlm\n").is_err());
        assert!(TrainConfig::parse("[train]\ntask = sorting\n").is_err());
        let mut c = TrainConfig::default();
        c.warmup_steps = c.total_steps + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.min_lr = 2.0 * c.peak_lr;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.task = Task::Copy { prefix: 40 };
        assert!(c.validate().is_err());
    }
}
