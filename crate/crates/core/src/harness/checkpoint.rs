//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SPNCKPT\0" | u32 version
//! u64 config length | config text (UTF-8, `[section] key = value`)
//! u64 step
//! u64 rng seed | u64 rng stream | u128 rng word position
//! u8 has optimizer | u64 optimizer step
//! u32 tensor count | per tensor: u32 name length, name, u8 kind, u32 ndim, u64 dims…
//! f64 parameters in manifest order
//! f64 first moments, f64 second moments (only with an optimizer)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::optim::OptimizerState;
use super::train_config::TrainConfig;
use super::wire::{Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Smallest manifest entry: name length, one name byte, kind, ndim.
const MIN_ENTRY_BYTES: usize = 4 + 1 + 1 + 4;
/// Every block contributes at least this many tensors.
const MIN_TENSORS_PER_BLOCK: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    /// Position of the data stream, so a resumed run sees the same batches.
    pub data_rng: RngState,
    pub step: u64,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Matrix => 0,
        ParamKind::Norm => 1,
        ParamKind::Embedding => 2,
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let text = self.config.to_doc().to_string();
        w.u64(text.len() as u64);
        w.bytes(text.as_bytes());
        w.u64(self.step);
        w.u64(self.data_rng.seed);
        w.u64(self.data_rng.stream);
        w.u128(self.data_rng.word_pos);
        w.u8(self.optimizer.is_some() as u8);
        w.u64(self.optimizer.as_ref().map_or(0, |o| o.step));
        let named = self.params.named();
        w.u32(named.len() as u32);
        for (name, kind, t) in &named {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u8(kind_code(*kind));
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
        }
        for (_, _, t) in &named {
            w.f64s(t.data());
        }
        if let Some(o) = &self.optimizer {
            for t in o.m.iter().chain(&o.v) {
                w.f64s(t.data());
            }
        }
        w.buf
    }

    /// Decodes and validates a checkpoint. Every length is checked against
    /// the remaining input, and the manifest against the layout the stored
    /// config implies, before any tensor is allocated.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let text_len = r.len(1)?;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::format("checkpoint", "config text is not UTF-8"))?;
        let config = TrainConfig::parse(text).map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
        let step = r.u64()?;
        let data_rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let has_opt = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(r.err(format!("optimizer flag {v}"))),
        };
        let opt_step = r.u64()?;

        let count = r.u32()? as u64;
        let count = r.check_len(count, MIN_ENTRY_BYTES)?;
        if config.model.depth > count / MIN_TENSORS_PER_BLOCK {
            return Err(r.err(format!("{count} tensors cannot hold {} blocks", config.model.depth)));
        }
        let layout = ModelParams::layout(&config.model)?;
        if layout.len() != count {
            return Err(r.err(format!("manifest lists {count} tensors, config implies {}", layout.len())));
        }
        let mut total: usize = 0;
        for (name, kind, shape) in &layout {
            let name_len = r.u32()? as u64;
            let name_len = r.check_len(name_len, 1)?;
            let got = r.take(name_len)?;
            if got != name.as_bytes() {
                return Err(r.err(format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(got))));
            }
            if r.u8()? != kind_code(*kind) {
                return Err(r.err(format!("wrong kind for `{name}`")));
            }
            let ndim = r.u32()? as u64;
            let ndim = r.check_len(ndim, 8)?;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
            if dims.len() != shape.len() || dims.iter().zip(shape).any(|(&a, &b)| a != b as u64) {
                return Err(r.err(format!("`{name}` has shape {dims:?}, expected {shape:?}")));
            }
            total = shape
                .iter()
                .try_fold(1usize, |p, &d| p.checked_mul(d))
                .and_then(|n| total.checked_add(n))
                .ok_or_else(|| r.err("tensor sizes overflow"))?;
        }
        let copies = if has_opt { 3 } else { 1 };
        let expected = total.checked_mul(copies).and_then(|n| n.checked_mul(8));
        if expected != Some(r.remaining()) {
            return Err(r.err(format!(
                "{} data bytes, manifest needs {} values",
                r.remaining(),
                total.saturating_mul(copies)
            )));
        }

        let mut params = ModelParams::zeros(&config.model)?;
        for t in params.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&r.f64s(n)?);
        }
        let optimizer = if has_opt {
            let read_all = |r: &mut Reader| -> Result<Vec<Tensor>> {
                layout
                    .iter()
                    .map(|(_, _, shape)| {
                        let n = shape.iter().product();
                        Tensor::from_vec(shape, r.f64s(n)?)
                    })
                    .collect()
            };
            let m = read_all(&mut r)?;
            let v = read_all(&mut r)?;
            Some(OptimizerState { m, v, step: opt_step })
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            config,
            params,
            optimizer,
            data_rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_forward, NormTopology};
    use crate::rng::SeededRng;

    fn sample(topology: NormTopology, with_opt: bool) -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model = crate::model::ModelConfig::tiny(topology);
        config.model.vocab = 16;
        config.model.seq_len = 8;
        config.task = super::super::Task::Copy { prefix: 4 };
        config.batch_tokens = 16;
        config.warmup_steps = 2;
        config.total_steps = 4;
        let params = ModelParams::init(&config.model).unwrap();
        let optimizer = with_opt.then(|| {
            let mut o = OptimizerState::new(&params);
            let mut rng = SeededRng::new(5, 1);
            for t in o.m.iter_mut().chain(o.v.iter_mut()) {
                *t = rng.gaussian_tensor(t.shape(), 1.0);
            }
            o.step = 3;
            o
        });
        Checkpoint {
            config,
            params,
            optimizer,
            data_rng: SeededRng::new(7, 9).state(),
            step: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for topo in NormTopology::ALL_DEFAULT {
            for opt in [false, true] {
                let c = sample(topo, opt);
                let bytes = c.encode();
                let back = Checkpoint::decode(&bytes).unwrap();
                assert_eq!(back, c);
                assert_eq!(back.encode(), bytes);
                let tokens = [1, 2, 3, 4, 5, 6, 7, 8];
                let a = model_forward(&c.config.model, &c.params, &tokens, 8).unwrap();
                let b = model_forward(&back.config.model, &back.params, &tokens, 8).unwrap();
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.logits), bits(&b.logits));
            }
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample(NormTopology::SpanNorm, true).encode();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn corrupted_headers_are_rejected() {
        let bytes = sample(NormTopology::PreNorm, false).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(Checkpoint::decode(&bad).is_err());
        // a config length far beyond the input
        let mut bad = bytes.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn manifest_must_match_the_config() {
        let mut c = sample(NormTopology::PreNorm, false);
        let bytes = c.encode();
        // Rewrite the config to a deeper model: the manifest no longer fits.
        c.config.model = c.config.model.with_depth(3);
        let deeper = c.config.to_doc().to_string();
        let old_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut bad = bytes[..12].to_vec();
        bad.extend_from_slice(&(deeper.len() as u64).to_le_bytes());
        bad.extend_from_slice(deeper.as_bytes());
        bad.extend_from_slice(&bytes[20 + old_len..]);
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { .. })));
    }
}
