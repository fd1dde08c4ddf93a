//! Per-layer activation dump read by the similarity analysis.
//!
//! ```text
//! magic "SPNACTS\0" | u32 version | u32 layers | u64 rows | u64 cols
//! f64 data, layer-major, each layer rows × cols row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::wire::{Reader, Writer};

pub const DUMP_MAGIC: &[u8; 8] = b"SPNACTS\0";
pub const DUMP_VERSION: u32 = 1;

/// Equal-shape activations, one tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layers: Vec<Tensor>,
}

impl ActivationDump {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Input("activation dump needs at least one layer".into()))?;
        first.dims2("activation dump")?;
        if let Some(t) = layers.iter().find(|t| !t.same_shape(first)) {
            return Err(Error::Dimension {
                op: "activation dump",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        Ok(Self { layers })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let shape = self.layers[0].shape();
        w.bytes(DUMP_MAGIC);
        w.u32(DUMP_VERSION);
        w.u32(self.layers.len() as u32);
        w.u64(shape[0] as u64);
        w.u64(shape[1] as u64);
        for t in &self.layers {
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("activation dump", bytes);
        r.expect_magic(DUMP_MAGIC)?;
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let layers = r.u32()? as usize;
        let (rows, cols) = (r.u64()?, r.u64()?);
        let per_layer = usize::try_from(rows)
            .ok()
            .zip(usize::try_from(cols).ok())
            .and_then(|(a, b)| a.checked_mul(b));
        let total = per_layer.and_then(|n| n.checked_mul(layers));
        match total {
            Some(n) if layers > 0 && n > 0 && n.checked_mul(8) == Some(r.remaining()) => {}
            _ => {
                return Err(r.err(format!(
                    "{layers} layers of {rows}x{cols} do not match {} data bytes",
                    r.remaining()
                )))
            }
        }
        let (rows, cols) = (rows as usize, cols as usize);
        let tensors = (0..layers)
            .map(|_| Tensor::from_vec(&[rows, cols], r.f64s(rows * cols)?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { layers: tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
