//! Gaussian weight initialization, including depth-scaled output matrices.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Every matrix uses the base standard deviation.
    Global,
    /// Output projections (attention `W_O`, FFN down-projection `W_2`) use
    /// `base_std / sqrt(depth)`.
    Scaled,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Global => "global",
            InitKind::Scaled => "scaled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(InitKind::Global),
            "scaled" | "scale" => Ok(InitKind::Scaled),
            other => Err(Error::config(format!("unknown init kind `{other}`"))),
        }
    }
}

/// `1/√d`: keeps the variance of a linear map's output equal to that of a
/// unit-variance input of width `d`.
pub fn default_base_std(d_model: usize) -> f64 {
    1.0 / (d_model as f64).sqrt()
}

/// Which matrices a strategy scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitRole {
    Standard,
    ScaledOutput,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub base_std: f64,
    pub depth: usize,
}

impl InitStrategy {
    pub fn global(base_std: f64) -> Self {
        Self {
            kind: InitKind::Global,
            base_std,
            depth: 1,
        }
    }

    pub fn scaled(base_std: f64, depth: usize) -> Self {
        Self {
            kind: InitKind::Scaled,
            base_std,
            depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_std > 0.0 && self.base_std.is_finite()) {
            return Err(Error::config(format!(
                "init base std must be positive, got {}",
                self.base_std
            )));
        }
        if self.kind == InitKind::Scaled && self.depth == 0 {
            return Err(Error::config("scaled init needs depth >= 1"));
        }
        Ok(())
    }

    /// Target standard deviation for a matrix with the given role.
    pub fn std_for(&self, role: InitRole) -> f64 {
        match (self.kind, role) {
            (InitKind::Scaled, InitRole::ScaledOutput) => {
                self.base_std / (self.depth as f64).sqrt()
            }
            _ => self.base_std,
        }
    }
}

/// Draws an i.i.d. zero-mean Gaussian matrix with the strategy's std for `role`.
pub fn init_matrix(
    shape: &[usize],
    strategy: &InitStrategy,
    role: InitRole,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    strategy.validate()?;
    Ok(rng.gaussian_tensor(shape, strategy.std_for(role)))
}
