use std::fmt;

use crate::error::{Error, Result};
use crate::init::{default_base_std, InitKind, InitStrategy};
use crate::norm::DEFAULT_EPS;

/// Where the layer norms sit inside each block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormTopology {
    PostNorm,
    PreNorm,
    SpanNorm,
    HybridNorm,
    /// PostNorm for the first `ceil(alpha * L)` blocks, PreNorm afterwards.
    MixLn { post_fraction: f64 },
    PeriLn,
    LnScaling,
}

impl NormTopology {
    pub const ALL_DEFAULT: [NormTopology; 7] = [
        NormTopology::PostNorm,
        NormTopology::PreNorm,
        NormTopology::SpanNorm,
        NormTopology::HybridNorm,
        NormTopology::MixLn { post_fraction: 0.25 },
        NormTopology::PeriLn,
        NormTopology::LnScaling,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim().to_string(), Some(a.trim().to_string())),
            None => (s.clone(), None),
        };
        let topo = match head.replace(['-', '_'], "").as_str() {
            "postnorm" | "post" => NormTopology::PostNorm,
            "prenorm" | "pre" => NormTopology::PreNorm,
            "spannorm" | "span" => NormTopology::SpanNorm,
            "hybridnorm" | "hybrid" => NormTopology::HybridNorm,
            "mixln" => {
                let post_fraction = match arg.as_deref() {
                    Some(a) => a
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad Mix-LN fraction `{a}`")))?,
                    None => 0.25,
                };
                NormTopology::MixLn { post_fraction }
            }
            "periln" | "peri" => NormTopology::PeriLn,
            "lnscaling" | "layernormscaling" => NormTopology::LnScaling,
            _ => return Err(Error::config(format!("unknown topology `{s}`"))),
        };
        if arg.is_some() && !matches!(topo, NormTopology::MixLn { .. }) {
            return Err(Error::config(format!("topology `{s}` takes no argument")));
        }
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if let NormTopology::MixLn { post_fraction } = *self {
            if !(0.0..=1.0).contains(&post_fraction) {
                return Err(Error::config(format!(
                    "Mix-LN post fraction must be in [0, 1], got {post_fraction}"
                )));
            }
        }
        Ok(())
    }

    /// Number of leading blocks wired as PostNorm under Mix-LN.
    pub fn mixln_cutoff(post_fraction: f64, depth: usize) -> usize {
        ((post_fraction * depth as f64).ceil() as usize).min(depth)
    }

    /// Concrete wiring of block `layer` (1-based) in a stack of `depth`.
    pub fn wiring(&self, layer: usize, depth: usize) -> Wiring {
        match *self {
            NormTopology::PostNorm => Wiring::Post,
            NormTopology::PreNorm => Wiring::Pre,
            NormTopology::SpanNorm if layer == 1 => Wiring::SpanFirst,
            NormTopology::SpanNorm => Wiring::Span,
            NormTopology::HybridNorm => Wiring::Hybrid,
            NormTopology::MixLn { post_fraction } => {
                if layer <= Self::mixln_cutoff(post_fraction, depth) {
                    Wiring::Post
                } else {
                    Wiring::Pre
                }
            }
            NormTopology::PeriLn => Wiring::Peri,
            NormTopology::LnScaling => Wiring::LnScaled {
                scale: 1.0 / (layer as f64).sqrt(),
            },
        }
    }

    /// Whether the stack ends in an un-normalized residual stream, in which
    /// case the model applies one final norm before the output head.
    pub fn needs_final_norm(&self, depth: usize) -> bool {
        !matches!(
            self.wiring(depth, depth),
            Wiring::Post | Wiring::Span | Wiring::SpanFirst
        )
    }

    pub fn is_spannorm(&self) -> bool {
        matches!(self, NormTopology::SpanNorm)
    }
}

impl fmt::Display for NormTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormTopology::PostNorm => f.write_str("postnorm"),
            NormTopology::PreNorm => f.write_str("prenorm"),
            NormTopology::SpanNorm => f.write_str("spannorm"),
            NormTopology::HybridNorm => f.write_str("hybridnorm"),
            NormTopology::MixLn { post_fraction } => write!(f, "mixln:{post_fraction}"),
            NormTopology::PeriLn => f.write_str("periln"),
            NormTopology::LnScaling => f.write_str("lnscaling"),
        }
    }
}

/// Per-block wiring resolved from a [`NormTopology`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Wiring {
    /// `Y = LN(MHA(X) + X)`, `X' = LN(FFN(Y) + Y)`
    Post,
    /// `Y = MHA(LN(X)) + X`, `X' = FFN(LN(Y)) + Y`
    Pre,
    /// `Y = LN(MHA(X) + X)`, `X' = LN(FFN(Y) + X)`
    Span,
    /// First SpanNorm block: the MHA input is normalized, the residual is not.
    SpanFirst,
    /// Per-head QKV norm, PostNorm after attention, PreNorm FFN.
    Hybrid,
    /// `h = X + LN(MHA(LN(X)))`, `X' = h + LN(FFN(LN(h)))`
    Peri,
    /// PreNorm with every sub-layer input norm multiplied by `scale`.
    LnScaled { scale: f64 },
}

impl Wiring {
    pub fn name(&self) -> &'static str {
        match self {
            Wiring::Post => "post",
            Wiring::Pre => "pre",
            Wiring::Span => "span",
            Wiring::SpanFirst => "span-first",
            Wiring::Hybrid => "hybrid",
            Wiring::Peri => "peri",
            Wiring::LnScaled { .. } => "ln-scaled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub topology: NormTopology,
    pub init: InitStrategy,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub activation: Activation,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            d_model: 128,
            n_heads: 4,
            d_ff: 384,
            topology: NormTopology::SpanNorm,
            init: InitStrategy::scaled(default_base_std(128), 12),
            vocab: 128,
            seq_len: 64,
            seed: 0,
            activation: Activation::Gelu,
            eps: DEFAULT_EPS,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny(topology: NormTopology) -> Self {
        Self {
            depth: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            topology,
            init: InitStrategy::scaled(0.3, 2),
            vocab: 11,
            seq_len: 4,
            seed: 0,
            activation: Activation::Gelu,
            eps: DEFAULT_EPS,
        }
    }

    /// Same configuration at another depth; a depth-scaled init follows.
    pub fn with_depth(&self, depth: usize) -> Self {
        let mut c = self.clone();
        c.depth = depth;
        if c.init.kind == InitKind::Scaled {
            c.init.depth = depth;
        }
        c
    }

    /// Same configuration with `kind` initialization at the current depth.
    pub fn with_init(&self, kind: InitKind, base_std: f64) -> Self {
        let mut c = self.clone();
        c.init = match kind {
            InitKind::Global => InitStrategy::global(base_std),
            InitKind::Scaled => InitStrategy::scaled(base_std, self.depth),
        };
        c
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide width {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::config(format!(
                "FFN width {} must be at least the model width {}",
                self.d_ff, self.d_model
            )));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::config("vocab and sequence length must be positive"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config("eps must be non-negative"));
        }
        self.topology.validate()?;
        self.init.validate()
    }
}
