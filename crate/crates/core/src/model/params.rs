use crate::error::{Error, Result};
use crate::init::{init_matrix, InitRole, InitStrategy};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::config::{ModelConfig, NormTopology, Wiring};

/// Parameter categories; the optimizer exempts everything but `Matrix`
/// from weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Norm,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Tensor::zeros(self.gain.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Weights of one block. `w_1` is the up-projection (`d × f`), `w_2` the
/// down-projection (`f × d`); activations are row vectors, so a token `x`
/// maps to `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
    pub ln1: NormParams,
    pub ln2: NormParams,
    /// SpanNorm first block: norm on the embedding before attention.
    pub ln_embed: Option<NormParams>,
    /// Peri-LN output norms for the attention and FFN sub-layers.
    pub ln1_out: Option<NormParams>,
    pub ln2_out: Option<NormParams>,
    /// HybridNorm per-head norms on Q, K and V (width = head dim).
    pub qkv_norm: Option<[NormParams; 3]>,
}

impl BlockParams {
    pub fn init(config: &ModelConfig, wiring: Wiring, rng: &mut SeededRng) -> Result<Self> {
        let s = &config.init;
        Self::build(config, wiring, |shape, role| init_matrix(shape, s, role, rng))
    }

    /// Zero matrices and identity norms, without drawing random numbers.
    pub fn zeros(config: &ModelConfig, wiring: Wiring) -> Result<Self> {
        Self::build(config, wiring, |shape, _| Ok(Tensor::zeros(shape)))
    }

    fn build(
        config: &ModelConfig,
        wiring: Wiring,
        mut mat: impl FnMut(&[usize], InitRole) -> Result<Tensor>,
    ) -> Result<Self> {
        let (d, f) = (config.d_model, config.d_ff);
        let w_q = mat(&[d, d], InitRole::Standard)?;
        let w_k = mat(&[d, d], InitRole::Standard)?;
        let w_v = mat(&[d, d], InitRole::Standard)?;
        let w_o = mat(&[d, d], InitRole::ScaledOutput)?;
        let w_1 = mat(&[d, f], InitRole::Standard)?;
        let w_2 = mat(&[f, d], InitRole::ScaledOutput)?;
        let peri = wiring == Wiring::Peri;
        let dh = config.head_dim();
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            w_1,
            w_2,
            ln1: NormParams::identity(d),
            ln2: NormParams::identity(d),
            ln_embed: (wiring == Wiring::SpanFirst).then(|| NormParams::identity(d)),
            ln1_out: peri.then(|| NormParams::identity(d)),
            ln2_out: peri.then(|| NormParams::identity(d)),
            qkv_norm: (wiring == Wiring::Hybrid).then(|| {
                [
                    NormParams::identity(dh),
                    NormParams::identity(dh),
                    NormParams::identity(dh),
                ]
            }),
        })
    }

    /// Names, kinds and shapes in [`BlockParams::visit`] order.
    fn layout(config: &ModelConfig, wiring: Wiring, prefix: &str, out: &mut Vec<(String, ParamKind, Vec<usize>)>) {
        let (d, f, dh) = (config.d_model, config.d_ff, config.head_dim());
        let mut push = |name: &str, kind, shape: Vec<usize>| out.push((format!("{prefix}.{name}"), kind, shape));
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            push(name, ParamKind::Matrix, vec![d, d]);
        }
        push("w_1", ParamKind::Matrix, vec![d, f]);
        push("w_2", ParamKind::Matrix, vec![f, d]);
        let mut norms = vec![("ln1", d), ("ln2", d)];
        if wiring == Wiring::SpanFirst {
            norms.push(("ln_embed", d));
        }
        if wiring == Wiring::Peri {
            norms.extend([("ln1_out", d), ("ln2_out", d)]);
        }
        if wiring == Wiring::Hybrid {
            norms.extend([("q_norm", dh), ("k_norm", dh), ("v_norm", dh)]);
        }
        for (name, width) in norms {
            push(&format!("{name}.gain"), ParamKind::Norm, vec![width]);
            push(&format!("{name}.bias"), ParamKind::Norm, vec![width]);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_o: z(&self.w_o),
            w_1: z(&self.w_1),
            w_2: z(&self.w_2),
            ln1: self.ln1.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ln_embed: self.ln_embed.as_ref().map(NormParams::zeros_like),
            ln1_out: self.ln1_out.as_ref().map(NormParams::zeros_like),
            ln2_out: self.ln2_out.as_ref().map(NormParams::zeros_like),
            qkv_norm: self
                .qkv_norm
                .as_ref()
                .map(|q| [q[0].zeros_like(), q[1].zeros_like(), q[2].zeros_like()]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamKind, &'a Tensor)>) {
        let mut push = |name: &str, kind, t: &'a Tensor| out.push((format!("{prefix}.{name}"), kind, t));
        push("w_q", ParamKind::Matrix, &self.w_q);
        push("w_k", ParamKind::Matrix, &self.w_k);
        push("w_v", ParamKind::Matrix, &self.w_v);
        push("w_o", ParamKind::Matrix, &self.w_o);
        push("w_1", ParamKind::Matrix, &self.w_1);
        push("w_2", ParamKind::Matrix, &self.w_2);
        let mut norm = |name: &str, n: &'a NormParams| {
            push(&format!("{name}.gain"), ParamKind::Norm, &n.gain);
            push(&format!("{name}.bias"), ParamKind::Norm, &n.bias);
        };
        norm("ln1", &self.ln1);
        norm("ln2", &self.ln2);
        if let Some(n) = &self.ln_embed {
            norm("ln_embed", n);
        }
        if let Some(n) = &self.ln1_out {
            norm("ln1_out", n);
        }
        if let Some(n) = &self.ln2_out {
            norm("ln2_out", n);
        }
        if let Some([q, k, v]) = &self.qkv_norm {
            norm("q_norm", q);
            norm("k_norm", k);
            norm("v_norm", v);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.w_2,
        ]);
        let mut norm = |n: &'a mut NormParams| {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        };
        norm(&mut self.ln1);
        norm(&mut self.ln2);
        if let Some(n) = &mut self.ln_embed {
            norm(n);
        }
        if let Some(n) = &mut self.ln1_out {
            norm(n);
        }
        if let Some(n) = &mut self.ln2_out {
            norm(n);
        }
        if let Some([q, k, v]) = &mut self.qkv_norm {
            norm(q);
            norm(k);
            norm(v);
        }
    }
}

/// Every parameter of a model. The same type doubles as the gradient
/// container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `vocab × d`; also the (tied) output head.
    pub tok_emb: Tensor,
    /// `seq_len × d` learned absolute positions.
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Option<NormParams>,
}

impl ModelParams {
    /// Initializes all weights from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed, 0);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        // Embeddings double as the output head: std 1/√d gives unit-scale
        // logits from a normalized head input, independent of the block init.
        let emb = InitStrategy::global(1.0 / (d as f64).sqrt());
        let tok_emb = init_matrix(&[config.vocab, d], &emb, InitRole::Standard, rng)?;
        let pos_emb = init_matrix(&[config.seq_len, d], &emb, InitRole::Standard, rng)?;
        let blocks = (1..=config.depth)
            .map(|l| BlockParams::init(config, config.topology.wiring(l, config.depth), rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = config
            .topology
            .needs_final_norm(config.depth)
            .then(|| NormParams::identity(d));
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
        })
    }

    /// Zero weights with identity norms, in `config`'s layout.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            tok_emb: Tensor::zeros(&[config.vocab, d]),
            pos_emb: Tensor::zeros(&[config.seq_len, d]),
            blocks: (1..=config.depth)
                .map(|l| BlockParams::zeros(config, config.topology.wiring(l, config.depth)))
                .collect::<Result<Vec<_>>>()?,
            final_norm: config
                .topology
                .needs_final_norm(config.depth)
                .then(|| NormParams::identity(d)),
        })
    }

    /// Names, kinds and shapes of every tensor `config` implies, in
    /// [`ModelParams::named`] order, without allocating the tensors.
    pub fn layout(config: &ModelConfig) -> Result<Vec<(String, ParamKind, Vec<usize>)>> {
        config.validate()?;
        let d = config.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), ParamKind::Embedding, vec![config.vocab, d]),
            ("pos_emb".to_string(), ParamKind::Embedding, vec![config.seq_len, d]),
        ];
        for l in 1..=config.depth {
            BlockParams::layout(config, config.topology.wiring(l, config.depth), &format!("blocks.{l}"), &mut out);
        }
        if config.topology.needs_final_norm(config.depth) {
            out.push(("final_norm.gain".into(), ParamKind::Norm, vec![d]));
            out.push(("final_norm.bias".into(), ParamKind::Norm, vec![d]));
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Tensor::zeros(self.tok_emb.shape()),
            pos_emb: Tensor::zeros(self.pos_emb.shape()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_norm: self.final_norm.as_ref().map(NormParams::zeros_like),
        }
    }

    /// Named view of every tensor in a fixed order.
    pub fn named(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), ParamKind::Embedding, &self.tok_emb),
            ("pos_emb".to_string(), ParamKind::Embedding, &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{}", i + 1), &mut out);
        }
        if let Some(n) = &self.final_norm {
            out.push(("final_norm.gain".into(), ParamKind::Norm, &n.gain));
            out.push(("final_norm.bias".into(), ParamKind::Norm, &n.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            b.visit_mut(&mut out);
        }
        if let Some(n) = &mut self.final_norm {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, _, t)| t.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.scale_in_place(c);
        }
    }

    /// Checks that `self` has the parameter layout `config` would produce.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::layout(config)?;
        let actual = self.named();
        if actual.len() != expected.len()
            || actual
                .iter()
                .zip(&expected)
                .any(|(x, y)| x.0 != y.0 || x.1 != y.1 || x.2.shape() != y.2.as_slice())
        {
            return Err(Error::contract("parameter layout does not match the model config"));
        }
        Ok(())
    }

    /// Topology the block list was built for; used in assertions.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Wiring of every block in a config, for inspection.
pub fn wiring_plan(topology: NormTopology, depth: usize) -> Vec<Wiring> {
    (1..=depth).map(|l| topology.wiring(l, depth)).collect()
}
