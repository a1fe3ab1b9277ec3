//! Multi-head self-attention that keeps its per-head intermediates
//! (queries, keys, values, attention matrices) addressable on the tape so the
//! sampler can read them.
//!
//! Head layout: the fused projection produces `[q | k | v]`, each `dim` wide,
//! and head `h` owns columns `h * head_dim .. (h + 1) * head_dim` of each
//! third. Heads are concatenated back in the same order before the output
//! projection.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        let cfg = Self { dim, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention weights as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `dim x 3*dim`
    pub qkv_weight: Var,
    /// `3*dim`
    pub qkv_bias: Var,
    /// `dim x dim`
    pub proj_weight: Var,
    /// `dim`
    pub proj_bias: Var,
}

/// Per-head intermediates of one attention layer.
#[derive(Clone, Debug, Default)]
pub struct AttentionState {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    /// Row-stochastic `T x T` matrices; empty until [`attention_matrix`].
    pub attn: Vec<Var>,
    pub tokens: usize,
}

impl AttentionState {
    pub fn attn_values<'a, T: Real>(&self, tape: &'a Tape<T>) -> Vec<&'a Tensor<T>> {
        self.attn.iter().map(|&a| tape.value(a)).collect()
    }

    pub fn value_rows<'a, T: Real>(&self, tape: &'a Tape<T>) -> Vec<&'a Tensor<T>> {
        self.v.iter().map(|&v| tape.value(v)).collect()
    }
}

/// Fused QKV projection followed by the per-head split.
pub fn project_qkv<T: Real>(
    tape: &mut Tape<T>,
    cfg: &AttentionConfig,
    tokens: Var,
    params: &AttentionParams,
) -> Result<AttentionState> {
    let d = cfg.dim;
    let x = tape.value(tokens);
    if x.cols() != d {
        return dim_err("project_qkv", format!("tokens are {} wide, dim is {d}", x.cols()));
    }
    let w = tape.value(params.qkv_weight);
    if w.shape() != [d, 3 * d] || tape.value(params.qkv_bias).numel() != 3 * d {
        return dim_err(
            "project_qkv",
            format!("qkv weight {:?}, expected [{d}, {}]", w.shape(), 3 * d),
        );
    }
    let t = x.rows();
    let fused = tape.matmul(tokens, params.qkv_weight)?;
    let fused = tape.add_row(fused, params.qkv_bias)?;
    let hd = cfg.head_dim();
    let mut state = AttentionState {
        tokens: t,
        ..Default::default()
    };
    for h in 0..cfg.heads {
        state.q.push(tape.slice_cols(fused, h * hd, hd)?);
        state.k.push(tape.slice_cols(fused, d + h * hd, hd)?);
        state.v.push(tape.slice_cols(fused, 2 * d + h * hd, hd)?);
    }
    Ok(state)
}

/// `attn[h] = softmax(q[h] k[h]^T / sqrt(scale_dim))`.
pub fn attention_matrix<T: Real>(
    tape: &mut Tape<T>,
    state: &mut AttentionState,
    scale_dim: usize,
) -> Result<()> {
    if scale_dim == 0 {
        return Err(Error::Config("scale_dim must be positive".into()));
    }
    let scale = T::one() / T::from_usize(scale_dim).sqrt();
    state.attn.clear();
    for (&q, &k) in state.q.iter().zip(&state.k) {
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, scale)?;
        state.attn.push(tape.softmax_rows(logits)?);
    }
    Ok(())
}

/// Concatenates per-head outputs and applies the output projection.
pub(crate) fn merge_heads<T: Real>(
    tape: &mut Tape<T>,
    heads: &[Var],
    params: &AttentionParams,
) -> Result<Var> {
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(heads)?
    };
    let out = tape.matmul(merged, params.proj_weight)?;
    tape.add_row(out, params.proj_bias)
}

/// Vanilla attention output `O = A V`, heads merged and projected.
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    state: &AttentionState,
    params: &AttentionParams,
) -> Result<Var> {
    if state.attn.len() != state.v.len() || state.attn.is_empty() {
        return Err(Error::Contract(
            "attend needs attention matrices for every head".into(),
        ));
    }
    let mut heads = Vec::with_capacity(state.v.len());
    for (&a, &v) in state.attn.iter().zip(&state.v) {
        heads.push(tape.matmul(a, v)?);
    }
    merge_heads(tape, &heads, params)
}

/// Freshly initialised attention weights, useful for tests and tooling.
pub struct AttentionWeights<T> {
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn random(cfg: &AttentionConfig, rng: &mut crate::numerics::Rng, std: f64) -> Self {
        let d = cfg.dim;
        Self {
            qkv_weight: rng.normal_tensor(&[d, 3 * d], std),
            qkv_bias: rng.normal_tensor(&[3 * d], std),
            proj_weight: rng.normal_tensor(&[d, d], std),
            proj_bias: rng.normal_tensor(&[d], std),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> AttentionParams {
        AttentionParams {
            qkv_weight: tape.leaf(self.qkv_weight.clone()),
            qkv_bias: tape.leaf(self.qkv_bias.clone()),
            proj_weight: tape.leaf(self.proj_weight.clone()),
            proj_bias: tape.leaf(self.proj_bias.clone()),
        }
    }
}
