//! Analytic multiply-accumulate (MAC) accounting. One MAC is two FLOPs.
//!
//! Costs are charged from the token counts recorded in a [`ForwardTrace`]:
//! for a block with `t_in` tokens entering and `t_out` leaving,
//!
//! ```text
//! attn = 3 t_in d^2        qkv projection (all input tokens)
//!      + t_in^2 d          q k^T, every row (scores precede sampling)
//!      + t_out t_in d      A_s V over the full value set
//!      + t_out d^2         output projection
//! mlp  = 2 r t_out d^2     two linear layers, hidden width r d
//! ```
//!
//! Softmax, layer norm, GELU and residual additions are not MACs; their
//! elementwise work is reported separately in `elementwise_ops`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ForwardTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMacs {
    pub attn_macs: u64,
    pub mlp_macs: u64,
    pub tokens_in: usize,
    pub tokens_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_stage: Vec<StageMacs>,
    pub embed_macs: u64,
    pub head_macs: u64,
    /// `embed + sum(per_stage) + head`.
    pub total_macs: u64,
    /// Rough count of non-MAC elementwise operations; excluded from the total.
    pub elementwise_ops: u64,
}

impl FlopsReport {
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn csv_header() -> &'static str {
        "schema,embed_macs,blocks_macs,head_macs,total_macs,elementwise_ops,tokens"
    }

    /// One CSV row matching [`FlopsReport::csv_header`]; `tokens` lists the
    /// tokens entering each block and leaving the last, joined by `;`.
    pub fn csv_row(&self) -> String {
        let blocks: u64 = self.per_stage.iter().map(|s| s.attn_macs + s.mlp_macs).sum();
        let mut tokens: Vec<String> = self.per_stage.iter().map(|s| s.tokens_in.to_string()).collect();
        if let Some(last) = self.per_stage.last() {
            tokens.push(last.tokens_out.to_string());
        }
        format!(
            "1,{},{},{},{},{},{}",
            self.embed_macs,
            blocks,
            self.head_macs,
            self.total_macs,
            self.elementwise_ops,
            tokens.join(";")
        )
    }
}

/// `(attn_macs, mlp_macs)` for one block.
pub fn block_macs(
    t_in: usize,
    t_out: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
) -> Result<(u64, u64)> {
    if t_out == 0 || t_out > t_in {
        return Err(Error::Contract(format!(
            "block token counts must satisfy 1 <= t_out <= t_in, got t_in={t_in}, t_out={t_out}"
        )));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
    }
    let (ti, to, d, r) = (t_in as u64, t_out as u64, dim as u64, mlp_ratio as u64);
    // per-head terms sum to the same totals: h * (t * t * d/h) = t * t * d
    let attn = 3 * ti * d * d + ti * ti * d + to * ti * d + to * d * d;
    let mlp = 2 * r * to * d * d;
    Ok((attn, mlp))
}

fn elementwise(t_in: u64, t_out: u64, d: u64, h: u64, r: u64) -> u64 {
    // two layer norms, softmax over h t_in x t_in, GELU, two residual adds
    5 * t_in * d + 3 * h * t_in * t_in + 5 * t_out * d + r * t_out * d + 2 * t_out * d
}

/// Sums block costs over a traced forward pass plus embedding and head.
pub fn model_macs(trace: &ForwardTrace, arch: &ArchConfig) -> Result<FlopsReport> {
    if trace.stages.len() != arch.depth {
        return Err(Error::Contract(format!(
            "trace has {} stages, model has depth {}",
            trace.stages.len(),
            arch.depth
        )));
    }
    let mut expected_in = arch.num_tokens();
    let (d, h, r) = (arch.dim as u64, arch.heads as u64, arch.mlp_ratio as u64);
    let mut per_stage = Vec::with_capacity(trace.stages.len());
    let mut elementwise_ops = 0;
    for s in &trace.stages {
        if s.tokens_in != expected_in {
            return Err(Error::Contract(format!(
                "block {} receives {} tokens but the previous block emitted {expected_in}",
                s.block, s.tokens_in
            )));
        }
        let (attn, mlp) = block_macs(s.tokens_in, s.tokens_out, arch.dim, arch.heads, arch.mlp_ratio)?;
        elementwise_ops += elementwise(s.tokens_in as u64, s.tokens_out as u64, d, h, r);
        per_stage.push(StageMacs {
            attn_macs: attn,
            mlp_macs: mlp,
            tokens_in: s.tokens_in,
            tokens_out: s.tokens_out,
        });
        expected_in = s.tokens_out;
    }
    let embed_macs = (arch.num_patches() * arch.patch_dim() * arch.dim) as u64;
    let head_macs = (arch.dim * arch.num_classes) as u64;
    let blocks: u64 = per_stage.iter().map(|s| s.attn_macs + s.mlp_macs).sum();
    Ok(FlopsReport {
        per_stage,
        embed_macs,
        head_macs,
        total_macs: embed_macs + blocks + head_macs,
        elementwise_ops,
    })
}

/// Cost of the architecture with every token kept.
pub fn dense_macs(arch: &ArchConfig) -> Result<FlopsReport> {
    let t = arch.num_tokens();
    let trace = ForwardTrace {
        stages: (0..arch.depth)
            .map(|b| crate::model::StageTrace {
                block: b,
                tokens_in: t,
                tokens_out: t,
                sample: None,
                token_ids: (0..t).collect(),
            })
            .collect(),
        logits: Vec::new(),
    };
    model_macs(&trace, arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageTrace;

    #[test]
    fn dense_block_identity() {
        for (t, d) in [(1usize, 1usize), (17, 64), (197, 384)] {
            let (attn, _) = block_macs(t, t, d, 1, 4).unwrap();
            let (t, d) = (t as u64, d as u64);
            assert_eq!(attn, 4 * t * d * d + 2 * t * t * d);
        }
    }

    #[test]
    fn single_row_kept() {
        let (attn, mlp) = block_macs(10, 1, 4, 2, 4).unwrap();
        // 3*10*16 + 100*4 + 1*10*4 + 16
        assert_eq!(attn, 480 + 400 + 40 + 16);
        assert_eq!(mlp, 2 * 4 * 16);
    }

    #[test]
    fn hand_substitution() {
        assert_eq!(block_macs(2, 2, 1, 1, 4).unwrap(), (16, 16));
    }

    #[test]
    fn rejects_growth() {
        assert!(block_macs(3, 4, 8, 2, 4).is_err());
        assert!(block_macs(3, 0, 8, 2, 4).is_err());
    }

    fn trace(counts: &[usize]) -> ForwardTrace {
        ForwardTrace {
            stages: counts
                .windows(2)
                .enumerate()
                .map(|(b, w)| StageTrace {
                    block: b,
                    tokens_in: w[0],
                    tokens_out: w[1],
                    sample: None,
                    token_ids: (0..w[1]).collect(),
                })
                .collect(),
            logits: vec![],
        }
    }

    #[test]
    fn dense_report_is_depth_times_block() {
        let arch = ArchConfig::toy();
        let r = dense_macs(&arch).unwrap();
        let (a, m) = block_macs(17, 17, 64, 4, 4).unwrap();
        assert_eq!(r.embed_macs, 16 * 64 * 64);
        assert_eq!(r.head_macs, 64 * 4);
        assert_eq!(r.total_macs, 6 * (a + m) + r.embed_macs + r.head_macs);
        let sum: u64 = r.per_stage.iter().map(|s| s.attn_macs + s.mlp_macs).sum();
        assert_eq!(r.total_macs, r.embed_macs + sum + r.head_macs);
    }

    #[test]
    fn shrinking_trace_costs_less() {
        let arch = ArchConfig::toy();
        let dense = dense_macs(&arch).unwrap().total_macs;
        let sparse = model_macs(&trace(&[17, 17, 17, 12, 9, 7, 7]), &arch).unwrap();
        assert!(sparse.total_macs < dense);
    }

    #[test]
    fn inconsistent_trace_rejected() {
        let arch = ArchConfig::toy();
        assert!(model_macs(&trace(&[17, 17, 17]), &arch).is_err());
        assert!(model_macs(&trace(&[17, 17, 12, 13, 9, 7, 7]), &arch).is_err());
        let mut t = trace(&[17, 17, 17, 12, 9, 7, 7]);
        t.stages[3].tokens_in = 11;
        assert!(model_macs(&t, &arch).is_err());
    }

    #[test]
    fn attention_core_is_quadratic() {
        let core = |t: usize| {
            let (attn, _) = block_macs(t, t, 64, 4, 4).unwrap();
            attn - 4 * (t as u64) * 64 * 64
        };
        for t in [2, 17, 100] {
            assert!(core(2 * t) > 3 * core(t));
        }
    }

    #[test]
    fn csv_row_fields() {
        let arch = ArchConfig::toy();
        let r = dense_macs(&arch).unwrap();
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), FlopsReport::csv_header().split(',').count());
        assert!(row.ends_with("17;17;17;17;17;17;17"));
    }
}
