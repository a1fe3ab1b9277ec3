//! Adaptive token sampling.
//!
//! A sampling stage takes the attention state of a block and
//!
//! 1. scores every non-classification token by how much the classification
//!    token attends to it, weighted by the norm of the token's value row, with
//!    per-head scores summed and normalised once;
//! 2. builds the cumulative distribution of those scores and evaluates its
//!    inverse on the fixed grid `{1/K, 2/K, ..., 1}`;
//! 3. keeps each resulting index once (so `K' <= K`), always keeps the
//!    classification token, and
//! 4. gathers the matching rows of every head's attention matrix so the
//!    output is `A_s V` over the full value set.
//!
//! Index convention: sequence position 0 is the classification token.
//! Score and cdf vectors are indexed by `position - 1`.

use serde::{Deserialize, Serialize};

use crate::attention::{merge_heads, AttentionParams, AttentionState};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    /// Classification-token attention times value-row L2 norm.
    #[default]
    ClsAttnVnorm,
    /// Classification-token attention only.
    ClsAttn,
    /// Column sums of the attention matrix over all rows.
    RowsumAttn,
    /// Attention row of a randomly chosen non-classification token.
    RandomToken,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 4] = [
        ScoringMethod::ClsAttnVnorm,
        ScoringMethod::ClsAttn,
        ScoringMethod::RowsumAttn,
        ScoringMethod::RandomToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoringMethod::ClsAttnVnorm => "cls-vnorm",
            ScoringMethod::ClsAttn => "cls",
            ScoringMethod::RowsumAttn => "rowsum",
            ScoringMethod::RandomToken => "random-token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// How `cdf^-1(k)` is turned into a token position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseRule {
    /// Smallest position whose cdf reaches `k` (generalised inverse).
    #[default]
    Ceil,
    /// Invert the piecewise-linear cdf through `(0, 0), (1, cdf_1), ...,
    /// (N, cdf_N)` and round half away from zero, clamped to `[1, N]`.
    Nearest,
}

impl InverseRule {
    pub fn name(self) -> &'static str {
        match self {
            InverseRule::Ceil => "ceil",
            InverseRule::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [InverseRule::Ceil, InverseRule::Nearest]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    #[default]
    InverseTransform,
    TopK,
    Random,
}

impl SamplingPolicy {
    pub const ALL: [SamplingPolicy; 3] = [
        SamplingPolicy::InverseTransform,
        SamplingPolicy::TopK,
        SamplingPolicy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingPolicy::InverseTransform => "inverse",
            SamplingPolicy::TopK => "topk",
            SamplingPolicy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Upper bound `K` on sampled tokens.
    pub budget: usize,
    #[serde(default)]
    pub inverse_rule: InverseRule,
    #[serde(default)]
    pub policy: SamplingPolicy,
    /// Used by [`SamplingPolicy::Random`] only.
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    pub fn inverse(budget: usize) -> Self {
        Self {
            budget,
            inverse_rule: InverseRule::Ceil,
            policy: SamplingPolicy::InverseTransform,
            seed: 0,
        }
    }

    /// `{1/K, ..., K/K}`; the last point is exactly 1.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.budget;
        (1..=k)
            .map(|j| if j == k { 1.0 } else { j as f64 / k as f64 })
            .collect()
    }
}

/// Normalised significance scores of the `N` non-classification tokens and
/// their cumulative distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    scores: Vec<f64>,
    cdf: Vec<f64>,
    /// Set when every raw score was zero and uniform scores were substituted.
    pub fallback: bool,
}

impl ScoreVector {
    /// Normalises raw nonnegative scores; all-zero input falls back to uniform.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Contract("score vector must not be empty".into()));
        }
        if raw.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(Error::Contract("scores must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        let (scores, fallback) = if total > 0.0 {
            (raw.iter().map(|&s| s / total).collect(), false)
        } else {
            (vec![1.0 / raw.len() as f64; raw.len()], true)
        };
        Ok(build_cdf(scores, fallback))
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Prefix sums of normalised scores; the final entry is pinned to 1.
pub fn build_cdf(scores: Vec<f64>, fallback: bool) -> ScoreVector {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = scores
        .iter()
        .map(|&s| {
            acc += s;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    ScoreVector {
        scores,
        cdf,
        fallback,
    }
}

/// Retained tokens of one sampling stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    /// Sorted unique sequence positions; always starts with 0.
    pub kept: Vec<usize>,
    /// `kept.len() - 1`.
    pub k_prime: usize,
    /// Raw inverse-cdf value per grid point (selected positions for top-K and
    /// random policies).
    pub psi: Vec<f64>,
}

impl SampleResult {
    /// Keeps every token of an `n_tokens` sequence.
    pub fn keep_all(n_tokens: usize) -> Self {
        Self {
            kept: (0..n_tokens).collect(),
            k_prime: n_tokens.saturating_sub(1),
            psi: Vec::new(),
        }
    }

    fn from_positions(mut positions: Vec<usize>, psi: Vec<f64>) -> Self {
        positions.push(0);
        positions.sort_unstable();
        positions.dedup();
        Self {
            k_prime: positions.len() - 1,
            kept: positions,
            psi,
        }
    }
}

fn check_heads<T: Real>(attn: &[&Tensor<T>], values: &[&Tensor<T>]) -> Result<usize> {
    if attn.is_empty() || attn.len() != values.len() {
        return dim_err(
            "compute_scores",
            format!("{} attention heads, {} value heads", attn.len(), values.len()),
        );
    }
    let t = attn[0].rows();
    for (a, v) in attn.iter().zip(values) {
        if a.rows() != t || a.cols() != t || v.rows() != t {
            return dim_err(
                "compute_scores",
                format!("attention {:?} with values {:?}", a.shape(), v.shape()),
            );
        }
    }
    if t < 2 {
        return Err(Error::Contract(
            "scoring needs at least one non-classification token".into(),
        ));
    }
    Ok(t - 1)
}

/// Per-token significance scores summed over heads, then normalised.
///
/// `seed` only matters for [`ScoringMethod::RandomToken`].
pub fn compute_scores<T: Real>(
    attn: &[&Tensor<T>],
    values: &[&Tensor<T>],
    method: ScoringMethod,
    seed: u64,
) -> Result<ScoreVector> {
    let n = check_heads(attn, values)?;
    let mut raw = vec![0.0f64; n];
    let reference_row = match method {
        ScoringMethod::RandomToken => 1 + Rng::new(seed).below(n),
        _ => 0,
    };
    for (a, v) in attn.iter().zip(values) {
        match method {
            ScoringMethod::ClsAttnVnorm => {
                for (j, r) in raw.iter_mut().enumerate() {
                    let norm = v
                        .row(j + 1)
                        .iter()
                        .map(|x| x.as_f64() * x.as_f64())
                        .sum::<f64>()
                        .sqrt();
                    *r += a.get(0, j + 1).as_f64() * norm;
                }
            }
            ScoringMethod::ClsAttn | ScoringMethod::RandomToken => {
                let row = a.row(reference_row);
                for (r, w) in raw.iter_mut().zip(&row[1..]) {
                    *r += w.as_f64();
                }
            }
            ScoringMethod::RowsumAttn => {
                for i in 0..=n {
                    for (r, w) in raw.iter_mut().zip(&a.row(i)[1..]) {
                        *r += w.as_f64();
                    }
                }
            }
        }
    }
    ScoreVector::from_raw(&raw)
}

fn inverse_ceil(cdf: &[f64], k: f64) -> usize {
    // First position whose cdf reaches k; the pinned final 1.0 bounds it.
    cdf.partition_point(|&c| c < k).min(cdf.len() - 1) + 1
}

fn inverse_nearest(cdf: &[f64], k: f64) -> (f64, usize) {
    let i = inverse_ceil(cdf, k);
    let lo = if i == 1 { 0.0 } else { cdf[i - 2] };
    let hi = cdf[i - 1];
    let x = (i - 1) as f64 + (k - lo) / (hi - lo);
    let pos = (x.round() as usize).clamp(1, cdf.len());
    (x, pos)
}

/// Selects the tokens to keep for one stage.
pub fn sample_indices(sv: &ScoreVector, cfg: &SamplerConfig) -> Result<SampleResult> {
    let n = sv.len();
    if n == 0 {
        return Err(Error::Contract("cannot sample from an empty score vector".into()));
    }
    if cfg.budget == 0 {
        return Err(Error::Config("sampling budget K must be at least 1".into()));
    }
    match cfg.policy {
        SamplingPolicy::InverseTransform => {
            let grid = cfg.grid();
            let mut positions = Vec::with_capacity(grid.len());
            let mut psi = Vec::with_capacity(grid.len());
            for k in grid {
                let (raw, pos) = match cfg.inverse_rule {
                    InverseRule::Ceil => {
                        let p = inverse_ceil(sv.cdf(), k);
                        (p as f64, p)
                    }
                    InverseRule::Nearest => inverse_nearest(sv.cdf(), k),
                };
                psi.push(raw);
                positions.push(pos);
            }
            Ok(SampleResult::from_positions(positions, psi))
        }
        SamplingPolicy::TopK => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| sv.scores[b].total_cmp(&sv.scores[a]).then(a.cmp(&b)));
            let positions: Vec<usize> = order.into_iter().take(cfg.budget).map(|i| i + 1).collect();
            let psi = positions.iter().map(|&p| p as f64).collect();
            Ok(SampleResult::from_positions(positions, psi))
        }
        SamplingPolicy::Random => {
            let positions: Vec<usize> = Rng::new(cfg.seed)
                .choose_distinct(n, cfg.budget)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            let psi = positions.iter().map(|&p| p as f64).collect();
            Ok(SampleResult::from_positions(positions, psi))
        }
    }
}

/// Rows of `attn` for the kept tokens; columns are untouched.
pub fn refine_attention<T: Real>(attn: &Tensor<T>, result: &SampleResult) -> Result<Tensor<T>> {
    attn.gather_rows(&result.kept)
}

/// `O = A_s V` per head over the full value set, merged and projected.
/// The kept indices are treated as constants; gradients flow through the
/// gathered attention rows and the values.
pub fn ats_attend<T: Real>(
    tape: &mut Tape<T>,
    state: &AttentionState,
    result: &SampleResult,
    params: &AttentionParams,
) -> Result<Var> {
    if state.attn.len() != state.v.len() || state.attn.is_empty() {
        return Err(Error::Contract(
            "ats_attend needs attention matrices for every head".into(),
        ));
    }
    let mut heads = Vec::with_capacity(state.v.len());
    for (&a, &v) in state.attn.iter().zip(&state.v) {
        let refined = tape.gather_rows(a, &result.kept)?;
        heads.push(tape.matmul(refined, v)?);
    }
    merge_heads(tape, &heads, params)
}
