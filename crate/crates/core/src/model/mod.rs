//! A small pre-norm vision transformer with optional sampling stages.
//!
//! Blocks follow `x <- x + Attn(LN(x)); x <- x + MLP(LN(x))`. In a sampling
//! stage the block scores its own attention state, samples the tokens to keep,
//! replaces the attention output by `A_s V`, and gathers the residual branch
//! with the same indices, so the MLP and every later block see the reduced set.
//! Positional embeddings are added once at the input and travel with their
//! rows.

mod weights;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ats::{self, SampleResult, SamplerConfig, ScoringMethod};
use crate::attention::{self, AttentionConfig, AttentionParams, AttentionState};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};

pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters. These, and only these, determine the
/// parameter set, so they are what the weight file records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// 32px grayscale, 8px patches (16 tokens + CLS), d=64, 4 heads, 6 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "channels, depth, mlp_ratio and num_classes must be positive".into(),
            ));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Spatial tokens `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `N + 1`.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut specs = vec![
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            specs.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, self.hidden_dim()]),
                (p("mlp.fc1.bias"), vec![self.hidden_dim()]),
                (p("mlp.fc2.weight"), vec![self.hidden_dim(), d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        specs.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        specs
    }
}

const HEAD_PARAMS: usize = 4;
const BLOCK_PARAMS: usize = 12;

/// Where and how tokens are sampled. Parameter-free: changing it never
/// changes the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtsConfig {
    /// Block indices that sample, each in `[0, depth)`.
    pub stages: BTreeSet<usize>,
    /// `budget` is the per-stage upper bound `K`; it is further capped by the
    /// number of tokens entering the stage.
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub scoring: ScoringMethod,
}

impl AtsConfig {
    pub fn disabled() -> Self {
        Self {
            stages: BTreeSet::new(),
            sampler: SamplerConfig::inverse(1),
            scoring: ScoringMethod::ClsAttnVnorm,
        }
    }

    /// Stages 2..=5 of the six-block toy model with `K = N`.
    pub fn toy(arch: &ArchConfig) -> Self {
        Self {
            stages: (2..arch.depth.min(6)).collect(),
            sampler: SamplerConfig::inverse(arch.num_patches()),
            scoring: ScoringMethod::ClsAttnVnorm,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.sampler.budget = budget;
        self
    }

    pub fn is_active(&self) -> bool {
        !self.stages.is_empty()
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if let Some(&s) = self.stages.iter().find(|&&s| s >= arch.depth) {
            return Err(Error::Config(format!(
                "sampling stage {s} outside [0, {})",
                arch.depth
            )));
        }
        if self.is_active() && (self.sampler.budget == 0 || self.sampler.budget > arch.num_patches()) {
            return Err(Error::Config(format!(
                "budget K = {} must lie in [1, N = {}]",
                self.sampler.budget,
                arch.num_patches()
            )));
        }
        Ok(())
    }
}

/// Full run configuration: architecture plus sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub ats: AtsConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        let arch = ArchConfig::toy();
        let ats = AtsConfig::toy(&arch);
        Self { arch, ats }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.ats.validate(&self.arch)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: ArchConfig,
    params: Vec<Param<T>>,
}

/// Tape handles of one block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: (Var, Var),
    pub attn: AttentionParams,
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// Tape handles of every parameter, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn cls_token(&self) -> Var {
        self.vars[0]
    }
    pub fn pos_embed(&self) -> Var {
        self.vars[1]
    }
    pub fn patch_embed(&self) -> (Var, Var) {
        (self.vars[2], self.vars[3])
    }
    pub fn block(&self, b: usize) -> BlockParams {
        let v = &self.vars[HEAD_PARAMS + b * BLOCK_PARAMS..HEAD_PARAMS + (b + 1) * BLOCK_PARAMS];
        BlockParams {
            norm1: (v[0], v[1]),
            attn: AttentionParams {
                qkv_weight: v[2],
                qkv_bias: v[3],
                proj_weight: v[4],
                proj_bias: v[5],
            },
            norm2: (v[6], v[7]),
            fc1: (v[8], v[9]),
            fc2: (v[10], v[11]),
        }
    }
    fn tail(&self) -> &[Var] {
        &self.vars[self.vars.len() - 4..]
    }
    pub fn final_norm(&self) -> (Var, Var) {
        (self.tail()[0], self.tail()[1])
    }
    pub fn head(&self) -> (Var, Var) {
        (self.tail()[2], self.tail()[3])
    }
}

/// Token bookkeeping for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub block: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    /// Present for sampling stages.
    pub sample: Option<SampleResult>,
    /// Original sequence positions (0 = CLS) of the rows leaving the block.
    pub token_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// Tokens entering each block followed by the count leaving the last one.
    pub fn token_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self.stages.iter().map(|s| s.tokens_in).collect();
        if let Some(last) = self.stages.last() {
            counts.push(last.tokens_out);
        }
        counts
    }

    /// `K'` of every sampling stage, in block order.
    pub fn k_primes(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter_map(|s| s.sample.as_ref().map(|r| r.k_prime))
            .collect()
    }
}

/// How a block treats its attention output.
#[derive(Clone, Copy, Debug)]
pub enum Sampling<'a> {
    Off,
    /// Score, sample and refine with this configuration and seed.
    Adaptive { ats: &'a AtsConfig, seed: u64 },
    /// Refine with indices chosen elsewhere.
    Frozen(&'a SampleResult),
}

fn stage_seed(seed: u64, block: usize) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// One transformer block. Returns the output tokens and, if the block
/// sampled, its [`SampleResult`].
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    p: &BlockParams,
    x: Var,
    sampling: Sampling<'_>,
) -> Result<(Var, Option<SampleResult>)> {
    let eps = T::from_f64(LN_EPS);
    let attn_cfg = arch.attention();
    let h = tape.layer_norm(x, p.norm1.0, p.norm1.1, eps)?;
    let mut state: AttentionState = attention::project_qkv(tape, &attn_cfg, h, &p.attn)?;
    attention::attention_matrix(tape, &mut state, attn_cfg.head_dim())?;

    let sample = match sampling {
        Sampling::Off => None,
        Sampling::Frozen(r) => Some(r.clone()),
        Sampling::Adaptive { ats: cfg, seed } => {
            let n = state.tokens - 1;
            if n == 0 {
                Some(SampleResult::keep_all(1))
            } else {
                let scores = ats::compute_scores(
                    &state.attn_values(tape),
                    &state.value_rows(tape),
                    cfg.scoring,
                    seed,
                )?;
                let sampler = SamplerConfig {
                    budget: cfg.sampler.budget.min(n),
                    seed: seed.rotate_left(17),
                    ..cfg.sampler
                };
                Some(ats::sample_indices(&scores, &sampler)?)
            }
        }
    };

    let (attn_out, residual) = match &sample {
        None => (attention::attend(tape, &state, &p.attn)?, x),
        Some(r) => (
            ats::ats_attend(tape, &state, r, &p.attn)?,
            tape.gather_rows(x, &r.kept)?,
        ),
    };
    let x = tape.add(residual, attn_out)?;
    let h = tape.layer_norm(x, p.norm2.0, p.norm2.1, eps)?;
    let h = linear(tape, h, p.fc1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, p.fc2)?;
    Ok((tape.add(x, h)?, sample))
}

/// Splits an `H x W x C` image into raster-ordered flattened patches,
/// each laid out as `(row, col, channel)`.
pub fn patchify<T: Real>(image: &Tensor<T>, arch: &ArchConfig) -> Result<Tensor<T>> {
    let (s, p, c) = (arch.image_size, arch.patch_size, arch.channels);
    if image.shape() != [s, s, c] {
        return dim_err(
            "patch_embed",
            format!("image {:?}, expected [{s}, {s}, {c}]", image.shape()),
        );
    }
    let g = arch.grid();
    let px = image.data();
    let mut data = Vec::with_capacity(g * g * p * p * c);
    for pr in 0..g {
        for pc in 0..g {
            for dy in 0..p {
                let start = ((pr * p + dy) * s + pc * p) * c;
                data.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[g * g, p * p * c], data)
}

impl<T: Real> Model<T> {
    /// Seeded initialisation: Gaussian(0, 0.02) weights and embeddings, zero
    /// biases, unit norm gains.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::derive(seed, 0x1417);
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with("norm1.weight")
                    || name.ends_with("norm2.weight")
                    || name == "norm.weight"
                {
                    Tensor::full(&shape, T::one())
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    rng.normal_tensor(&shape, 0.02)
                };
                Param {
                    name,
                    value: Arc::new(value),
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    /// Builds a model from named tensors in storage order.
    pub fn from_params(arch: &ArchConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (got_name, t)) in specs.into_iter().zip(tensors) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: got_name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            params.push(Param {
                name,
                value: Arc::new(t),
            });
        }
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value.as_ref())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Patch projection, CLS prepend and positional embedding: `(N+1) x d`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, pv: &ParamVars, image: &Tensor<T>) -> Result<Var> {
        let patches = tape.constant(patchify(image, &self.arch)?);
        let emb = linear(tape, patches, pv.patch_embed())?;
        let tokens = tape.concat_rows(&[pv.cls_token(), emb])?;
        tape.add(tokens, pv.pos_embed())
    }

    /// Differentiable forward pass; returns the `1 x classes` logits handle.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        image: &Tensor<T>,
        ats: &AtsConfig,
    ) -> Result<(Var, ForwardTrace)> {
        ats.validate(&self.arch)?;
        let mut x = self.patch_embed(tape, pv, image)?;
        let mut ids: Vec<usize> = (0..self.arch.num_tokens()).collect();
        let mut stages = Vec::with_capacity(self.arch.depth);
        for b in 0..self.arch.depth {
            let sampling = if ats.stages.contains(&b) {
                Sampling::Adaptive {
                    ats,
                    seed: stage_seed(ats.sampler.seed, b),
                }
            } else {
                Sampling::Off
            };
            let tokens_in = ids.len();
            let (y, sample) = block_forward(tape, &self.arch, &pv.block(b), x, sampling)?;
            if let Some(r) = &sample {
                ids = r.kept.iter().map(|&k| ids[k]).collect();
            }
            stages.push(StageTrace {
                block: b,
                tokens_in,
                tokens_out: ids.len(),
                sample,
                token_ids: ids.clone(),
            });
            x = y;
        }
        let cls = tape.gather_rows(x, &[0])?;
        let (g, b) = pv.final_norm();
        let cls = tape.layer_norm(cls, g, b, T::from_f64(LN_EPS))?;
        let logits = linear(tape, cls, pv.head())?;
        let trace = ForwardTrace {
            stages,
            logits: tape.value(logits).to_f64_vec(),
        };
        Ok((logits, trace))
    }

    /// Inference forward pass.
    pub fn forward(&self, image: &Tensor<T>, ats: &AtsConfig) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        Ok(self.forward_on_tape(&mut tape, &pv, image, ats)?.1)
    }
}
