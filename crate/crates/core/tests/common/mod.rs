//! Reference implementations used as test oracles, plus a few checks shared
//! with the acceptance suite. The oracles share no code with the library
//! beyond reading parameters: plain loops over `Vec<f64>`.

#![allow(dead_code)]

use ats_core::ats::{compute_scores, SampleResult, ScoringMethod};
use ats_core::attention::{attention_matrix, project_qkv, AttentionConfig, AttentionWeights};
use ats_core::model::{block_forward, ArchConfig, BlockParams, Model, ParamVars, Sampling, LN_EPS};
use ats_core::numerics::{grad_check, Rng, Tape, Tensor, Var};
use ats_core::Result;

pub type Mat = Vec<Vec<f64>>;

/// Random nonnegative scores with deliberate ties, zeros and spikes.
pub fn random_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    match rng.below(4) {
        0 => (0..n).map(|_| rng.uniform()).collect(),
        1 => {
            let levels = [0.0, 0.25, 0.5, 1.0];
            let mut v: Vec<f64> = (0..n).map(|_| levels[rng.below(4)]).collect();
            if v.iter().all(|&x| x == 0.0) {
                v[rng.below(n)] = 1.0;
            }
            v
        }
        2 => {
            let mut v: Vec<f64> = (0..n).map(|_| rng.uniform() * 0.01).collect();
            v[rng.below(n)] = 1.0;
            v
        }
        _ => (0..n).map(|_| (-3.0 * rng.normal()).exp()).collect(),
    }
}

fn normalised_cdf(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut acc = 0.0;
    let mut cdf = Vec::with_capacity(raw.len());
    for &r in raw {
        let s = if total > 0.0 { r / total } else { 1.0 / raw.len() as f64 };
        acc += s;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;
    cdf
}

fn grid(k: usize) -> Vec<f64> {
    (1..=k).map(|j| if j == k { 1.0 } else { j as f64 / k as f64 }).collect()
}

fn finish(mut positions: Vec<usize>) -> Vec<usize> {
    positions.push(0);
    positions.sort();
    positions.dedup();
    positions
}

/// Linear cdf scan: for each grid point the first position whose cdf reaches it.
pub fn ceil_oracle(raw: &[f64], k: usize) -> Vec<usize> {
    let cdf = normalised_cdf(raw);
    let mut out = Vec::new();
    for g in grid(k) {
        let mut pos = cdf.len();
        for (i, &c) in cdf.iter().enumerate() {
            if c >= g {
                pos = i + 1;
                break;
            }
        }
        out.push(pos);
    }
    finish(out)
}

/// Piecewise-linear inverse through `(0,0), (1,cdf_1), ..., (N,cdf_N)`,
/// rounded half away from zero and clamped to `[1, N]`.
pub fn nearest_oracle(raw: &[f64], k: usize) -> Vec<usize> {
    let cdf = normalised_cdf(raw);
    let n = cdf.len();
    let mut out = Vec::new();
    for g in grid(k) {
        let mut x = n as f64;
        let mut prev = 0.0;
        for (i, &c) in cdf.iter().enumerate() {
            if c >= g {
                x = i as f64 + (g - prev) / (c - prev);
                break;
            }
            prev = c;
        }
        let r = (x + 0.5).floor() as usize;
        out.push(r.clamp(1, n));
    }
    finish(out)
}

pub fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn param(model: &Model<f64>, name: &str) -> Tensor<f64> {
    model
        .param(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .clone()
}

fn vector(model: &Model<f64>, name: &str) -> Vec<f64> {
    param(model, name).data().to_vec()
}

fn matrix(model: &Model<f64>, name: &str) -> Mat {
    let t = param(model, name);
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Embedded tokens `(N+1) x d` for an `H x W x C` image.
pub fn embed(model: &Model<f64>, image: &Tensor<f64>) -> Mat {
    let a = model.arch();
    let (s, p, c, g) = (a.image_size, a.patch_size, a.channels, a.grid());
    let px = image.data();
    let w = matrix(model, "patch_embed.weight");
    let b = vector(model, "patch_embed.bias");
    let pos = matrix(model, "pos_embed");
    let cls = vector(model, "cls_token");
    let mut tokens = vec![cls.iter().zip(&pos[0]).map(|(x, y)| x + y).collect::<Vec<f64>>()];
    for pr in 0..g {
        for pc in 0..g {
            let mut flat = Vec::with_capacity(p * p * c);
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        flat.push(px[((pr * p + dy) * s + pc * p + dx) * c + ch]);
                    }
                }
            }
            let idx = pr * g + pc + 1;
            let e = affine(&vec![flat], &w, &b).remove(0);
            tokens.push(e.iter().zip(&pos[idx]).map(|(x, y)| x + y).collect());
        }
    }
    tokens
}

/// Per-head attention matrices of block `b` for tokens `x`, plus the
/// per-head value rows.
pub fn block_attention(model: &Model<f64>, b: usize, x: &Mat) -> (Vec<Mat>, Vec<Mat>) {
    let a = model.arch();
    let pre = |s: &str| format!("blocks.{b}.{s}");
    let h = layer_norm(x, &vector(model, &pre("norm1.weight")), &vector(model, &pre("norm1.bias")));
    let qkv = affine(&h, &matrix(model, &pre("attn.qkv.weight")), &vector(model, &pre("attn.qkv.bias")));
    let (d, hd) = (a.dim, a.dim / a.heads);
    let cols = |m: &Mat, start: usize| -> Mat { m.iter().map(|r| r[start..start + hd].to_vec()).collect() };
    let mut attn = Vec::new();
    let mut values = Vec::new();
    for head in 0..a.heads {
        let q = cols(&qkv, head * hd);
        let k = cols(&qkv, d + head * hd);
        let v = cols(&qkv, 2 * d + head * hd);
        let scale = 1.0 / (hd as f64).sqrt();
        let att: Mat = q
            .iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale)
                    .collect();
                softmax_row(&logits)
            })
            .collect();
        attn.push(att);
        values.push(v);
    }
    (attn, values)
}

/// Block `b` keeping only the rows in `kept` (all rows when `None`).
pub fn block(model: &Model<f64>, b: usize, x: &Mat, kept: Option<&[usize]>) -> Mat {
    let a = model.arch();
    let pre = |s: &str| format!("blocks.{b}.{s}");
    let (attn, values) = block_attention(model, b, x);
    let rows: Vec<usize> = match kept {
        Some(k) => k.to_vec(),
        None => (0..x.len()).collect(),
    };
    let hd = a.dim / a.heads;
    let mut merged = vec![vec![0.0; a.dim]; rows.len()];
    for head in 0..a.heads {
        for (out_r, &r) in rows.iter().enumerate() {
            for c in 0..hd {
                let mut s = 0.0;
                for j in 0..x.len() {
                    s += attn[head][r][j] * values[head][j][c];
                }
                merged[out_r][head * hd + c] = s;
            }
        }
    }
    let proj = affine(&merged, &matrix(model, &pre("attn.proj.weight")), &vector(model, &pre("attn.proj.bias")));
    let mut y: Mat = rows
        .iter()
        .zip(&proj)
        .map(|(&r, p)| x[r].iter().zip(p).map(|(u, v)| u + v).collect())
        .collect();
    let h = layer_norm(&y, &vector(model, &pre("norm2.weight")), &vector(model, &pre("norm2.bias")));
    let mut h = affine(&h, &matrix(model, &pre("mlp.fc1.weight")), &vector(model, &pre("mlp.fc1.bias")));
    for row in &mut h {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    let m = affine(&h, &matrix(model, &pre("mlp.fc2.weight")), &vector(model, &pre("mlp.fc2.bias")));
    for (row, mrow) in y.iter_mut().zip(&m) {
        for (v, w) in row.iter_mut().zip(mrow) {
            *v += w;
        }
    }
    y
}

/// Logits with `kept[b]` (positions within block `b`'s input) applied at
/// each block; `None` keeps everything.
pub fn forward(model: &Model<f64>, image: &Tensor<f64>, kept: &[Option<Vec<usize>>]) -> Vec<f64> {
    let mut x = embed(model, image);
    for b in 0..model.arch().depth {
        x = block(model, b, &x, kept.get(b).and_then(|k| k.as_deref()));
    }
    let cls = layer_norm(&vec![x[0].clone()], &vector(model, "norm.weight"), &vector(model, "norm.bias"));
    affine(&cls, &matrix(model, "head.weight"), &vector(model, "head.bias")).remove(0)
}

/// Unnormalised `sum_h A_h[0, j] * |V_h[j]|` for `j = 1..T`.
pub fn cls_vnorm_scores(attn: &[Mat], values: &[Mat]) -> Vec<f64> {
    let t = attn[0].len();
    (1..t)
        .map(|j| {
            attn.iter()
                .zip(values)
                .map(|(a, v)| a[0][j] * v[j].iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum()
        })
        .collect()
}

/// Logits with ceil-rule sampling at `stages`, plus the kept positions
/// chosen at each of those stages.
pub fn forward_sampled(
    model: &Model<f64>,
    image: &Tensor<f64>,
    stages: &[usize],
    budget: usize,
) -> (Vec<f64>, Vec<Vec<usize>>) {
    let mut x = embed(model, image);
    let mut chosen = Vec::new();
    for b in 0..model.arch().depth {
        let kept = if stages.contains(&b) && x.len() > 1 {
            let (attn, values) = block_attention(model, b, &x);
            let raw = cls_vnorm_scores(&attn, &values);
            let k = ceil_oracle(&raw, budget.min(raw.len()));
            chosen.push(k.clone());
            Some(k)
        } else {
            None
        };
        x = block(model, b, &x, kept.as_deref());
    }
    let cls = layer_norm(&vec![x[0].clone()], &vector(model, "norm.weight"), &vector(model, "norm.bias"));
    let logits = affine(&cls, &matrix(model, "head.weight"), &vector(model, "head.bias")).remove(0);
    (logits, chosen)
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        dim: 8,
        heads: 2,
        depth: 3,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

/// Model with weights large enough that attention is far from uniform.
pub fn random_model(arch: &ArchConfig, seed: u64) -> Model<f64> {
    let mut rng = Rng::derive(seed, 99);
    let tensors = arch
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
                rng.uniform_tensor(&shape, 0.5, 1.5)
            } else {
                rng.normal_tensor(&shape, 0.5)
            };
            (name, t)
        })
        .collect();
    Model::from_params(arch, tensors).unwrap()
}

pub fn random_image(arch: &ArchConfig, seed: u64) -> Tensor<f64> {
    let s = arch.image_size;
    Rng::derive(seed, 7).uniform_tensor(&[s, s, arch.channels], 0.0, 1.0)
}

/// Largest absolute difference relative to the largest magnitude present.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst attention row-sum error and worst score-sum error for one random
/// layer with `n` patch tokens, `heads` heads of width 4.
pub fn normalisation_errors(n: usize, heads: usize, method: ScoringMethod, seed: u64) -> (f64, f64) {
    let cfg = AttentionConfig::new(4 * heads, heads).unwrap();
    let mut rng = Rng::derive(seed, n as u64 * 8 + heads as u64);
    let weights = AttentionWeights::<f64>::random(&cfg, &mut rng, 0.8);
    let x = rng.normal_tensor(&[n + 1, cfg.dim], 1.5);
    let mut tape = Tape::new();
    let params = weights.register(&mut tape);
    let xv = tape.constant(x);
    let mut state = project_qkv(&mut tape, &cfg, xv, &params).unwrap();
    attention_matrix(&mut tape, &mut state, cfg.head_dim()).unwrap();
    let mut row_err = 0.0f64;
    for a in state.attn_values(&tape) {
        for r in 0..a.rows() {
            let s: f64 = a.row(r).iter().sum();
            row_err = row_err.max((s - 1.0).abs());
        }
    }
    let scores = compute_scores(&state.attn_values(&tape), &state.value_rows(&tape), method, seed).unwrap();
    let score_err = (scores.scores().iter().sum::<f64>() - 1.0).abs();
    (row_err, score_err)
}

/// Finite-difference step used by every gradient check.
pub const H: f64 = 1e-5;

/// `sum(y * w)` for a fixed zero-mean random `w`. Positive weights would
/// mostly cancel against softmax rows that sum to one.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Rng::new(seed).normal_tensor(&shape, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 8,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        num_classes: 2,
    }
}

/// Registers block 0 of `model` as constants, substituting `x` for the
/// parameter at `slot` when given.
pub fn block_params(tape: &mut Tape<f64>, model: &Model<f64>, slot: Option<(usize, Var)>) -> BlockParams {
    let vars: Vec<Var> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| match slot {
            Some((s, v)) if s == i => v,
            _ => tape.constant(p.value.as_ref().clone()),
        })
        .collect();
    ParamVars { vars }.block(0)
}

pub fn frozen_sample(model: &Model<f64>, x: &Tensor<f64>) -> SampleResult {
    let mut tape = Tape::new();
    let p = block_params(&mut tape, model, None);
    let xv = tape.constant(x.clone());
    let mut ats = ats_core::model::AtsConfig::toy(model.arch());
    ats.stages = [0].into();
    ats.sampler.budget = 2;
    let (_, s) = block_forward(&mut tape, model.arch(), &p, xv, Sampling::Adaptive { ats: &ats, seed: 0 }).unwrap();
    s.unwrap()
}

pub fn frozen_block_loss<'a>(model: &'a Model<f64>, sample: &SampleResult, seed: u64) -> impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'a {
    let sample = sample.clone();
    move |tape, xv| {
        let p = block_params(tape, model, None);
        let (y, _) = block_forward(tape, model.arch(), &p, xv, Sampling::Frozen(&sample))?;
        weighted_sum(tape, y, seed)
    }
}

/// Relative gradient error of one ATS block with respect to its input, the
/// sampled indices frozen. Block weights and input are drawn from `seed`.
pub fn ats_block_input_gradient_error(seed: u64) -> f64 {
    let arch = tiny_arch();
    let t = arch.num_tokens();
    let model = random_model(&arch, seed);
    let x = Rng::derive(seed, 3).normal_tensor(&[t, arch.dim], 1.0);
    let sample = frozen_sample(&model, &x);
    assert!(sample.k_prime < t - 1, "seed {seed}: nothing dropped");
    grad_check(frozen_block_loss(&model, &sample, seed), &x, H).unwrap()
}
