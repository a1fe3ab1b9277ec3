mod common;

use ats_core::model::{block_forward, Sampling};
use ats_core::numerics::{grad_check, Rng, Tape, Var};
use ats_core::Result;
use common::{block_params, frozen_sample, tiny_arch, weighted_sum};

use common::H;

/// A random chain of differentiable ops applied to `x` (`rows x cols`).
fn random_graph(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::derive(seed, 1);
    let mut rng_ops = Rng::derive(seed, 2);
    let mut cur = x;
    let depth = 2 + rng_ops.below(4);
    for _ in 0..depth {
        let (r, c) = {
            let s = tape.value(cur).shape();
            (s[0], s[1])
        };
        cur = match rng_ops.below(9) {
            0 => {
                let out = 2 + rng.below(4);
                let w = tape.constant(rng.normal_tensor(&[c, out], 0.7));
                tape.matmul(cur, w)?
            }
            1 => {
                let b = tape.constant(rng.normal_tensor(&[c], 0.5));
                tape.add_row(cur, b)?
            }
            2 => tape.gelu(cur)?,
            // with fewer than three columns layer norm is locally constant
            3 if c >= 3 => {
                let g = tape.constant(rng.uniform_tensor(&[c], 0.5, 1.5));
                let b = tape.constant(rng.normal_tensor(&[c], 0.1));
                tape.layer_norm(cur, g, b, 1e-5)?
            }
            4 => tape.softmax_rows(cur)?,
            5 => {
                let other = tape.matmul_nt(cur, cur)?;
                let s = tape.scale(other, 0.3)?;
                tape.matmul(s, cur)?
            }
            6 => {
                let idx: Vec<usize> = (0..r).map(|_| rng.below(r)).collect();
                tape.gather_rows(cur, &idx)?
            }
            7 if c >= 2 => {
                let a = tape.slice_cols(cur, 0, c / 2)?;
                let b = tape.slice_cols(cur, c / 2, c - c / 2)?;
                let m = tape.concat_cols(&[b, a])?;
                tape.mul(m, cur)?
            }
            _ => {
                let top = tape.gather_rows(cur, &[0])?;
                tape.concat_rows(&[cur, top])?
            }
        };
    }
    weighted_sum(tape, cur, seed ^ 0xABCD)
}

#[test]
fn random_graphs_match_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let rows = 2 + rng.below(3);
        let cols = 2 + rng.below(3);
        let x = rng.normal_tensor(&[rows, cols], 1.0);
        let err = grad_check(|t, v| random_graph(t, v, seed), &x, H).unwrap();
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("worst relative error over 100 graphs: {worst:e}");
}

#[test]
fn ats_block_input_gradients_with_frozen_indices() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let err = common::ats_block_input_gradient_error(seed);
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("worst relative error over 20 blocks: {worst:e}");
}

/// Every block parameter, compared against central differences relative to
/// the largest gradient entry: per-coordinate ratios are dominated by
/// difference roundoff for entries several orders below the rest.
#[test]
fn ats_block_parameter_gradients_with_frozen_indices() {
    let arch = tiny_arch();
    let t = arch.num_tokens();
    for seed in 0..5u64 {
        let model = common::random_model(&arch, seed);
        let x = Rng::derive(seed, 3).normal_tensor(&[t, arch.dim], 1.0);
        let sample = frozen_sample(&model, &x);
        for slot in 4..4 + 12 {
            let w = model.params()[slot].value.as_ref().clone();
            let f = |tape: &mut Tape<f64>, wv: Var| -> Result<Var> {
                let p = block_params(tape, &model, Some((slot, wv)));
                let xv = tape.constant(x.clone());
                let (y, _) = block_forward(tape, &arch, &p, xv, Sampling::Frozen(&sample))?;
                weighted_sum(tape, y, seed)
            };
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let loss = f(&mut tape, wv).unwrap();
            tape.backward(loss).unwrap();
            let analytic = tape.grad(wv).unwrap().clone();
            let numeric: Vec<f64> = (0..w.numel())
                .map(|i| {
                    let at = |d: f64| {
                        let mut p = w.clone();
                        p.data_mut()[i] += d;
                        let mut t = Tape::new();
                        let v = t.constant(p);
                        let y = f(&mut t, v).unwrap();
                        t.value(y).data()[0]
                    };
                    (at(H) - at(-H)) / (2.0 * H)
                })
                .collect();
            let err = common::max_rel_diff(analytic.data(), &numeric);
            assert!(err <= 1e-6, "seed {seed} {}: {err:e}", model.params()[slot].name);
        }
    }
}

#[test]
fn sampling_indices_carry_no_gradient() {
    // The loss depends on which rows are kept only through the gather; with
    // the indices frozen, perturbing the input cannot change the selection.
    let arch = tiny_arch();
    let model = common::random_model(&arch, 3);
    let x = Rng::new(3).normal_tensor(&[arch.num_tokens(), arch.dim], 1.0);
    let s = frozen_sample(&model, &x);
    let mut tape = Tape::new();
    let p = block_params(&mut tape, &model, None);
    let xv = tape.leaf(x.clone());
    let (y, out) = block_forward(&mut tape, &arch, &p, xv, Sampling::Frozen(&s)).unwrap();
    assert_eq!(out.unwrap(), s);
    assert_eq!(tape.value(y).rows(), s.kept.len());
    let loss = weighted_sum(&mut tape, y, 1).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(xv).unwrap();
    // dropped rows still reach the loss through keys and values
    let dropped: Vec<usize> = (0..arch.num_tokens()).filter(|i| !s.kept.contains(i)).collect();
    assert!(!dropped.is_empty());
    for r in dropped {
        assert!(g.row(r).iter().any(|&v| v != 0.0), "row {r}");
    }
}
