mod common;

use ats_core::flops::{block_macs, dense_macs, model_macs};
use ats_core::model::{AtsConfig, ArchConfig};
use proptest::prelude::*;

/// Block cost summed head by head, term by term.
fn reference_block(t_in: u64, t_out: u64, d: u64, h: u64, r: u64) -> (u64, u64) {
    let hd = d / h;
    let mut attn = 0;
    attn += t_in * d * 3 * d;
    for _ in 0..h {
        attn += t_in * t_in * hd;
        attn += t_out * t_in * hd;
    }
    attn += t_out * d * d;
    let mlp = t_out * d * (r * d) + t_out * (r * d) * d;
    (attn, mlp)
}

proptest! {
    #[test]
    fn block_cost_matches_reference(t_in in 1u64..300, frac in 0.0f64..1.0, hd in 1u64..16, h in 1u64..8, r in 1u64..6) {
        let t_out = 1 + ((t_in - 1) as f64 * frac) as u64;
        let d = hd * h;
        let got = block_macs(t_in as usize, t_out as usize, d as usize, h as usize, r as usize).unwrap();
        prop_assert_eq!(got, reference_block(t_in, t_out, d, h, r));
    }

    #[test]
    fn keeping_more_tokens_never_costs_less(t_in in 2usize..200, a in 1usize..200, b in 1usize..200) {
        let (lo, hi) = (a.min(b).min(t_in), a.max(b).min(t_in));
        let c = |t| { let (x, y) = block_macs(t_in, t, 64, 4, 4).unwrap(); x + y };
        prop_assert!(c(lo) <= c(hi));
    }
}

#[test]
fn doubling_tokens_more_than_triples_the_attention_core() {
    // core = total attention minus the linear projections
    let core = |t: usize| block_macs(t, t, 64, 4, 4).unwrap().0 - 4 * t as u64 * 64 * 64;
    for t in [1, 5, 17, 100] {
        assert!(core(2 * t) > 3 * core(t), "t {t}");
    }
}

#[test]
fn dense_cost_is_the_same_for_every_image() {
    let arch = common::small_arch();
    let dense = dense_macs(&arch).unwrap().total_macs;
    for seed in 0..5 {
        let model = common::random_model(&arch, seed);
        let trace = model.forward(&common::random_image(&arch, seed), &AtsConfig::disabled()).unwrap();
        assert_eq!(model_macs(&trace, &arch).unwrap().total_macs, dense);
    }
}

#[test]
fn traced_cost_matches_reference_sum() {
    let arch = common::small_arch();
    let ats = AtsConfig::toy(&arch).with_budget(5);
    let (d, h, r) = (arch.dim as u64, arch.heads as u64, arch.mlp_ratio as u64);
    let mut totals = std::collections::BTreeSet::new();
    for seed in 0..10 {
        let model = common::random_model(&arch, seed);
        let trace = model.forward(&common::random_image(&arch, seed), &ats).unwrap();
        let report = model_macs(&trace, &arch).unwrap();
        let mut expected = (arch.num_patches() * arch.patch_dim() * arch.dim + arch.dim * arch.num_classes) as u64;
        for s in &trace.stages {
            let (a, m) = reference_block(s.tokens_in as u64, s.tokens_out as u64, d, h, r);
            expected += a + m;
        }
        assert_eq!(report.total_macs, expected);
        assert!(report.total_macs < dense_macs(&arch).unwrap().total_macs);
        totals.insert(report.total_macs);
    }
    assert!(totals.len() >= 2, "every image cost the same");
}

#[test]
fn toy_dense_cost() {
    // 6 blocks of 17 tokens at width 64, MLP ratio 4, plus embedding and head.
    let arch = ArchConfig::toy();
    let (t, d) = (17u64, 64u64);
    let block = 4 * t * d * d + 2 * t * t * d + 8 * t * d * d;
    assert_eq!(dense_macs(&arch).unwrap().total_macs, 6 * block + 16 * 64 * 64 + 64 * 4);
}
