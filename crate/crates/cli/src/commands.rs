use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ats_core::ats::{InverseRule, SamplingPolicy, ScoringMethod};
use ats_core::dataset::{load_pgm, save_dataset, save_pgm, ShapeSample};
use ats_core::flops::dense_macs;
use ats_core::model::{load_weights, save_weights, AtsConfig, Model};
use ats_core::numerics::Tensor;
use ats_core::trainer::{evaluate, train_with, EpochMetrics, TrainLog};

use crate::args::{
    CommonArgs, EvalArgs, FinetuneArgs, GenDataArgs, MasksArgs, SweepArgs, TrainArgs, TrainingArgs,
};
use crate::config::{parse_list, FileConfig, SCHEMA};
use crate::report::{
    write_json, write_metrics, write_sweep, AtsSummary, EvalReport, GenDataReport, MaskTrace, SweepRow,
};

fn seed(common: &CommonArgs, cfg: &FileConfig) -> u64 {
    common
        .seed
        .or(cfg.train.as_ref().map(|t| t.seed))
        .unwrap_or(0)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    if args.data.data.is_some() {
        bail!("gen-data writes a dataset; --data is not accepted");
    }
    let mut manifest = cfg.manifest(&args.data);
    if args.data.data_seed.is_none() {
        if let Some(s) = args.common.seed {
            manifest.seed = s;
        }
    }
    let ds = ats_core::dataset::generate(&manifest)?;
    save_dataset(&ds, &args.common.out)?;
    let report = GenDataReport {
        schema: SCHEMA,
        manifest,
        blob: args.common.out.display().to_string(),
    };
    write_json(&with_suffix(&args.common.out, ".json"), &report)
}

fn run_training(
    model: &mut Model<f32>,
    cfg: &FileConfig,
    common: &CommonArgs,
    data: &crate::args::DataArgs,
    training: &TrainingArgs,
    ats: &AtsConfig,
) -> Result<()> {
    let ds = cfg.dataset(data, model.arch().image_size)?;
    let tc = cfg.training(training, seed(common, cfg));
    let log: TrainLog = train_with(model, &ds.train, &ds.val, &tc, ats, |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} top1 {:.4} macs {:.0}",
            m.epoch, m.split, m.loss, m.top1, m.mean_macs
        )
    })?;
    save_weights(model, &common.out)?;
    let metrics = training
        .metrics
        .clone()
        .unwrap_or_else(|| with_suffix(&common.out, ".csv"));
    write_metrics(&metrics, &log.to_csv(), log.epochs.len())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let arch = cfg.arch();
    let seed = seed(&args.common, &cfg);
    let (ats, fraction) = cfg.ats(&args.ats, &arch, seed, false)?;
    if fraction.is_some() {
        bail!("--mac-fraction applies to eval and sweep only");
    }
    let mut model = Model::<f32>::init(&arch, seed)?;
    run_training(&mut model, &cfg, &args.common, &args.data, &args.training, &ats)
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let mut model = load_model(&args.weights)?;
    let arch = model.arch().clone();
    let (ats, fraction) = cfg.ats(&args.ats, &arch, seed(&args.common, &cfg), true)?;
    if fraction.is_some() {
        bail!("--mac-fraction applies to eval and sweep only");
    }
    run_training(&mut model, &cfg, &args.common, &args.data, &args.training, &ats)
}

/// Largest budget whose mean MACs over `samples` stay within `fraction` of
/// the dense cost. Every budget is evaluated: mean cost is not guaranteed to
/// be monotone in K.
pub fn resolve_budget(model: &Model<f32>, samples: &[ShapeSample], ats: &AtsConfig, fraction: f64) -> Result<usize> {
    let dense = dense_macs(model.arch())?.total_macs as f64;
    let target = fraction * dense;
    let mut best = None;
    let mut lowest = f64::INFINITY;
    for k in 1..=model.arch().num_patches() {
        let mean = evaluate(model, samples, &ats.clone().with_budget(k))?.mean_macs;
        lowest = lowest.min(mean);
        if mean <= target {
            best = Some(k);
        }
    }
    best.with_context(|| {
        format!(
            "no budget reaches MAC fraction {fraction}; the lowest achievable is {:.4}",
            lowest / dense
        )
    })
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.weights)?;
    let arch = model.arch().clone();
    let ds = cfg.dataset(&args.data, arch.image_size)?;
    let (mut ats, fraction) = cfg.ats(&args.ats, &arch, seed(&args.common, &cfg), false)?;
    if let Some(f) = fraction {
        ats.sampler.budget = resolve_budget(&model, &ds.val, &ats, f)?;
    }
    let summary = evaluate(&model, &ds.val, &ats)?;
    let dense = dense_macs(&arch)?.total_macs;
    let report = EvalReport::new(&ats, fraction, summary, dense, arch.num_patches());
    write_json(&args.common.out, &report)
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.weights)?;
    let arch = model.arch().clone();
    let n = arch.num_patches();
    let ds = cfg.dataset(&args.data, arch.image_size)?;
    let policies = args
        .policies
        .split(',')
        .map(|p| SamplingPolicy::parse(p.trim()).with_context(|| format!("unknown policy `{p}`")))
        .collect::<Result<Vec<_>>>()?;
    let scorings = args
        .scorings
        .split(',')
        .map(|s| ScoringMethod::parse(s.trim()).with_context(|| format!("unknown scoring `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    let rule = InverseRule::parse(&args.inverse_rule).context("unknown inverse rule")?;
    let ats_args = crate::args::AtsArgs {
        ats_stages: args.ats_stages.clone(),
        k: None,
        policy: None,
        scoring: None,
        inverse_rule: None,
        mac_fraction: None,
    };
    let (base, _) = cfg.ats(&ats_args, &arch, seed(&args.common, &cfg), true)?;
    if !base.is_active() {
        bail!("sweep needs at least one sampling stage");
    }
    let fractions: Option<Vec<f64>> = args.mac_fractions.as_deref().map(parse_list).transpose()?;
    let ks: Vec<usize> = match &args.ks {
        Some(s) => parse_list(s)?,
        None => (1..=n).collect(),
    };
    let budgets = fractions.as_ref().map_or(ks.len(), Vec::len);
    if budgets == 0 || policies.is_empty() || scorings.is_empty() {
        bail!("sweep needs at least one budget, policy and scoring");
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        bail!("budget {k} outside [1, {n}]");
    }
    let mut rows = Vec::new();
    for &policy in &policies {
        for &scoring in &scorings {
            let mut ats = base.clone();
            ats.sampler.policy = policy;
            ats.sampler.inverse_rule = rule;
            ats.scoring = scoring;
            let group: Vec<usize> = match &fractions {
                Some(fs) => fs
                    .iter()
                    .map(|&f| resolve_budget(&model, &ds.val, &ats, f))
                    .collect::<Result<_>>()?,
                None => ks.clone(),
            };
            for k in group {
                let s = evaluate(&model, &ds.val, &ats.clone().with_budget(k))?;
                eprintln!("{:<8} {:<12} K={k:<3} top1 {:.4} macs {:.0}", policy.name(), scoring.name(), s.top1, s.mean_macs);
                rows.push(SweepRow {
                    schema: SCHEMA,
                    policy: policy.name().into(),
                    scoring: scoring.name().into(),
                    k,
                    top1: s.top1,
                    mean_macs: s.mean_macs,
                });
            }
        }
    }
    write_sweep(&args.common.out, &rows)
}

/// Kept patches of one block, upscaled to the image: 1 kept, 0 dropped.
pub fn mask_image(token_ids: &[usize], image_size: usize, patch_size: usize) -> Tensor<f32> {
    let grid = image_size / patch_size;
    let mut kept = vec![false; grid * grid];
    for &id in token_ids.iter().filter(|&&id| id > 0) {
        kept[id - 1] = true;
    }
    let data = (0..image_size * image_size)
        .map(|i| {
            let (y, x) = (i / image_size, i % image_size);
            if kept[(y / patch_size) * grid + x / patch_size] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[image_size, image_size, 1], data).expect("mask shape")
}

pub fn masks(args: &MasksArgs) -> Result<()> {
    let cfg = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.weights)?;
    let arch = model.arch().clone();
    let (ats, fraction) = cfg.ats(&args.ats, &arch, seed(&args.common, &cfg), false)?;
    if fraction.is_some() {
        bail!("--mac-fraction applies to eval and sweep only");
    }
    let inputs: Vec<(String, Option<usize>, Tensor<f32>)> = if args.images.is_empty() {
        let ds = cfg.dataset(&args.data, arch.image_size)?;
        ds.val
            .into_iter()
            .take(args.count)
            .enumerate()
            .map(|(i, s)| (format!("val:{i}"), Some(s.label), s.image))
            .collect()
    } else {
        args.images
            .iter()
            .map(|p| {
                let img = load_pgm(p, Some((arch.image_size, arch.image_size)))
                    .with_context(|| format!("loading {}", p.display()))?;
                Ok((p.display().to_string(), None, img))
            })
            .collect::<Result<_>>()?
    };
    let dir = &args.common.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, (source, label, image)) in inputs.into_iter().enumerate() {
        let trace = model.forward(&image, &ats)?;
        let mut names = Vec::with_capacity(trace.stages.len());
        for st in &trace.stages {
            let name = format!("img{i:04}_block{}.pgm", st.block);
            save_pgm(&mask_image(&st.token_ids, arch.image_size, arch.patch_size), dir.join(&name))?;
            names.push(name);
        }
        let record = MaskTrace {
            schema: SCHEMA,
            source,
            label,
            predicted: trace.predicted(),
            ats: AtsSummary::new(&ats, None),
            stages: trace.stages,
            masks: names,
        };
        write_json(&dir.join(format!("img{i:04}.json")), &record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_marks_kept_patches_only() {
        let m = mask_image(&[0, 1, 4], 4, 2);
        let px = m.data();
        assert_eq!(&px[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&px[12..], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(px.iter().filter(|&&v| v == 1.0).count(), 8);
    }

    #[test]
    fn cls_alone_gives_empty_mask() {
        assert!(mask_image(&[0], 32, 8).data().iter().all(|&v| v == 0.0));
    }
}
