//! Run configuration: an optional JSON file overridden by flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ats_core::ats::{InverseRule, SamplerConfig, SamplingPolicy, ScoringMethod};
use ats_core::dataset::{generate, load_dataset, Dataset, DatasetManifest};
use ats_core::model::{ArchConfig, AtsConfig};
use ats_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{AtsArgs, DataArgs, TrainingArgs};

pub const SCHEMA: u32 = 1;

/// Contents of `--config`. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub schema: Option<u32>,
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub data: Option<DatasetManifest>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub ats: Option<AtsSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtsSection {
    pub stages: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub policy: Option<String>,
    pub scoring: Option<String>,
    pub inverse_rule: Option<String>,
    pub mac_fraction: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(v) = cfg.schema {
            if v != SCHEMA {
                bail!("{}: unsupported schema {v}, expected {SCHEMA}", path.display());
            }
        }
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchConfig {
        self.arch.clone().unwrap_or_else(ArchConfig::toy)
    }

    pub fn manifest(&self, args: &DataArgs) -> DatasetManifest {
        let mut m = self
            .data
            .clone()
            .unwrap_or_else(|| DatasetManifest::new(1, 2048, 512));
        if let Some(s) = args.data_seed {
            m.seed = s;
        }
        if let Some(n) = args.n_train {
            m.n_train = n;
        }
        if let Some(n) = args.n_val {
            m.n_val = n;
        }
        m
    }

    pub fn dataset(&self, args: &DataArgs, image_size: usize) -> Result<Dataset> {
        let ds = match &args.data {
            Some(path) => {
                if args.data_seed.is_some() || args.n_train.is_some() || args.n_val.is_some() {
                    bail!("--data cannot be combined with --data-seed, --n-train or --n-val");
                }
                load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?
            }
            None => generate(&self.manifest(args))?,
        };
        if ds.manifest.image_size != image_size {
            bail!(
                "dataset images are {0}x{0}, model expects {1}x{1}",
                ds.manifest.image_size,
                image_size
            );
        }
        Ok(ds)
    }

    pub fn training(&self, args: &TrainingArgs, seed: u64) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_default();
        t.seed = seed;
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.lr {
            t.base_lr = v;
        }
        if let Some(v) = args.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = args.warmup_epochs {
            t.warmup_epochs = v;
        }
        t
    }

    /// Sampling setup plus the requested MAC fraction, if any.
    /// `default_stages` applies when neither the flags nor the file name any.
    pub fn ats(
        &self,
        args: &AtsArgs,
        arch: &ArchConfig,
        seed: u64,
        default_stages: bool,
    ) -> Result<(AtsConfig, Option<f64>)> {
        let file = self.ats.clone().unwrap_or_default();
        let stages = match (&args.ats_stages, &file.stages) {
            (Some(s), _) => parse_list(s)?,
            (None, Some(s)) => s.clone(),
            (None, None) if default_stages => AtsConfig::toy(arch).stages.into_iter().collect(),
            (None, None) => Vec::new(),
        };
        let policy = args.policy.as_ref().or(file.policy.as_ref());
        let scoring = args.scoring.as_ref().or(file.scoring.as_ref());
        let rule = args.inverse_rule.as_ref().or(file.inverse_rule.as_ref());
        let ats = AtsConfig {
            stages: stages.into_iter().collect::<BTreeSet<_>>(),
            sampler: SamplerConfig {
                budget: args.k.or(file.k).unwrap_or(arch.num_patches()),
                inverse_rule: parse_named(rule, InverseRule::parse, "inverse rule")?.unwrap_or_default(),
                policy: parse_named(policy, SamplingPolicy::parse, "policy")?.unwrap_or_default(),
                seed,
            },
            scoring: parse_named(scoring, ScoringMethod::parse, "scoring")?.unwrap_or_default(),
        };
        ats.validate(arch)?;
        let fraction = args.mac_fraction.or(file.mac_fraction);
        if let Some(f) = fraction {
            if !(f > 0.0 && f <= 1.0) {
                bail!("--mac-fraction must lie in (0, 1], got {f}");
            }
            if !ats.is_active() {
                bail!("--mac-fraction needs at least one sampling stage");
            }
        }
        Ok((ats, fraction))
    }
}

fn parse_named<T>(value: Option<&String>, parse: fn(&str) -> Option<T>, what: &str) -> Result<Option<T>> {
    value
        .map(|v| parse(v).with_context(|| format!("unknown {what} `{v}`")))
        .transpose()
}

/// Comma-separated list; the empty string is the empty list.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().with_context(|| format!("invalid list item `{t}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ats_args() -> AtsArgs {
        AtsArgs {
            ats_stages: None,
            k: None,
            policy: None,
            scoring: None,
            inverse_rule: None,
            mac_fraction: None,
        }
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("2,3, 4").unwrap(), vec![2, 3, 4]);
        assert!(parse_list::<usize>("").unwrap().is_empty());
        assert!(parse_list::<usize>("2,x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let arch = ArchConfig::toy();
        let cfg = FileConfig {
            ats: Some(AtsSection {
                stages: Some(vec![1]),
                k: Some(4),
                policy: Some("topk".into()),
                ..Default::default()
            }),
            ..Default::default()
        };
        let (ats, _) = cfg.ats(&ats_args(), &arch, 0, false).unwrap();
        assert_eq!(ats.stages, [1].into());
        assert_eq!(ats.sampler.budget, 4);
        assert_eq!(ats.sampler.policy, SamplingPolicy::TopK);
        let mut args = ats_args();
        args.k = Some(9);
        args.ats_stages = Some("".into());
        let (ats, _) = cfg.ats(&args, &arch, 0, true).unwrap();
        assert!(!ats.is_active());
        assert_eq!(ats.sampler.budget, 9);
    }

    #[test]
    fn defaults() {
        let arch = ArchConfig::toy();
        let (ats, f) = FileConfig::default().ats(&ats_args(), &arch, 0, true).unwrap();
        assert_eq!(ats.stages, [2, 3, 4, 5].into());
        assert_eq!(ats.sampler.budget, 16);
        assert_eq!(f, None);
    }

    #[test]
    fn rejects_bad_budget_and_fraction() {
        let arch = ArchConfig::toy();
        let mut args = ats_args();
        args.k = Some(17);
        assert!(FileConfig::default().ats(&args, &arch, 0, true).is_err());
        let mut args = ats_args();
        args.mac_fraction = Some(0.5);
        assert!(FileConfig::default().ats(&args, &arch, 0, false).is_err());
    }

    #[test]
    fn unknown_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"schema": 2}"#).unwrap();
        assert!(FileConfig::load(Some(&p)).is_err());
        fs::write(&p, r#"{"schema": 1, "bogus": 3}"#).unwrap();
        assert!(FileConfig::load(Some(&p)).is_err());
    }
}
