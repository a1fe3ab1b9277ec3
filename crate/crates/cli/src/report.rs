//! Versioned output schemas. Every file is read back and checked after it is
//! written.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ats_core::model::{AtsConfig, StageTrace};
use ats_core::trainer::{EvalSummary, ImageResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtsSummary {
    pub stages: Vec<usize>,
    pub k: usize,
    pub policy: String,
    pub scoring: String,
    pub inverse_rule: String,
    pub mac_fraction: Option<f64>,
}

impl AtsSummary {
    pub fn new(ats: &AtsConfig, mac_fraction: Option<f64>) -> Self {
        Self {
            stages: ats.stages.iter().copied().collect(),
            k: ats.sampler.budget,
            policy: ats.sampler.policy.name().into(),
            scoring: ats.scoring.name().into(),
            inverse_rule: ats.sampler.inverse_rule.name().into(),
            mac_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacStats {
    pub mean: f64,
    pub variance: f64,
    pub min: u64,
    pub p10: u64,
    pub p50: u64,
    pub p90: u64,
    pub max: u64,
    /// Every token kept in every block.
    pub dense: u64,
    /// `mean / dense`.
    pub fraction: f64,
}

impl MacStats {
    pub fn new(totals: &[u64], dense: u64) -> Self {
        let mut sorted = totals.to_vec();
        sorted.sort_unstable();
        let n = sorted.len().max(1) as f64;
        let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n;
        let variance = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        // nearest rank
        let pct = |p: f64| -> u64 {
            if sorted.is_empty() {
                return 0;
            }
            let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
            sorted[rank.min(sorted.len()) - 1]
        };
        Self {
            mean,
            variance,
            min: sorted.first().copied().unwrap_or(0),
            p10: pct(10.0),
            p50: pct(50.0),
            p90: pct(90.0),
            max: sorted.last().copied().unwrap_or(0),
            dense,
            fraction: mean / dense as f64,
        }
    }
}

/// `counts[k]` images realised `K' = k` at `block`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KHistogram {
    pub block: usize,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

impl KHistogram {
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn k_histograms(ats: &AtsConfig, images: &[ImageResult], n_patches: usize) -> Vec<KHistogram> {
    ats.stages
        .iter()
        .enumerate()
        .map(|(s, &block)| {
            let mut counts = vec![0; n_patches + 1];
            let ks: Vec<f64> = images.iter().map(|r| r.k_primes[s] as f64).collect();
            for r in images {
                counts[r.k_primes[s]] += 1;
            }
            let n = ks.len().max(1) as f64;
            let mean = ks.iter().sum::<f64>() / n;
            let variance = ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n;
            KHistogram {
                block,
                counts,
                mean,
                variance,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub ats: AtsSummary,
    pub n_images: usize,
    pub top1: f64,
    pub loss: f64,
    pub macs: MacStats,
    pub k_prime_histograms: Vec<KHistogram>,
    pub images: Vec<ImageResult>,
}

impl EvalReport {
    pub fn new(ats: &AtsConfig, mac_fraction: Option<f64>, summary: EvalSummary, dense: u64, n_patches: usize) -> Self {
        let totals: Vec<u64> = summary.images.iter().map(|r| r.total_macs).collect();
        Self {
            schema: SCHEMA,
            ats: AtsSummary::new(ats, mac_fraction),
            n_images: summary.images.len(),
            top1: summary.top1,
            loss: summary.loss,
            macs: MacStats::new(&totals, dense),
            k_prime_histograms: k_histograms(ats, &summary.images, n_patches),
            images: summary.images,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema: u32,
    pub policy: String,
    pub scoring: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub top1: f64,
    pub mean_macs: f64,
}

/// Trace of one image for `masks`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrace {
    pub schema: u32,
    /// Input path, or `val:<index>` for dataset images.
    pub source: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub ats: AtsSummary,
    pub stages: Vec<StageTrace>,
    /// File names of the per-block masks, in block order.
    pub masks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub schema: u32,
    pub manifest: ats_core::dataset::DatasetManifest,
    pub blob: String,
}

/// Writes pretty JSON, then parses it back and requires an identical value
/// carrying `"schema": 1`.
pub fn write_json<T>(path: &Path, value: &T) -> Result<()>
where
    T: Serialize + DeserializeOwned + PartialEq,
{
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    read_json::<T>(path).and_then(|back| {
        ensure!(&back == value, "{} did not read back identically", path.display());
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match raw.get("schema").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA as u64 => {}
        Some(v) => bail!("{}: unsupported schema {v}", path.display()),
        None => bail!("{}: missing schema field", path.display()),
    }
    serde_json::from_value(raw).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    let back = read_sweep(path)?;
    ensure!(back == rows, "{} did not read back identically", path.display());
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .with_context(|| format!("decoding {}", path.display()))?;
    if let Some(bad) = rows.iter().find(|r| r.schema != SCHEMA) {
        bail!("{}: unsupported schema {}", path.display(), bad.schema);
    }
    Ok(rows)
}

/// One metric-log line as read back from CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub schema: u32,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub mean_k_prime: String,
    pub mean_macs: f64,
}

pub fn write_metrics(path: &Path, csv_text: &str, expected_rows: usize) -> Result<()> {
    fs::write(path, csv_text).with_context(|| format!("writing {}", path.display()))?;
    let rows = read_metrics(path)?;
    ensure!(
        rows.len() == expected_rows,
        "{}: {} rows read back, {expected_rows} written",
        path.display(),
        rows.len()
    );
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricRow>, _>>()
        .with_context(|| format!("decoding {}", path.display()))?;
    if let Some(bad) = rows.iter().find(|r| r.schema != SCHEMA) {
        bail!("{}: unsupported schema {}", path.display(), bad.schema);
    }
    Ok(rows)
}
