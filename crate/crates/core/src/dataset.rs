//! Synthetic four-class shape images with per-image background clutter, and
//! binary PGM I/O.
//!
//! Classes: 0 horizontal bar, 1 vertical bar, 2 cross, 3 filled disk. Each
//! image is 32x32 grayscale in `[0, 1]` with background 0. Clutter is drawn
//! per image from `Beta(alpha, beta)` and controls how many dim rectangles and
//! speckles are scattered over the background, giving a spread of easy and
//! hard images. Sample `i` of a dataset is rendered from its own derived
//! generator, so generation order and thread count never matter.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["h-bar", "v-bar", "cross", "blob"];
pub const DATASET_MAGIC: &[u8] = b"ATSD1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub clutter_alpha: f64,
    pub clutter_beta: f64,
    /// Overrides the Beta draw with a constant clutter level.
    #[serde(default)]
    pub fixed_clutter: Option<f64>,
}

fn default_size() -> usize {
    32
}

impl DatasetManifest {
    pub fn new(seed: u64, n_train: usize, n_val: usize) -> Self {
        Self {
            seed,
            n_train,
            n_val,
            image_size: 32,
            clutter_alpha: 0.8,
            clutter_beta: 0.8,
            fixed_clutter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.clutter_alpha <= 0.0 || self.clutter_beta <= 0.0 {
            return Err(Error::Config("clutter Beta parameters must be positive".into()));
        }
        if let Some(c) = self.fixed_clutter {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config("fixed clutter must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `size x size x 1`
    pub image: Tensor<f32>,
    pub label: usize,
    pub clutter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<ShapeSample>,
    pub val: Vec<ShapeSample>,
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![0.0; size * size],
        }
    }

    /// Paints `[r0, r1) x [c0, c1)`, clipped, keeping the brighter value.
    fn rect(&mut self, r0: i64, r1: i64, c0: i64, c1: i64, v: f32) {
        let s = self.size as i64;
        for r in r0.max(0)..r1.min(s) {
            for c in c0.max(0)..c1.min(s) {
                let p = &mut self.px[(r * s + c) as usize];
                *p = p.max(v);
            }
        }
    }

    fn disk(&mut self, cr: f64, cc: f64, radius: f64, v: f32) {
        let s = self.size;
        for r in 0..s {
            for c in 0..s {
                let (dr, dc) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
                if dr * dr + dc * dc <= radius * radius {
                    let p = &mut self.px[r * s + c];
                    *p = p.max(v);
                }
            }
        }
    }
}

fn int_in(rng: &mut Rng, lo: i64, hi: i64) -> i64 {
    lo + rng.below((hi - lo + 1) as usize) as i64
}

/// Renders one image of class `label` at the given clutter level.
pub fn render(label: usize, clutter: f64, size: usize, rng: &mut Rng) -> Tensor<f32> {
    assert!(label < NUM_CLASSES, "label {label} out of range");
    let mut canvas = Canvas::new(size);
    let s = size as i64;
    let clutter = clutter.clamp(0.0, 1.0);

    let blobs = (clutter * 48.0).round() as usize;
    for _ in 0..blobs {
        let (h, w) = (int_in(rng, 1, 3), int_in(rng, 1, 3));
        let (r, c) = (int_in(rng, 0, s - 1), int_in(rng, 0, s - 1));
        let v = rng.uniform_in(0.2, 0.6) as f32;
        canvas.rect(r, r + h, c, c + w, v);
    }
    let speckle = clutter * 0.1;
    for i in 0..size * size {
        if rng.uniform() < speckle {
            let v = rng.uniform_in(0.1, 0.5) as f32;
            canvas.px[i] = canvas.px[i].max(v);
        }
    }

    let jitter = (s / 6).max(1);
    let cy = s / 2 + int_in(rng, -jitter, jitter);
    let cx = s / 2 + int_in(rng, -jitter, jitter);
    let v = rng.uniform_in(0.75, 1.0) as f32;
    let bar = |canvas: &mut Canvas, rng: &mut Rng, horizontal: bool, min_len: i64, max_len: i64| {
        let len = int_in(rng, min_len, max_len);
        let th = int_in(rng, 2, 4);
        let (r0, c0) = (cy - th / 2, cx - len / 2);
        if horizontal {
            canvas.rect(r0, r0 + th, c0, c0 + len, v);
        } else {
            canvas.rect(cx - len / 2, cx - len / 2 + len, cy - th / 2, cy - th / 2 + th, v);
        }
    };
    let scale = s as f64 / 32.0;
    let (lo, hi) = ((14.0 * scale) as i64, (22.0 * scale) as i64);
    match label {
        0 => bar(&mut canvas, rng, true, lo, hi),
        1 => bar(&mut canvas, rng, false, lo, hi),
        2 => {
            let (lo, hi) = ((12.0 * scale) as i64, (20.0 * scale) as i64);
            bar(&mut canvas, rng, true, lo, hi);
            bar(&mut canvas, rng, false, lo, hi);
        }
        _ => {
            let radius = rng.uniform_in(4.0, 6.0) * scale;
            canvas.disk(cy as f64, cx as f64, radius, v);
        }
    }
    Tensor::new(&[size, size, 1], canvas.px).expect("canvas shape")
}

fn sample(manifest: &DatasetManifest, index: usize, label: usize) -> ShapeSample {
    let mut rng = Rng::derive(manifest.seed, index as u64 + 1);
    let clutter = match manifest.fixed_clutter {
        Some(c) => c,
        None => rng.beta(manifest.clutter_alpha, manifest.clutter_beta),
    };
    let image = render(label, clutter, manifest.image_size, &mut rng);
    ShapeSample {
        image,
        label,
        clutter,
    }
}

/// Deterministic train/val split. Labels cycle through the classes inside
/// each split, so class counts differ by at most one.
pub fn generate(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let train = (0..manifest.n_train)
        .into_par_iter()
        .map(|i| sample(manifest, i, i % NUM_CLASSES))
        .collect();
    let val = (0..manifest.n_val)
        .into_par_iter()
        .map(|j| sample(manifest, manifest.n_train + j, j % NUM_CLASSES))
        .collect();
    Ok(Dataset {
        manifest: manifest.clone(),
        train,
        val,
    })
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    manifest: DatasetManifest,
    labels: Vec<usize>,
    clutter: Vec<f64>,
}

/// Caches a dataset: `ATSD1\n`, one JSON line (manifest, labels and clutter
/// for train then val), `\n`, then every image as little-endian `f32`.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let all: Vec<&ShapeSample> = ds.train.iter().chain(&ds.val).collect();
    let header = BlobHeader {
        manifest: ds.manifest.clone(),
        labels: all.iter().map(|s| s.label).collect(),
        clutter: all.iter().map(|s| s.clutter).collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for s in &all {
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(DATASET_MAGIC) {
        return Err(Error::BadMagic { expected: "ATSD1" });
    }
    let rest = &bytes[DATASET_MAGIC.len()..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("dataset header is not terminated".into()))?;
    let header: BlobHeader =
        serde_json::from_slice(&rest[..end]).map_err(|e| Error::Header(e.to_string()))?;
    let m = &header.manifest;
    m.validate()?;
    let count = m.n_train + m.n_val;
    if header.labels.len() != count || header.clutter.len() != count {
        return Err(Error::Header("label/clutter lists do not match the manifest".into()));
    }
    let per = m.image_size * m.image_size;
    let payload = &rest[end + 1..];
    let expected = count * per * 4;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingData {
            expected,
            found: payload.len(),
        });
    }
    let mut samples = payload
        .chunks_exact(per * 4)
        .zip(header.labels.iter().zip(&header.clutter))
        .map(|(raw, (&label, &clutter))| {
            let px = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(ShapeSample {
                image: Tensor::new(&[m.image_size, m.image_size, 1], px)?,
                label,
                clutter,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let val = samples.split_off(m.n_train);
    Ok(Dataset {
        manifest: header.manifest,
        train: samples,
        val,
    })
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm(format!("invalid {what}")))
}

/// Parses a binary (P5) PGM with maxval 255 into `[H, W, 1]` values in
/// `[0, 1]`. `expected` checks `(width, height)`.
pub fn parse_pgm(bytes: &[u8], expected: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::BadMagic { expected: "P5" });
    }
    let w = pgm_number(bytes, &mut pos, "width")?;
    let h = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Pgm(format!("maxval {maxval} unsupported, expected 255")));
    }
    if let Some((ew, eh)) = expected {
        if (w, h) != (ew, eh) {
            return Err(Error::Pgm(format!("image is {w}x{h}, expected {ew}x{eh}")));
        }
    }
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Pgm(format!("pixel data shorter than {w}x{h}")))?;
    Tensor::new(&[h, w, 1], data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn load_pgm(path: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    parse_pgm(&fs::read(path)?, expected)
}

/// Encodes a `[H, W]` or `[H, W, 1]` tensor of `[0, 1]` values as P5.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = image.shape();
    let (h, w) = match shape {
        [h, w] | [h, w, 1] => (*h, *w),
        _ => {
            return Err(Error::Pgm(format!("cannot encode shape {shape:?} as grayscale")));
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn save_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}
