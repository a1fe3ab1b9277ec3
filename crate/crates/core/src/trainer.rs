//! Training, fine-tuning and evaluation of the toy ViT.
//!
//! Each image gets its own tape over the shared parameters. Per-image
//! gradients may be computed in parallel but are always summed in batch
//! order, so the result does not depend on the thread count.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ShapeSample;
use crate::error::{Error, Result};
use crate::flops::model_macs;
use crate::model::{AtsConfig, ForwardTrace, Model};
use crate::numerics::{Real, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {base_lr} is not a finite non-negative number")));
        }
        Ok(Self {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    /// Linear warmup to `base_lr`, then half-cosine decay to zero at
    /// `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// AdamW state: bias-corrected moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decay applies to projection matrices only; biases, norm gains and the
/// token/position embeddings are left alone.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    name.ends_with(".weight") && shape.len() == 2
}

impl<T: Real> OptimState<T> {
    pub fn new(model: &Model<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update at learning rate `lr`. All gradients are checked before any
    /// parameter changes.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let params = model.params_mut();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        self.lr = lr;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let (lr_t, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decays(&p.name, p.value.shape()) {
                T::from_f64(1.0 - lr * self.weight_decay)
            } else {
                one
            };
            let value = Arc::make_mut(&mut p.value).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..value.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / T::from_f64(c1);
                let v_hat = v[j] / T::from_f64(c2);
                value[j] *= shrink;
                value[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Drives batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 5e-4,
            weight_decay: 0.05,
            warmup_epochs: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, n_train: usize) -> Result<Schedule> {
        let per_epoch = n_train.div_ceil(self.batch_size);
        Schedule::new(
            self.base_lr,
            per_epoch * self.epochs,
            per_epoch * self.warmup_epochs.min(self.epochs),
        )
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `train` or `val`.
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    /// Mean `K'` of each sampling stage, in block order.
    pub mean_k_prime: Vec<f64>,
    pub mean_macs: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "schema,epoch,split,loss,top1,mean_k_prime,mean_macs";

    pub fn csv_row(&self) -> String {
        let k: Vec<String> = self.mean_k_prime.iter().map(|v| format!("{v:.4}")).collect();
        format!(
            "1,{},{},{:.6},{:.6},{},{:.1}",
            self.epoch,
            self.split,
            self.loss,
            self.top1,
            k.join(";"),
            self.mean_macs
        )
    }
}

/// Outcome of one image under [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub loss: f64,
    pub clutter: f64,
    pub total_macs: u64,
    pub k_primes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub top1: f64,
    pub mean_macs: f64,
    pub images: Vec<ImageResult>,
}

impl EvalSummary {
    pub fn mean_k_prime(&self) -> Vec<f64> {
        mean_k_primes(self.images.iter().map(|r| r.k_primes.as_slice()))
    }

    fn metrics(&self, epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split: "val".into(),
            loss: self.loss,
            top1: self.top1,
            mean_k_prime: self.mean_k_prime(),
            mean_macs: self.mean_macs,
        }
    }
}

fn mean_k_primes<'a>(rows: impl Iterator<Item = &'a [usize]>) -> Vec<f64> {
    let mut sums: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for ks in rows {
        if sums.len() < ks.len() {
            sums.resize(ks.len(), 0.0);
        }
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += k as f64;
        }
        n += 1;
    }
    sums.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Sampler seed for one image, so stochastic policies differ across images
/// but not across runs.
fn per_image(ats: &AtsConfig, stream: u64) -> AtsConfig {
    let mut ats = ats.clone();
    ats.sampler.seed = Rng::derive(ats.sampler.seed, stream).next_u64();
    ats
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

struct ImageGrad<T> {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Tensor<T>>>,
    trace: ForwardTrace,
}

fn image_grad<T: Real>(
    model: &Model<T>,
    sample: &ShapeSample,
    ats: &AtsConfig,
) -> Result<ImageGrad<T>> {
    let mut tape = Tape::new();
    let pv = model.register(&mut tape);
    let image = sample.image.cast::<T>();
    let (logits, trace) = model.forward_on_tape(&mut tape, &pv, &image, ats)?;
    let loss = tape.cross_entropy(logits, sample.label)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    let grads = pv.vars.iter().map(|&v| tape.take_grad(v)).collect();
    Ok(ImageGrad {
        loss: loss_value,
        correct: trace.predicted() == sample.label,
        grads,
        trace,
    })
}

/// Mean loss gradient over a batch, summed in batch order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[&ShapeSample],
    ats: &AtsConfig,
    stream: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    Ok(reduce(model, &per_image_grads(model, batch, ats, stream)?))
}

fn per_image_grads<T: Real>(
    model: &Model<T>,
    batch: &[&ShapeSample],
    ats: &AtsConfig,
    stream: u64,
) -> Result<Vec<ImageGrad<T>>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| image_grad(model, s, &per_image(ats, stream + i as u64)))
        .collect()
}

fn reduce<T: Real>(model: &Model<T>, per: &[ImageGrad<T>]) -> (f64, Vec<Tensor<T>>) {
    let mut grads: Vec<Tensor<T>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    let mut loss = 0.0;
    for r in per {
        loss += r.loss;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
    }
    let inv = T::from_f64(1.0 / per.len() as f64);
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    (loss / per.len() as f64, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochMetrics::CSV_HEADER);
        out.push('\n');
        for m in &self.epochs {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn last_val(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().rev().find(|m| m.split == "val")
    }
}

/// Trains with cross-entropy under the given sampling configuration. After
/// every epoch a `train` and, if `val` is nonempty, a `val` metric line are
/// logged and passed to `on_epoch`.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    train: &[ShapeSample],
    val: &[ShapeSample],
    cfg: &TrainConfig,
    ats: &AtsConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainLog> {
    cfg.validate()?;
    ats.validate(model.arch())?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = cfg.schedule(train.len())?;
    let mut opt = OptimState::new(model, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog { epochs: Vec::new() };
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct, mut macs) = (0.0, 0usize, 0.0);
        let mut ks: Vec<Vec<usize>> = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ShapeSample> = chunk.iter().map(|&i| &train[i]).collect();
            let stream = (step * cfg.batch_size) as u64;
            let per = per_image_grads(model, &batch, ats, stream)?;
            let (loss, grads) = reduce(model, &per);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            for r in &per {
                loss_sum += r.loss;
                correct += r.correct as usize;
                macs += model_macs(&r.trace, model.arch())?.total_macs as f64;
                ks.push(r.trace.k_primes());
            }
            opt.step(model, &grads, schedule.lr_at(step)?)?;
            step += 1;
        }
        let n = train.len() as f64;
        let m = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: correct as f64 / n,
            mean_k_prime: mean_k_primes(ks.iter().map(Vec::as_slice)),
            mean_macs: macs / n,
        };
        on_epoch(&m);
        log.epochs.push(m);
        if !val.is_empty() {
            let m = evaluate(model, val, ats)?.metrics(epoch);
            on_epoch(&m);
            log.epochs.push(m);
        }
    }
    Ok(log)
}

pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &[ShapeSample],
    val: &[ShapeSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, train, val, cfg, &AtsConfig::disabled(), |_| {})
}

/// Continues training a pretrained model with sampling active. The usual
/// protocol sets the budget to `N` so that evaluation can sweep smaller
/// budgets afterwards. Sampled indices act as constants; gradients reach
/// the weights through the refined attention rows and the values.
pub fn fine_tune<T: Real>(
    model: &mut Model<T>,
    ats: &AtsConfig,
    train: &[ShapeSample],
    val: &[ShapeSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, train, val, cfg, ats, |_| {})
}

/// Inference over `samples`; per-image results stay in input order.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[ShapeSample],
    ats: &AtsConfig,
) -> Result<EvalSummary> {
    ats.validate(model.arch())?;
    let images: Vec<ImageResult> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let trace = model.forward(&s.image.cast::<T>(), &per_image(ats, i as u64))?;
            Ok(ImageResult {
                index: i,
                label: s.label,
                predicted: trace.predicted(),
                loss: cross_entropy(&trace.logits, s.label),
                clutter: s.clutter,
                total_macs: model_macs(&trace, model.arch())?.total_macs,
                k_primes: trace.k_primes(),
            })
        })
        .collect::<Result<_>>()?;
    let n = images.len().max(1) as f64;
    Ok(EvalSummary {
        loss: images.iter().map(|r| r.loss).sum::<f64>() / n,
        top1: images.iter().filter(|r| r.predicted == r.label).count() as f64 / n,
        mean_macs: images.iter().map(|r| r.total_macs as f64).sum::<f64>() / n,
        images,
    })
}
