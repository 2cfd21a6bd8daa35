use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{LslaError, Result};
use crate::harness::dataset::Dataset;
use crate::model::{model_forward_vars, Model, ModelConfig};
use crate::numcore::rng::{seeded, SeededRng};
use crate::numcore::{adamw_step, AdamState, AdamWConfig, Tape, Tensor};

pub const LOG_HEADER: &str = "epoch,train_loss,eval_top1,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub random_crop_pad: usize,
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 2.5e-4,
            weight_decay: 0.05,
            warmup_epochs: 3,
            seed: 42,
            random_crop_pad: 4,
            horizontal_flip: true,
        }
    }
}

impl TrainConfig {
    /// Defaults with `epochs` and warmup at a tenth of them (rounded up).
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            warmup_epochs: epochs.div_ceil(10),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LslaError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(LslaError::Config(format!(
                "need lr > 0 and weight decay >= 0, got {} and {}",
                self.base_lr, self.weight_decay
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(LslaError::Config("warmup longer than training".into()));
        }
        Ok(())
    }

    /// Linear warmup to `base_lr` over the warmup steps, then cosine decay
    /// towards zero. `step` counts from 0.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            self.base_lr * (step + 1) as f64 / warm as f64
        } else {
            let t = (step - warm) as f64 / (total - warm).max(1) as f64;
            0.5 * self.base_lr * (1.0 + (PI * t.min(1.0)).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    /// First epoch (1-based) whose eval accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|r| r.eval_top1 >= threshold).map(|r| r.epoch)
    }
}

/// CSV log with [`LOG_HEADER`]; floats carry 17 significant digits.
pub fn log_csv(log: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        writeln!(s, "{},{:.16e},{:.16e},{:.16e}", r.epoch, r.train_loss, r.eval_top1, r.lr).expect("String write");
    }
    s
}

/// Zero-pads by `pad`, crops back to the original size at a random offset
/// and optionally mirrors left-right. `image` is `[h, w, c]`.
pub fn augment(image: &[f64], h: usize, w: usize, c: usize, pad: usize, flip: bool, rng: &mut SeededRng) -> Vec<f64> {
    let (dy, dx) = if pad > 0 {
        (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
    } else {
        (pad, pad)
    };
    let mirror = flip && rng.random_bool(0.5);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = y as isize + dy as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let xx = if mirror { w - 1 - x } else { x };
            let sx = xx as isize + dx as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

fn check_compat(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let shape = data.samples[0].image.shape();
    if shape != [cfg.image_size, cfg.image_size, cfg.in_channels] {
        return Err(LslaError::Shape(format!(
            "dataset images {shape:?} do not match the model input {0}x{0}x{1}",
            cfg.image_size, cfg.in_channels
        )));
    }
    if let Some(label) = data.samples.iter().map(|s| s.label).find(|&l| l >= cfg.num_classes) {
        return Err(LslaError::LabelOutOfRange {
            label,
            classes: cfg.num_classes,
        });
    }
    Ok(())
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy of `model` on `data`, evaluated in fixed-size batches.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    check_compat(&model.config, data)?;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a freshly initialized model. Initialization draws from stream 0
/// of the seeded generator, shuffling and augmentation from stream 1.
pub fn train(cfg: &ModelConfig, tc: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<TrainOutcome> {
    train_with_progress(cfg, tc, train_set, eval_set, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_progress(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    tc.validate()?;
    check_compat(cfg, train_set)?;
    check_compat(cfg, eval_set)?;
    let mut model = Model::new(cfg.clone(), tc.seed)?;
    let mut rng = seeded(tc.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(&model.params);
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.in_channels);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * h * w * c);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set.samples[i];
                data.extend(augment(s.image.data(), h, w, c, tc.random_crop_pad, tc.horizontal_flip, &mut rng));
                labels.push(s.label);
            }
            let x = Tensor::new(&[batch.len(), h, w, c], data)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let xv = tape.constant(&x);
            let (logits, _) = model_forward_vars(&mut tape, cfg, &bound, xv, None).map_err(|e| match e {
                LslaError::DegenerateRow { row } => {
                    LslaError::NonFinite(format!("attention row {row} overflowed at epoch {epoch}, step {step}"))
                }
                e => e,
            })?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(LslaError::NonFinite(format!("training loss {value} at epoch {epoch}, step {step}")));
            }
            tape.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&tape, &bound)?;
            lr = tc.lr_at(step, steps_per_epoch);
            let opt = AdamWConfig {
                lr,
                weight_decay: tc.weight_decay,
                ..AdamWConfig::default()
            };
            adamw_step(&mut model.params, &mut state, &opt)?;
            if let Some((name, _)) = model.params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(LslaError::NonFinite(format!("parameter {name} after epoch {epoch}, step {step}")));
            }
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let row = LogRow {
            epoch,
            train_loss: loss_sum / n as f64,
            eval_top1: evaluate(&model, eval_set)?,
            lr,
        };
        on_epoch(&row);
        log.push(row);
    }
    model.params.zero_grads();
    Ok(TrainOutcome { model, log })
}
