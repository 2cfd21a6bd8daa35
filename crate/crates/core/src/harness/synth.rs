use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LslaError, Result};
use crate::harness::dataset::{ingest, write_dataset, Dataset, Sample};
use crate::numcore::rng::seeded;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size,
            seed,
        }
    }

    /// Samples per class that go to the training split.
    pub fn train_per_class(&self) -> usize {
        self.per_class * 3 / 4
    }
}

const AMPLITUDE: f64 = 0.45;
const NOISE_STD: f64 = 0.05;
const TINT: f64 = 0.004;
const ANGLE_JITTER: f64 = 0.08;
const FREQ_JITTER: f64 = 0.06;

/// Per-sample grating parameters: angle, cycles across the image, phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grating {
    pub theta: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl Grating {
    /// Class `c` sits at angle `pi * c / classes` with `3 + 2c` cycles; the
    /// sample jitters both slightly and draws a uniform phase.
    pub fn draw(cfg: &SynthConfig, class: usize, rng: &mut impl Rng) -> Self {
        Self {
            theta: PI * class as f64 / cfg.classes as f64 + rng.random_range(-ANGLE_JITTER..ANGLE_JITTER),
            cycles: (3.0 + 2.0 * class as f64) * (1.0 + rng.random_range(-FREQ_JITTER..FREQ_JITTER)),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Same grating with the opposite sign.
    pub fn inverted(self) -> Self {
        Self {
            phase: self.phase + PI,
            ..self
        }
    }
}

/// Renders a grating plus a faint per-class colour tint and pixel noise,
/// clipped to `[0, 1]`.
pub fn synth_image(cfg: &SynthConfig, class: usize, grating: Grating, rng: &mut impl Rng) -> Tensor {
    let n = cfg.size;
    let Grating { theta, cycles, phase } = grating;
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * cycles / n as f64;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let tint = [0, 1, 2].map(|ch| TINT * (2.0 * PI * (class as f64 / cfg.classes as f64 + ch as f64 / 3.0)).cos());
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let g = 0.5 + AMPLITUDE * (k * (x as f64 * c + y as f64 * s) + phase).sin();
            for t in tint {
                data.push((g + t + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[n, n, 3], data).expect("shape matches data")
}

/// Generates the dataset in memory: `(train, eval)` sample lists, class by
/// class, the first three quarters of each class going to `train`. Samples
/// come in pairs of inverted gratings, so a class mean holds no grating.
pub fn synth_samples(cfg: &SynthConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if cfg.classes < 2 || cfg.per_class < 4 || !cfg.per_class.is_multiple_of(8) || cfg.size == 0 || !cfg.size.is_multiple_of(4) {
        return Err(LslaError::Config(format!(
            "synthetic set needs >= 2 classes, a multiple of 8 samples per class and a size divisible by 4, got {cfg:?}"
        )));
    }
    let mut rng = seeded(cfg.seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in 0..cfg.classes {
        let mut grating: Option<Grating> = None;
        for i in 0..cfg.per_class {
            let g = match grating {
                Some(prev) if i % 2 == 1 => prev.inverted(),
                _ => Grating::draw(cfg, class, &mut rng),
            };
            grating = Some(g);
            let sample = Sample {
                file: format!("c{class}_{i:04}.lslt"),
                label: class,
                image: synth_image(cfg, class, g, &mut rng),
            };
            if i < cfg.train_per_class() {
                train.push(sample);
            } else {
                eval.push(sample);
            }
        }
    }
    Ok((train, eval))
}

/// Writes `root/train` and `root/eval` and returns them as ingested.
pub fn synth_dataset(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    let root = root.as_ref();
    let (train, eval) = synth_samples(cfg)?;
    write_dataset(root.join("train"), &train)?;
    write_dataset(root.join("eval"), &eval)?;
    Ok((ingest(root.join("train"))?, ingest(root.join("eval"))?))
}

/// Accuracy on `eval` of assigning each image to the class whose mean
/// training image is nearest in Euclidean distance.
pub fn nearest_centroid_accuracy(train: &Dataset, eval: &Dataset) -> Result<f64> {
    let classes = train.classes.max(eval.classes);
    let dim = train.samples[0].image.numel();
    if eval.samples[0].image.numel() != dim {
        return Err(LslaError::Shape("train and eval images differ in size".into()));
    }
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in &train.samples {
        counts[s.label] += 1;
        sums[s.label].iter_mut().zip(s.image.data()).for_each(|(a, b)| *a += b);
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = eval
        .samples
        .iter()
        .filter(|s| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(c, m)| m.as_ref().map(|m| (c, m)))
                .map(|(c, m)| (c, m.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((usize::MAX, f64::INFINITY), |best, (c, d)| if d < best.1 { (c, d) } else { best });
            best.0 == s.label
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}
