//! Synthetic denoising task.
//!
//! Each clean sample mixes a few smooth sinusoidal source images into every
//! channel through a mixing matrix drawn per sample, so channels are strongly
//! correlated but which channels go together changes from sample to sample. The corrupted input applies a random per-channel gain and adds
//! Gaussian noise:
//!
//! `input_c = clean_c · (1 + gain_jitter·σ·g_c) + σ·ε`
//!
//! with `g_c, ε ~ N(0, 1)`. The gain spread is tied to `σ`, so `σ = 0` yields
//! inputs identical to their targets.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_CHANNELS: usize = 32;
pub const MAX_SPATIAL: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of latent source images mixed into the channels.
    pub sources: usize,
    pub noise_std: f64,
    /// Per-channel gain standard deviation in units of `noise_std`.
    pub gain_jitter: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            seed: 0,
            channels: 16,
            height: 8,
            width: 8,
            sources: 3,
            noise_std: 0.4,
            gain_jitter: 1.0,
            train_size: 2048,
            val_size: 64,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels < 2 || self.channels > MAX_CHANNELS {
            return fail(format!(
                "task channels must be in 2..={MAX_CHANNELS}, got {}",
                self.channels
            ));
        }
        if self.height == 0 || self.width == 0 || self.height > MAX_SPATIAL || self.width > MAX_SPATIAL {
            return fail(format!(
                "task spatial dims must be in 1..={MAX_SPATIAL}, got {}x{}",
                self.height, self.width
            ));
        }
        if self.sources == 0 {
            return fail("task needs at least one source".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.gain_jitter.is_finite() && self.gain_jitter >= 0.0) {
            return fail(format!("gain_jitter must be finite and >= 0, got {}", self.gain_jitter));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return fail("train_size and val_size must be positive".into());
        }
        Ok(())
    }
}

/// One input/target pair, both `[channels, H·W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// `max − min` over all clean validation targets; the PSNR peak value.
    pub data_range: f64,
}

impl SyntheticTask {
    /// Mean absolute off-diagonal Pearson correlation between clean channels,
    /// averaged over the training samples.
    pub fn mean_channel_correlation(&self) -> f64 {
        let total: f64 = self.train.iter().map(|s| mean_abs_correlation(&s.target)).sum();
        total / self.train.len() as f64
    }
}

/// Mean absolute off-diagonal correlation between rows of `m`.
/// Constant rows contribute zero.
pub fn mean_abs_correlation(m: &Tensor) -> f64 {
    let (rows, cols) = m.dims2().expect("matrix");
    let centred: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let r = m.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            r.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            if i == j || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            total += (dot / (norms[i] * norms[j])).abs();
        }
    }
    total / (rows * (rows - 1)) as f64
}

fn source_image<R: rand::Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let fy = rng.random_range(0.25..1.25);
    let fx = rng.random_range(0.25..1.25);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.5..1.5);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t = 2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
            out.push(amp * t.sin());
        }
    }
    out
}

fn make_sample<R: rand::Rng>(spec: &TaskSpec, rng: &mut R) -> Sample {
    let hw = spec.height * spec.width;
    let n = spec.channels;
    let mixing = Tensor::randn(&[n, spec.sources], 1.0 / (spec.sources as f64).sqrt(), rng).expect("shape");
    let sources: Vec<Vec<f64>> = (0..spec.sources)
        .map(|_| source_image(spec.height, spec.width, rng))
        .collect();
    let mut clean = vec![0.0; n * hw];
    for c in 0..n {
        for (j, src) in sources.iter().enumerate() {
            let m = mixing.at2(c, j);
            for (o, s) in clean[c * hw..(c + 1) * hw].iter_mut().zip(src) {
                *o += m * s;
            }
        }
    }
    let sigma = spec.noise_std;
    let mut noisy = clean.clone();
    for c in 0..n {
        let g: f64 = StandardNormal.sample(rng);
        let gain = 1.0 + spec.gain_jitter * sigma * g;
        for v in &mut noisy[c * hw..(c + 1) * hw] {
            let e: f64 = StandardNormal.sample(rng);
            *v = *v * gain + sigma * e;
        }
    }
    Sample {
        input: Tensor::new(&[n, hw], noisy).expect("shape"),
        target: Tensor::new(&[n, hw], clean).expect("shape"),
    }
}

/// Builds the dataset for `spec`. Identical specs give bit-identical data.
pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed, rng::stream::TASK);
    let train: Vec<Sample> = (0..spec.train_size).map(|_| make_sample(spec, &mut rng)).collect();
    let val: Vec<Sample> = (0..spec.val_size).map(|_| make_sample(spec, &mut rng)).collect();
    let (lo, hi) = val
        .iter()
        .flat_map(|s| s.target.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let data_range = if hi > lo { hi - lo } else { 1.0 };
    Ok(SyntheticTask {
        spec: spec.clone(),
        train,
        val,
        data_range,
    })
}
