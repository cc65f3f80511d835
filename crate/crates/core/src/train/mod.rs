//! Desk-scale denoising task, stacked attention models, and the training loop
//! used to compare variants and run ablations.

mod ablation;
mod model;
mod optim;
mod task;

pub use ablation::{
    ablation_plan, ablation_sweep, row_costs, run_ablation_row, AblationKind, AblationRow, AblationTable, ALPHA_GRID,
    RETAINED_GRID,
};
pub use model::{BlockSpec, FeedForward, Model, ModelSpec, ModelTrace};
pub use optim::{Optimizer, OptimizerKind};
pub use task::{make_task, mean_abs_correlation, Sample, SyntheticTask, TaskSpec};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Tape;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples per step; `0` means the whole training split.
    pub batch_size: usize,
    /// Validation runs every this many steps and after the last step.
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optimizer: OptimizerKind::default(),
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            batch_size: 8,
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub settings: TrainSettings,
    /// Mean batch loss before each update, indexed by step.
    pub train_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Attention-layer parameter count from the cost model.
    pub attention_params: u64,
    /// Attention-layer forward FLOPs per input from the cost model.
    pub attention_flops: u64,
    pub final_val_loss: f64,
    pub final_val_psnr: f64,
    /// Not serialized so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// `10·log10(range² / mse)`.
pub fn psnr(mse: f64, data_range: f64) -> f64 {
    10.0 * (data_range * data_range / mse).log10()
}

/// Mean MSE of `model` over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.forward(&s.input)?;
        let diff = crate::ops::sub(&out, &s.target)?;
        total += diff.sum_squares() / diff.numel() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains a freshly initialised model on `task` and returns it with its log.
///
/// Deterministic: the model initialisation and the batch order come from
/// separate streams of `settings.seed`, and per-sample gradients are summed in
/// a fixed order.
pub fn train(spec: &ModelSpec, task: &SyntheticTask, settings: &TrainSettings) -> Result<(Model, TrainLog)> {
    if !(settings.lr.is_finite() && settings.lr >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be finite and >= 0, got {}",
            settings.lr
        )));
    }
    if settings.eval_every == 0 {
        return Err(Error::Config("eval_every must be positive".into()));
    }
    spec.validate()?;
    if spec.channels() != task.spec.channels || spec.spatial() != (task.spec.height, task.spec.width) {
        return Err(Error::Config(format!(
            "model dims ({} channels, {:?}) do not match task ({} channels, {}x{})",
            spec.channels(),
            spec.spatial(),
            task.spec.channels,
            task.spec.height,
            task.spec.width
        )));
    }

    let started = Instant::now();
    let mut model = Model::init(spec, settings.seed)?;
    let mut optimizer = Optimizer::new(settings.optimizer, settings.lr);
    let mut batch_rng = rng::seeded(settings.seed, rng::stream::BATCHES);
    let batch = if settings.batch_size == 0 {
        task.train.len()
    } else {
        settings.batch_size.min(task.train.len())
    };

    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut cursor = order.len();
    let mut train_loss = Vec::with_capacity(settings.steps);
    let mut evals = Vec::new();
    let mut last_good = None;

    for step in 0..settings.steps {
        let mut indices = Vec::with_capacity(batch);
        while indices.len() < batch {
            if cursor == order.len() {
                if batch < order.len() {
                    order.shuffle(&mut batch_rng);
                }
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }

        let mut grad_sum: Option<Vec<crate::tensor::Tensor>> = None;
        let mut loss_sum = 0.0;
        for &i in &indices {
            let sample = &task.train[i];
            let mut tape = Tape::new();
            let trace = model.record(&mut tape, &sample.input)?;
            let target = tape.leaf(sample.target.clone());
            let loss = tape.mse(trace.output, target)?;
            loss_sum += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let per_sample: Vec<_> = trace.params.iter().map(|&v| grads.wrt(&tape, v)).collect();
            match &mut grad_sum {
                None => grad_sum = Some(per_sample),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&per_sample) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let loss = loss_sum / indices.len() as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step,
                last_good_step: last_good,
                loss,
            });
        }
        train_loss.push(loss);
        last_good = Some(step);

        let scale = 1.0 / indices.len() as f64;
        let grads: Vec<_> = grad_sum
            .expect("batch is non-empty")
            .into_iter()
            .map(|g| crate::ops::scale(&g, scale))
            .collect();
        optimizer.step(&mut model.params_mut(), &grads);

        if (step + 1) % settings.eval_every == 0 || step + 1 == settings.steps {
            let val_loss = evaluate(&model, &task.val)?;
            if !val_loss.is_finite() || val_loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    step,
                    last_good_step: last_good,
                    loss: val_loss,
                });
            }
            evals.push(EvalPoint {
                step: step + 1,
                val_loss,
                val_psnr: psnr(val_loss, task.data_range),
            });
        }
    }

    let (final_val_loss, final_val_psnr) = match evals.last() {
        Some(e) => (e.val_loss, e.val_psnr),
        None => {
            let l = evaluate(&model, &task.val)?;
            (l, psnr(l, task.data_range))
        }
    };
    let log = TrainLog {
        model: spec.clone(),
        task: task.spec.clone(),
        settings: settings.clone(),
        train_loss,
        evals,
        attention_params: spec.attention_params()?,
        attention_flops: spec.attention_flops()?,
        final_val_loss,
        final_val_psnr,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, log))
}
