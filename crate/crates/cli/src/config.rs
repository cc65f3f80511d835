//! JSON config files. Each subcommand reads a flat object whose keys are its
//! long flag names in snake_case; unknown keys are rejected. A flag given on
//! the command line wins over the file, which wins over the built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use glmha::attention::Variant;
use glmha::train::AblationKind;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::args::{
    AblateArgs, BenchArgs, GradcheckArgs, Hw, ModelArgs, OptimArgs, OptimizerChoice, Output, ParallelOutput,
    SpectraArgs, TaskArgs, TrainArgs,
};
use crate::error::{CliError, CliResult};

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn set<T>(m: &ArgMatches, id: &str, slot: &mut T, file: Option<T>) {
    if let Some(v) = file {
        if m.value_source(id) != Some(ValueSource::CommandLine) {
            *slot = v;
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputFile {
    out: Option<PathBuf>,
}

fn merge_output(m: &ArgMatches, out: &mut Output, file: OutputFile) {
    let mut target = out.out.clone();
    set(m, "out", &mut target, file.out.map(Some));
    out.out = target;
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    n: Option<Vec<usize>>,
    heads: Option<Vec<usize>>,
    r: Option<Vec<f64>>,
    k: Option<Vec<usize>>,
    hw: Option<Vec<Hw>>,
    alpha: Option<f64>,
    variants: Option<Vec<Variant>>,
    parallel: Option<usize>,
    out: Option<PathBuf>,
}

pub fn bench(m: &ArgMatches, mut a: BenchArgs) -> CliResult<BenchArgs> {
    let f: BenchFile = load(a.common.output.config.as_deref())?;
    set(m, "n", &mut a.n, f.n);
    set(m, "heads", &mut a.heads, f.heads);
    set(m, "r", &mut a.r, f.r);
    set(m, "k", &mut a.k, f.k);
    set(m, "hw", &mut a.hw, f.hw);
    set(m, "alpha", &mut a.alpha, f.alpha);
    set(m, "variants", &mut a.variants, f.variants);
    merge_parallel(m, &mut a.common, f.parallel, f.out);
    Ok(a)
}

fn merge_parallel(m: &ArgMatches, p: &mut ParallelOutput, parallel: Option<usize>, out: Option<PathBuf>) {
    set(m, "parallel", &mut p.parallel, parallel);
    merge_output(m, &mut p.output, OutputFile { out });
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckFile {
    variant: Option<Variant>,
    n: Option<usize>,
    heads: Option<usize>,
    r: Option<f64>,
    k: Option<usize>,
    hw: Option<Hw>,
    alpha: Option<f64>,
    eps: Option<f64>,
    threshold: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

pub fn gradcheck(m: &ArgMatches, mut a: GradcheckArgs) -> CliResult<GradcheckArgs> {
    let f: GradcheckFile = load(a.output.config.as_deref())?;
    set(m, "variant", &mut a.variant, f.variant);
    set(m, "n", &mut a.n, f.n);
    set(m, "heads", &mut a.heads, f.heads);
    set(m, "r", &mut a.r, f.r);
    set(m, "k", &mut a.k, f.k);
    set(m, "hw", &mut a.hw, f.hw);
    set(m, "alpha", &mut a.alpha, f.alpha);
    set(m, "eps", &mut a.eps, f.eps);
    set(m, "threshold", &mut a.threshold, f.threshold);
    set(m, "seed", &mut a.seed, f.seed);
    merge_output(m, &mut a.output, OutputFile { out: f.out });
    Ok(a)
}

/// Keys shared by the model-training subcommands.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingFile {
    // model
    variant: Option<Variant>,
    n: Option<usize>,
    heads: Option<usize>,
    r: Option<f64>,
    k: Option<usize>,
    hw: Option<Hw>,
    alpha: Option<f64>,
    depth: Option<usize>,
    // task
    noise: Option<f64>,
    gain_jitter: Option<f64>,
    sources: Option<usize>,
    train_size: Option<usize>,
    val_size: Option<usize>,
    // optimisation
    optimizer: Option<OptimizerChoice>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    eval_every: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    // subcommand specific
    layers: Option<String>,
    instances: Option<usize>,
    save_dir: Option<PathBuf>,
    kind: Option<AblationKind>,
    parallel: Option<usize>,
}

impl TrainingFile {
    fn reject(&self, command: &str, keys: &[(&str, bool)]) -> CliResult<()> {
        for (key, present) in keys {
            if *present {
                return Err(CliError::Config(format!("key {key:?} is not accepted by `{command}`")));
            }
        }
        Ok(())
    }
}

fn merge_training(
    m: &ArgMatches,
    f: &mut TrainingFile,
    model: &mut ModelArgs,
    task: &mut TaskArgs,
    optim: &mut OptimArgs,
) {
    set(m, "variant", &mut model.variant, f.variant.take());
    set(m, "n", &mut model.n, f.n.take());
    set(m, "heads", &mut model.heads, f.heads.take());
    set(m, "r", &mut model.r, f.r.take());
    set(m, "k", &mut model.k, f.k.take());
    set(m, "hw", &mut model.hw, f.hw.take());
    set(m, "alpha", &mut model.alpha, f.alpha.take());
    set(m, "depth", &mut model.depth, f.depth.take());
    set(m, "noise", &mut task.noise, f.noise.take());
    set(m, "gain_jitter", &mut task.gain_jitter, f.gain_jitter.take());
    set(m, "sources", &mut task.sources, f.sources.take());
    set(m, "train_size", &mut task.train_size, f.train_size.take());
    set(m, "val_size", &mut task.val_size, f.val_size.take());
    set(m, "optimizer", &mut optim.optimizer, f.optimizer.take());
    set(m, "lr", &mut optim.lr, f.lr.take());
    set(m, "momentum", &mut optim.momentum, f.momentum.take());
    set(m, "batch_size", &mut optim.batch_size, f.batch_size.take());
    set(m, "eval_every", &mut optim.eval_every, f.eval_every.take());
}

pub fn spectra(m: &ArgMatches, mut a: SpectraArgs) -> CliResult<SpectraArgs> {
    let mut f: TrainingFile = load(a.output.config.as_deref())?;
    f.reject(
        "spectra",
        &[
            ("save_dir", f.save_dir.is_some()),
            ("kind", f.kind.is_some()),
            ("parallel", f.parallel.is_some()),
        ],
    )?;
    merge_training(m, &mut f, &mut a.model, &mut a.task, &mut a.optim);
    set(m, "steps", &mut a.steps, f.steps);
    set(m, "seed", &mut a.seed, f.seed);
    set(m, "layers", &mut a.layers, f.layers);
    set(m, "instances", &mut a.instances, f.instances);
    merge_output(m, &mut a.output, OutputFile { out: f.out });
    Ok(a)
}

pub fn train(m: &ArgMatches, mut a: TrainArgs) -> CliResult<TrainArgs> {
    let mut f: TrainingFile = load(a.output.config.as_deref())?;
    f.reject(
        "train",
        &[
            ("layers", f.layers.is_some()),
            ("instances", f.instances.is_some()),
            ("kind", f.kind.is_some()),
            ("parallel", f.parallel.is_some()),
        ],
    )?;
    merge_training(m, &mut f, &mut a.model, &mut a.task, &mut a.optim);
    set(m, "steps", &mut a.steps, f.steps);
    set(m, "seed", &mut a.seed, f.seed);
    set(m, "save_dir", &mut a.save_dir, f.save_dir.map(Some));
    merge_output(m, &mut a.output, OutputFile { out: f.out });
    Ok(a)
}

pub fn ablate(m: &ArgMatches, mut a: AblateArgs) -> CliResult<AblateArgs> {
    let mut f: TrainingFile = load(a.common.output.config.as_deref())?;
    f.reject(
        "ablate",
        &[
            ("layers", f.layers.is_some()),
            ("instances", f.instances.is_some()),
            ("save_dir", f.save_dir.is_some()),
        ],
    )?;
    merge_training(m, &mut f, &mut a.model, &mut a.task, &mut a.optim);
    set(m, "steps", &mut a.steps, f.steps);
    set(m, "seed", &mut a.seed, f.seed);
    set(m, "kind", &mut a.kind, f.kind);
    merge_parallel(m, &mut a.common, f.parallel, f.out);
    Ok(a)
}
