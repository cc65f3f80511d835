use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glmha::attention::Variant;
use glmha::train::AblationKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "glmha",
    version,
    about = "Cost tables, gradient checks, attention spectra and toy training for CSA/GLMHA blocks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP tables for a grid of block configurations
    Bench(BenchArgs),
    /// Finite-difference check of every tensor of one block
    Gradcheck(GradcheckArgs),
    /// Singular-value energy CDFs of a toy model's attention maps
    Spectra(SpectraArgs),
    /// Train a toy denoising model and write its log
    Train(TrainArgs),
    /// Run an alpha, reduction or depth-replacement sweep
    Ablate(AblateArgs),
}

/// Spatial extent written `HxW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Hw(pub usize, pub usize);

impl FromStr for Hw {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("expected HxW with positive integers, got {s:?}"))
        };
        Ok(Hw(parse(h)?, parse(w)?))
    }
}

impl TryFrom<String> for Hw {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Hw> for String {
    fn from(hw: Hw) -> String {
        hw.to_string()
    }
}

impl fmt::Display for Hw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    SgdMomentum,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<AblationKind, String> {
    s.parse::<AblationKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    /// Channel counts n (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub n: Vec<usize>,
    /// Head counts h (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub heads: Vec<usize>,
    /// K/V reduction factors r (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub r: Vec<f64>,
    /// Depthwise kernel sizes k (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub k: Vec<usize>,
    /// Spatial sizes HxW (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "16x16")]
    pub hw: Vec<Hw>,
    /// Calibration scaling factor
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Variants to tabulate (csa, glmha, postproj)
    #[arg(long, value_delimiter = ',', default_value = "csa,glmha,postproj", value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    #[serde(skip)]
    pub common: ParallelOutput,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    /// Block variant (csa, glmha, postproj)
    #[arg(long, default_value = "glmha", value_parser = parse_variant)]
    pub variant: Variant,
    /// Channels n
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Heads h
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// K/V reduction factor r
    #[arg(long, default_value_t = 2.0)]
    pub r: f64,
    /// Depthwise kernel size k
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Spatial size HxW
    #[arg(long, default_value = "3x3")]
    pub hw: Hw,
    /// Calibration scaling factor
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

/// Toy model shape shared by spectra, train and ablate.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Block variant (csa, glmha, postproj)
    #[arg(long, default_value = "glmha", value_parser = parse_variant)]
    pub variant: Variant,
    /// Channels n
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Heads h
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// K/V reduction factor r
    #[arg(long, default_value_t = 2.0)]
    pub r: f64,
    /// Depthwise kernel size k
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Spatial size HxW
    #[arg(long, default_value = "8x8")]
    pub hw: Hw,
    /// Calibration scaling factor
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Number of stacked blocks
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
}

/// Synthetic denoising task.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    /// Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    /// Per-channel gain spread in units of the noise level
    #[arg(long, default_value_t = 1.0)]
    pub gain_jitter: f64,
    /// Latent source images mixed into the channels
    #[arg(long, default_value_t = 3)]
    pub sources: usize,
    /// Training samples
    #[arg(long, default_value_t = 2048)]
    pub train_size: usize,
    /// Validation samples
    #[arg(long, default_value_t = 64)]
    pub val_size: usize,
}

/// Optimisation settings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    /// Optimizer
    #[arg(long, value_enum, default_value_t = OptimizerChoice::Adam)]
    pub optimizer: OptimizerChoice,
    /// Learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Momentum for sgd-momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Samples per step (0 = full batch)
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Validate every this many steps
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpectraArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    /// Training steps before the analysis (0 = analyse the initialisation)
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Layers to analyse: `all` or comma-separated indices
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Validation inputs to average over
    #[arg(long, default_value_t = 8)]
    pub instances: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    /// Training steps
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the trained weights as LRT1 tensors plus JSON manifests
    #[arg(long)]
    #[serde(skip)]
    pub save_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// Sweep kind: alpha, reduction or depth-replacement
    #[arg(long, default_value = "reduction", value_parser = parse_kind)]
    pub kind: AblationKind,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    /// Training steps per sweep cell
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub common: ParallelOutput,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Output {
    /// JSON config file; command-line flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ParallelOutput {
    #[command(flatten)]
    pub output: Output,
    /// Worker threads for independent grid cells
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}
