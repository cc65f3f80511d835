//! Exact parameter and FLOP accounting per attention variant.
//!
//! FLOP convention: one multiply-add is 2 FLOPs; elementwise ops, activations,
//! exponentials, divisions and comparisons are 1 FLOP each. Softmax over an
//! `r × c` score matrix costs `4·r·c + r` (temperature scaling, max-shift,
//! exp, sum, normalise, plus one per row for the max). Max pooling costs one
//! comparison per input element. Reshapes, transposes and head slicing are
//! free. The residual add and the softplus on each head's raw temperature are
//! counted. [`count_flops`] is a closed form; [`instrumented_flops`] runs the
//! block on a tape whose ops tally the same costs, and the two agree exactly.

use serde::{Deserialize, Serialize};

use crate::attention::{record_block, BlockParams, Variant};
use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Closed-form learnable parameter count, excluding temperatures.
///
/// CSA: `3n²`; GLMHA: `n² + 2n·C' + n·k² + (n/h)²`; post-projection: `3n² + 2n·C'`,
/// where `C' = n/r` when it divides evenly.
pub fn count_params(cfg: &AttnConfig, variant: Variant) -> Result<u64> {
    cfg.validate()?;
    let n = cfg.channels as u64;
    let kv = cfg.kv_channels() as u64;
    let k = cfg.kernel as u64;
    let d = cfg.head_dim() as u64;
    Ok(match variant {
        Variant::Csa => 3 * n * n,
        Variant::Glmha => n * n + 2 * n * kv + n * k * k + d * d,
        Variant::PostProj => 3 * n * n + 2 * n * kv,
    })
}

/// Parameter count obtained by instantiating the variant's tensors and summing
/// their sizes.
pub fn enumerate_params(cfg: &AttnConfig, variant: Variant) -> Result<u64> {
    Ok(BlockParams::zeros(variant, cfg)?.param_count() as u64)
}

/// Fractional parameter saving of GLMHA over CSA,
/// `((2n² − n²/h² − nk²)·r − 2n²) / (3n²·r)`.
pub fn param_reduction_ratio(n: usize, h: usize, k: usize, r: usize) -> Result<f64> {
    if n == 0 || h == 0 || r == 0 || !n.is_multiple_of(h * r) {
        return Err(Error::Config(format!(
            "reduction ratio needs n divisible by h and n/r divisible by h (n={n}, h={h}, r={r})"
        )));
    }
    let nf = n as f64;
    let per_head = (n / h) as f64;
    let rf = r as f64;
    let n2 = nf * nf;
    Ok(((2.0 * n2 - per_head * per_head - nf * (k * k) as f64) * rf - 2.0 * n2) / (3.0 * n2 * rf))
}

/// Cost of `h` attention heads with `dq` query and `dk` key rows each over
/// embeddings of length `s`: scores, softmax and the value product.
fn heads_flops(h: u64, dq: u64, dk: u64, s: u64) -> u64 {
    h * (2 * dq * s * dk + 4 * dq * dk + dq + 2 * dq * dk * s)
}

/// Closed-form forward FLOPs of one block on one input.
pub fn count_flops(cfg: &AttnConfig, variant: Variant) -> Result<u64> {
    cfg.validate()?;
    let n = cfg.channels as u64;
    let h = cfg.heads as u64;
    let s = cfg.spatial() as u64;
    let d = cfg.head_dim() as u64;
    let kv = cfg.kv_channels() as u64;
    let dk = cfg.kv_head_dim() as u64;
    let k = cfg.kernel as u64;
    let temperatures = h;
    let residual = n * s;
    Ok(match variant {
        Variant::Csa => 3 * 2 * n * n * s + temperatures + heads_flops(h, d, d, s) + residual,
        Variant::Glmha => {
            let query = 2 * n * n * s;
            let pool = n * s;
            let conv = 2 * n * k * k;
            let gelu = n;
            let linear = 2 * h * d * d;
            let tanh = n;
            let reweight = 2 * n * s + n;
            let kv_proj = 2 * 2 * kv * n * s;
            query
                + pool
                + conv
                + gelu
                + linear
                + tanh
                + reweight
                + kv_proj
                + temperatures
                + heads_flops(h, d, dk, s)
                + residual
        }
        Variant::PostProj => {
            let projections = 3 * 2 * n * n * s;
            let low_rank = 2 * 2 * kv * n * s;
            projections + low_rank + temperatures + heads_flops(h, d, dk, s) + residual
        }
    })
}

/// FLOPs tallied by the tape while running the block forward once.
pub fn instrumented_flops(cfg: &AttnConfig, variant: Variant) -> Result<u64> {
    let params = BlockParams::zeros(variant, cfg)?;
    let x = Tensor::zeros(&[cfg.channels, cfg.spatial()])?;
    let mut tape = Tape::new();
    record_block(&mut tape, &params, cfg, &x)?;
    Ok(tape.flops())
}

/// Savings relative to CSA, in percent. Negative values are increases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub params_pct: f64,
    pub flops_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub config: AttnConfig,
    pub params: u64,
    pub flops: u64,
    pub reduction_vs_csa: Reduction,
}

pub(crate) fn saving_pct(reference: u64, value: u64) -> f64 {
    100.0 * (reference as f64 - value as f64) / reference as f64
}

pub fn cost_report(cfg: &AttnConfig, variant: Variant) -> Result<CostReport> {
    let params = count_params(cfg, variant)?;
    let flops = count_flops(cfg, variant)?;
    let csa_params = count_params(cfg, Variant::Csa)?;
    let csa_flops = count_flops(cfg, Variant::Csa)?;
    Ok(CostReport {
        variant,
        config: cfg.clone(),
        params,
        flops,
        reduction_vs_csa: Reduction {
            params_pct: saving_pct(csa_params, params),
            flops_pct: saving_pct(csa_flops, flops),
        },
    })
}

/// Column header shared by every cost table.
pub const CSV_HEADER: [&str; 11] = [
    "variant",
    "n",
    "h",
    "r",
    "k",
    "H",
    "W",
    "params",
    "flops",
    "params_pct_vs_csa",
    "flops_pct_vs_csa",
];

impl CostReport {
    /// CSV fields matching [`CSV_HEADER`]. The percentage columns are deltas
    /// against CSA: negative means fewer than CSA.
    pub fn csv_fields(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            self.variant.to_string(),
            c.channels.to_string(),
            c.heads.to_string(),
            c.reduction.to_string(),
            c.kernel.to_string(),
            c.height.to_string(),
            c.width.to_string(),
            self.params.to_string(),
            self.flops.to_string(),
            format_pct(-self.reduction_vs_csa.params_pct),
            format_pct(-self.reduction_vs_csa.flops_pct),
        ]
    }
}

pub(crate) fn format_pct(v: f64) -> String {
    // avoid printing "-0.0000"
    let v = if v.abs() < 5e-5 { 0.0 } else { v };
    format!("{v:.4}")
}

/// Cartesian grid of block configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub reductions: Vec<f64>,
    pub kernels: Vec<usize>,
    /// `(H, W)` pairs.
    pub spatial: Vec<(usize, usize)>,
    pub alpha: f64,
}

impl SweepGrid {
    pub fn single(cfg: &AttnConfig) -> Self {
        SweepGrid {
            channels: vec![cfg.channels],
            heads: vec![cfg.heads],
            reductions: vec![cfg.reduction],
            kernels: vec![cfg.kernel],
            spatial: vec![(cfg.height, cfg.width)],
            alpha: cfg.alpha,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
            || self.heads.is_empty()
            || self.reductions.is_empty()
            || self.kernels.is_empty()
            || self.spatial.is_empty()
    }

    /// Valid configurations in deterministic order (channels outermost, then
    /// heads, reductions, kernels, spatial), and a warning per skipped point.
    pub fn points(&self) -> (Vec<AttnConfig>, Vec<String>) {
        let mut configs = Vec::new();
        let mut warnings = Vec::new();
        for &n in &self.channels {
            for &h in &self.heads {
                for &r in &self.reductions {
                    for &k in &self.kernels {
                        for &(height, width) in &self.spatial {
                            let cfg = AttnConfig {
                                channels: n,
                                heads: h,
                                reduction: r,
                                alpha: self.alpha,
                                kernel: k,
                                height,
                                width,
                            };
                            match cfg.validate() {
                                Ok(()) => configs.push(cfg),
                                Err(e) => {
                                    warnings.push(format!("skipped n={n} h={h} r={r} k={k} hw={height}x{width}: {e}"))
                                }
                            }
                        }
                    }
                }
            }
        }
        (configs, warnings)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<CostReport>,
    pub warnings: Vec<String>,
}

/// Cost reports for every valid grid point and variant, variants innermost.
pub fn sweep(grid: &SweepGrid, variants: &[Variant]) -> Result<SweepTable> {
    if grid.is_empty() || variants.is_empty() {
        return Err(Error::Config("sweep grid and variant list must be non-empty".into()));
    }
    let (configs, warnings) = grid.points();
    let mut rows = Vec::with_capacity(configs.len() * variants.len());
    for cfg in &configs {
        for &v in variants {
            rows.push(cost_report(cfg, v)?);
        }
    }
    Ok(SweepTable { rows, warnings })
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.write_record(row.csv_fields())?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
