use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, ModelSpec, SyntheticTask, TrainSettings};
use crate::attention::Variant;
use crate::cost::{format_pct, saving_pct, CSV_HEADER};
use crate::error::{Error, Result};

pub const ALPHA_GRID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
/// Fraction of key/value channels kept; the reduction factor is its inverse.
pub const RETAINED_GRID: [f64; 4] = [0.75, 0.5, 0.25, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Alpha,
    Reduction,
    DepthReplacement,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Alpha => "alpha",
            AblationKind::Reduction => "reduction",
            AblationKind::DepthReplacement => "depth-replacement",
        })
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationKind::Alpha),
            "reduction" => Ok(AblationKind::Reduction),
            "depth-replacement" | "depth" => Ok(AblationKind::DepthReplacement),
            other => Err(Error::Config(format!(
                "unknown ablation kind {other:?} (expected alpha, reduction or depth-replacement)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub model: ModelSpec,
    pub params: u64,
    pub flops: u64,
    /// Savings against the all-CSA model with the same configs; positive means fewer.
    pub params_saving_pct: f64,
    pub flops_saving_pct: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

/// Labelled model specs a sweep trains, in row order. The first row is always
/// the all-CSA reference.
///
/// * alpha: every block GLMHA at `r = 2` with each α in [`ALPHA_GRID`].
/// * reduction: every block GLMHA at `r = 1/f` for each retained fraction `f`.
/// * depth-replacement: the first `i` blocks switched to GLMHA, `i = 1..=depth`.
pub fn ablation_plan(kind: AblationKind, base: &ModelSpec) -> Result<Vec<(String, ModelSpec)>> {
    base.validate()?;
    let csa = base.with_variant(Variant::Csa);
    let mut plan = vec![("csa".to_string(), csa.clone())];
    match kind {
        AblationKind::Alpha => {
            for alpha in ALPHA_GRID {
                let mut spec = base.with_variant(Variant::Glmha);
                for b in &mut spec.blocks {
                    b.config.alpha = alpha;
                    b.config.reduction = 2.0;
                }
                plan.push((format!("alpha={alpha}"), spec));
            }
        }
        AblationKind::Reduction => {
            for f in RETAINED_GRID {
                let mut spec = base.with_variant(Variant::Glmha);
                for b in &mut spec.blocks {
                    b.config.reduction = 1.0 / f;
                }
                plan.push((format!("retained={}%", (f * 100.0).round()), spec));
            }
        }
        AblationKind::DepthReplacement => {
            for i in 1..=base.depth() {
                let mut spec = csa.clone();
                for b in spec.blocks.iter_mut().take(i) {
                    b.variant = Variant::Glmha;
                }
                plan.push((format!("replaced={i}"), spec));
            }
        }
    }
    for (_, spec) in &plan {
        spec.validate()?;
    }
    Ok(plan)
}

/// Cost-model columns of a row without training.
pub fn row_costs(spec: &ModelSpec) -> Result<(u64, u64, f64, f64)> {
    let params = spec.attention_params()?;
    let flops = spec.attention_flops()?;
    let csa = spec.with_variant(Variant::Csa);
    Ok((
        params,
        flops,
        saving_pct(csa.attention_params()?, params),
        saving_pct(csa.attention_flops()?, flops),
    ))
}

/// Trains one sweep cell and fills in its row.
pub fn run_ablation_row(
    setting: &str,
    spec: &ModelSpec,
    task: &SyntheticTask,
    settings: &TrainSettings,
) -> Result<AblationRow> {
    let (params, flops, params_saving_pct, flops_saving_pct) = row_costs(spec)?;
    let (_, log) = train(spec, task, settings)?;
    Ok(AblationRow {
        setting: setting.to_string(),
        model: spec.clone(),
        params,
        flops,
        params_saving_pct,
        flops_saving_pct,
        val_loss: log.final_val_loss,
        val_psnr: log.final_val_psnr,
    })
}

/// Runs every cell of the sweep sequentially.
pub fn ablation_sweep(
    kind: AblationKind,
    base: &ModelSpec,
    task: &SyntheticTask,
    settings: &TrainSettings,
) -> Result<AblationTable> {
    let rows = ablation_plan(kind, base)?
        .iter()
        .map(|(label, spec)| run_ablation_row(label, spec, task, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { kind, rows })
}

impl AblationTable {
    /// Cost columns plus `setting`, `alpha`, `val_loss`, `val_psnr`. The block
    /// columns describe the first GLMHA block, or block 0 when there is none.
    pub fn header() -> Vec<&'static str> {
        let mut h = CSV_HEADER.to_vec();
        h.extend(["setting", "alpha", "val_loss", "val_psnr"]);
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header())?;
        for row in &self.rows {
            let block = row
                .model
                .blocks
                .iter()
                .find(|b| b.variant == Variant::Glmha)
                .unwrap_or(&row.model.blocks[0]);
            let c = &block.config;
            w.write_record([
                row.model.variant_label(),
                c.channels.to_string(),
                c.heads.to_string(),
                c.reduction.to_string(),
                c.kernel.to_string(),
                c.height.to_string(),
                c.width.to_string(),
                row.params.to_string(),
                row.flops.to_string(),
                format_pct(-row.params_saving_pct),
                format_pct(-row.flops_saving_pct),
                row.setting.clone(),
                c.alpha.to_string(),
                format!("{:.6}", row.val_loss),
                format!("{:.4}", row.val_psnr),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}
