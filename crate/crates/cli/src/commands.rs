use std::path::Path;

use glmha::cost::{cost_report, SweepGrid, SweepTable, CSV_HEADER};
use glmha::io::{save_block, write_tensor};
use glmha::spectra::{attn_spectrum_sweep, spectra_csv, LayerSelector, SWEEP_METHOD};
use glmha::train::{ablation_plan, run_ablation_row, AblationRow, AblationTable, OptimizerKind};
use glmha::{check_block, make_task, train, AttnConfig, ModelSpec, TaskSpec, TrainSettings};
use rayon::prelude::*;
use serde_json::json;

use crate::args::{
    AblateArgs, BenchArgs, GradcheckArgs, ModelArgs, OptimArgs, OptimizerChoice, SpectraArgs, TaskArgs, TrainArgs,
};
use crate::error::{CliError, CliResult};
use crate::output::{echo, render_table, verdict, write_json, write_table};

fn attn_config(variant_cfg: (usize, usize, f64, usize, (usize, usize), f64)) -> CliResult<AttnConfig> {
    let (n, heads, r, k, (h, w), alpha) = variant_cfg;
    let cfg = AttnConfig::new(n, heads, r, h, w).with_kernel(k).with_alpha(alpha);
    cfg.validate()?;
    Ok(cfg)
}

fn model_spec(m: &ModelArgs) -> CliResult<ModelSpec> {
    let cfg = attn_config((m.n, m.heads, m.r, m.k, (m.hw.0, m.hw.1), m.alpha))?;
    let spec = ModelSpec::uniform(m.variant, cfg, m.depth);
    spec.validate()?;
    Ok(spec)
}

fn task_spec(m: &ModelArgs, t: &TaskArgs, seed: u64) -> CliResult<TaskSpec> {
    let spec = TaskSpec {
        seed,
        channels: m.n,
        height: m.hw.0,
        width: m.hw.1,
        sources: t.sources,
        noise_std: t.noise,
        gain_jitter: t.gain_jitter,
        train_size: t.train_size,
        val_size: t.val_size,
    };
    spec.validate()?;
    Ok(spec)
}

fn settings(o: &OptimArgs, steps: usize, seed: u64) -> CliResult<TrainSettings> {
    let optimizer = match o.optimizer {
        OptimizerChoice::Adam => OptimizerKind::default(),
        OptimizerChoice::SgdMomentum => {
            if !(0.0..1.0).contains(&o.momentum) {
                return Err(CliError::Config(format!(
                    "momentum must lie in [0, 1), got {}",
                    o.momentum
                )));
            }
            OptimizerKind::SgdMomentum { momentum: o.momentum }
        }
    };
    if !(o.lr.is_finite() && o.lr >= 0.0) {
        return Err(CliError::Config(format!("lr must be finite and >= 0, got {}", o.lr)));
    }
    if o.eval_every == 0 {
        return Err(CliError::Config("eval_every must be positive".into()));
    }
    Ok(TrainSettings {
        optimizer,
        steps,
        lr: o.lr,
        seed,
        batch_size: o.batch_size,
        eval_every: o.eval_every,
    })
}

fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    if threads == 0 {
        return Err(CliError::Config("parallel must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn parse_layers(s: &str) -> CliResult<LayerSelector> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(LayerSelector::All);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("layers must be `all` or comma-separated indices, got {s:?}")))
        })
        .collect::<CliResult<Vec<_>>>()
        .map(LayerSelector::Layers)
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    if a.variants.is_empty() {
        return Err(CliError::Config("variant list is empty".into()));
    }
    if !a.alpha.is_finite() {
        return Err(CliError::Config(format!("alpha must be finite, got {}", a.alpha)));
    }
    let grid = SweepGrid {
        channels: a.n.clone(),
        heads: a.heads.clone(),
        reductions: a.r.clone(),
        kernels: a.k.clone(),
        spatial: a.hw.iter().map(|hw| (hw.0, hw.1)).collect(),
        alpha: a.alpha,
    };
    if grid.is_empty() {
        return Err(CliError::Config("every grid axis needs at least one value".into()));
    }
    let (configs, warnings) = grid.points();
    if configs.is_empty() {
        return Err(CliError::Config(format!(
            "no valid configuration in the grid: {}",
            warnings.join("; ")
        )));
    }
    let rows = pool(a.common.parallel)?.install(|| {
        configs
            .par_iter()
            .map(|cfg| {
                a.variants
                    .iter()
                    .map(|&v| cost_report(cfg, v))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let table = SweepTable {
        rows: rows.into_iter().flatten().collect(),
        warnings,
    };
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }

    let rows: Vec<Vec<String>> = table.rows.iter().map(|r| r.csv_fields()).collect();
    print!("{}", render_table(&CSV_HEADER, &rows));
    if let Some(out) = &a.common.output.out {
        let config = echo(a)?;
        let csv = table.to_csv()?;
        let (c, j) = write_table(
            out,
            &config,
            &csv,
            json!({ "rows": table.rows, "warnings": table.warnings }),
        )?;
        eprintln!("wrote {} and {}", c.display(), j.display());
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return Err(CliError::Config(format!("eps must be positive, got {}", a.eps)));
    }
    if a.threshold.is_nan() || a.threshold < 0.0 {
        return Err(CliError::Config(format!("threshold must be >= 0, got {}", a.threshold)));
    }
    let cfg = attn_config((a.n, a.heads, a.r, a.k, (a.hw.0, a.hw.1), a.alpha))?;
    let report = check_block(a.variant, &cfg, a.seed, a.eps)?;
    let passed = report.passes(a.threshold);

    let rows: Vec<Vec<String>> = report
        .params
        .iter()
        .map(|p| {
            vec![
                p.name.clone(),
                format!("{:?}", p.shape),
                p.entries_checked.to_string(),
                format!("{:.3e}", p.max_rel_error),
                format!("{:.3e}", p.max_abs_error),
            ]
        })
        .collect();
    print!(
        "{}",
        render_table(&["tensor", "shape", "checked", "max_rel_err", "max_abs_err"], &rows)
    );
    println!(
        "{} {} max rel err {:.3e} (threshold {:e})",
        verdict(passed),
        a.variant,
        report.max_rel_error,
        a.threshold
    );
    if let Some(out) = &a.output.out {
        write_json(
            out,
            &echo(a)?,
            json!({ "passed": passed, "threshold": a.threshold, "report": report }),
        )?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: max rel err {:e} >= threshold {:e}",
            report.max_rel_error, a.threshold
        )))
    }
}

pub fn spectra(a: &SpectraArgs) -> CliResult<()> {
    if a.instances == 0 {
        return Err(CliError::Config("instances must be at least 1".into()));
    }
    let selector = parse_layers(&a.layers)?;
    let spec = model_spec(&a.model)?;
    let mut task_args = a.task.clone();
    task_args.val_size = task_args.val_size.max(a.instances);
    let task = make_task(&task_spec(&a.model, &task_args, a.seed)?)?;
    let (model, _) = train(&spec, &task, &settings(&a.optim, a.steps, a.seed)?)?;
    let inputs: Vec<_> = task.val.iter().take(a.instances).map(|s| s.input.clone()).collect();
    let layers = attn_spectrum_sweep(&model, &inputs, &selector)?;

    let thresholds: Vec<String> = layers[0]
        .rank_at
        .iter()
        .map(|r| format!("rank@{}", r.threshold))
        .collect();
    let mut header = vec!["layer", "variant", "matrices"];
    header.extend(thresholds.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = layers
        .iter()
        .map(|l| {
            let mut row = vec![l.layer.to_string(), l.variant.clone(), l.matrices.to_string()];
            row.extend(l.rank_at.iter().map(|r| r.rank.to_string()));
            row
        })
        .collect();
    print!("{}", render_table(&header, &rows));
    if let Some(out) = &a.output.out {
        let csv = spectra_csv(&layers)?;
        write_table(
            out,
            &echo(a)?,
            &csv,
            json!({ "method": SWEEP_METHOD, "layers": layers }),
        )?;
    }
    Ok(())
}

fn save_model(dir: &Path, model: &glmha::Model) -> CliResult<()> {
    for (i, (block, ffn)) in model.blocks.iter().zip(&model.ffn).enumerate() {
        let prefix = format!("layer{i}");
        save_block(dir, &prefix, block, &model.spec.blocks[i].config)?;
        write_tensor(&dir.join(format!("{prefix}.ffn.w1.lrt")), &ffn.w1)?;
        write_tensor(&dir.join(format!("{prefix}.ffn.w2.lrt")), &ffn.w2)?;
    }
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let spec = model_spec(&a.model)?;
    let task = make_task(&task_spec(&a.model, &a.task, a.seed)?)?;
    let (model, log) = train(&spec, &task, &settings(&a.optim, a.steps, a.seed)?)?;
    println!(
        "{}: {} steps, attention params {}, attention flops {}",
        spec.variant_label(),
        a.steps,
        log.attention_params,
        log.attention_flops
    );
    println!(
        "final val loss {:.6}, val psnr {:.4} dB",
        log.final_val_loss, log.final_val_psnr
    );
    eprintln!("wall clock {:.2}s", log.wall_clock_secs);
    if let Some(dir) = &a.save_dir {
        save_model(dir, &model).map_err(|e| match e {
            CliError::Config(msg) => CliError::Io(msg),
            other => other,
        })?;
    }
    if let Some(out) = &a.output.out {
        write_json(out, &echo(a)?, json!({ "log": log }))?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let base = model_spec(&a.model)?;
    let task = make_task(&task_spec(&a.model, &a.task, a.seed)?)?;
    let settings = settings(&a.optim, a.steps, a.seed)?;
    let plan = ablation_plan(a.kind, &base)?;
    let rows = pool(a.common.parallel)?.install(|| {
        plan.par_iter()
            .map(|(label, spec)| run_ablation_row(label, spec, &task, &settings))
            .collect::<Result<Vec<AblationRow>, _>>()
    })?;
    let table = AblationTable { kind: a.kind, rows };

    let display: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.setting.clone(),
                r.model.variant_label(),
                r.params.to_string(),
                r.flops.to_string(),
                format!("{:.2}", -r.params_saving_pct),
                format!("{:.2}", -r.flops_saving_pct),
                format!("{:.4}", r.val_psnr),
            ]
        })
        .collect();
    print!(
        "{}",
        render_table(
            &["setting", "model", "params", "flops", "params_%", "flops_%", "val_psnr"],
            &display
        )
    );
    if let Some(out) = &a.common.output.out {
        let csv = table.to_csv()?;
        write_table(out, &echo(a)?, &csv, json!({ "table": table }))?;
    }
    Ok(())
}
