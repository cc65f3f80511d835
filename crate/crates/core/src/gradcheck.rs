//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{forward_vars, BlockParams, Variant};
use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters with more entries than this are probed on a seeded random subset.
pub const FULL_PROBE_LIMIT: usize = 10_000;
const SUBSAMPLE_SIZE: usize = 2_000;
const SUBSAMPLE_SEED: u64 = 0x6772_6164;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub eps: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_threshold: f64) -> bool {
        self.max_rel_error < rel_threshold
    }
}

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::dim(
            "grad_check",
            format!("function must return a scalar, got {:?}", value.shape()),
        ));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences for every entry of every named parameter.
///
/// `f` receives the parameters as leaf vars in the order given.
pub fn grad_check<F>(op: &str, f: F, params: &[(String, Tensor)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::domain(
            "grad_check",
            format!("eps must lie in [1e-8, 1e-4], got {eps}"),
        ));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let mut report = GradCheckReport {
        op: op.to_string(),
        eps,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        params: Vec::with_capacity(params.len()),
    };

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[pi]);
        let entries: Vec<usize> = if tensor.numel() > FULL_PROBE_LIMIT {
            let mut picked = sample(&mut rng, tensor.numel(), SUBSAMPLE_SIZE).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..tensor.numel()).collect()
        };

        let mut check = ParamCheck {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            entries_checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &i in &entries {
            let original = values[pi].data()[i];
            values[pi].data_mut()[i] = original + eps;
            let plus = evaluate(&f, &values);
            values[pi].data_mut()[i] = original - eps;
            let minus = evaluate(&f, &values);
            values[pi].data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    name: name.clone(),
                    detail: format!("non-finite function value while probing entry {i}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.max_abs_error = report.max_abs_error.max(check.max_abs_error);
        report.params.push(check);
    }
    Ok(report)
}

/// Standard deviation of the random block input used by [`check_block`].
/// Unit-scale inputs saturate the softmax and leave gradients near underflow.
pub const BLOCK_CHECK_INPUT_STD: f64 = 0.5;

/// Checks every tensor of a randomly initialised block, plus its input `x`,
/// under the loss `Σ W ⊙ block(x)` with a fixed random `W`.
pub fn check_block(variant: Variant, cfg: &AttnConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = rng::seeded(seed, rng::stream::INSTANCES);
    let block = BlockParams::init(variant, cfg, &mut rng)?;
    let shape = [cfg.channels, cfg.spatial()];
    let x = Tensor::randn(&shape, BLOCK_CHECK_INPUT_STD, &mut rng)?;
    let weights = Tensor::randn(&shape, 1.0, &mut rng)?;
    let mut params = vec![("x".to_string(), x)];
    params.extend(
        block
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone())),
    );
    grad_check(
        variant.name(),
        |tape, vars| {
            let (out, _) = forward_vars(tape, variant, cfg, vars[0], &vars[1..])?;
            let w = tape.leaf(weights.clone());
            let weighted = tape.hadamard(out, w)?;
            Ok(tape.sum(weighted))
        },
        &params,
        eps,
    )
}
