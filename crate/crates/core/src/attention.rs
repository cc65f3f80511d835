//! Channel-wise self-attention (CSA), guided low-rank multi-head attention
//! (GLMHA) and a post-projection low-rank baseline, all recorded on a [`Tape`].
//!
//! Inputs are feature maps flattened to `[n, H·W]`: each channel is one
//! sequence sample and `H·W` is its embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_on_tape, CalibParams};
use crate::config::{AttnConfig, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::ops::softplus_inverse;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Csa,
    Glmha,
    #[serde(rename = "postproj")]
    PostProj,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Csa, Variant::Glmha, Variant::PostProj];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Csa => "csa",
            Variant::Glmha => "glmha",
            Variant::PostProj => "postproj",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csa" => Ok(Variant::Csa),
            "glmha" => Ok(Variant::Glmha),
            "postproj" | "post-proj" | "linformer" => Ok(Variant::PostProj),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// `[C, HW]` → `[h, C/h, HW]`, contiguous channel chunks per head.
pub fn split_heads(m: &Tensor, heads: usize) -> Result<Tensor> {
    let (c, hw) = m.dims2()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(
            "split_heads",
            format!("{c} channels not divisible by {heads} heads"),
        ));
    }
    m.reshape(&[heads, c / heads, hw])
}

/// Inverse of [`split_heads`].
pub fn merge_heads(m: &Tensor) -> Result<Tensor> {
    let (h, d, hw) = m.dims3()?;
    m.reshape(&[h * d, hw])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Raw per-head temperatures; the effective value is `softplus(beta)`.
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmhaParams {
    pub w_q: Tensor,
    /// `[C', n]`
    pub w_k: Tensor,
    /// `[C', n]`
    pub w_v: Tensor,
    pub calib: CalibParams,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostProjParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[C', n]` projection of the full keys.
    pub e_k: Tensor,
    /// `[C', n]` projection of the full values.
    pub e_v: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams {
    Csa(CsaParams),
    Glmha(GlmhaParams),
    PostProj(PostProjParams),
}

fn initial_beta(heads: usize) -> Result<Tensor> {
    Tensor::full(&[heads], softplus_inverse(DEFAULT_BETA))
}

/// Expected `(name, shape)` of every tensor of a variant, in binding order.
pub fn param_layout(variant: Variant, cfg: &AttnConfig) -> Vec<(&'static str, Vec<usize>)> {
    let n = cfg.channels;
    let kv = cfg.kv_channels();
    let k = cfg.kernel;
    let d = cfg.head_dim();
    let h = cfg.heads;
    match variant {
        Variant::Csa => vec![
            ("w_q", vec![n, n]),
            ("w_k", vec![n, n]),
            ("w_v", vec![n, n]),
            ("beta", vec![h]),
        ],
        Variant::Glmha => vec![
            ("w_q", vec![n, n]),
            ("w_k", vec![kv, n]),
            ("w_v", vec![kv, n]),
            ("calib.dw_kernels", vec![n, k, k]),
            ("calib.head_linear", vec![d, d]),
            ("beta", vec![h]),
        ],
        Variant::PostProj => vec![
            ("w_q", vec![n, n]),
            ("w_k", vec![n, n]),
            ("w_v", vec![n, n]),
            ("e_k", vec![kv, n]),
            ("e_v", vec![kv, n]),
            ("beta", vec![h]),
        ],
    }
}

impl BlockParams {
    /// Random initialisation: projections ~ N(0, 1/n), calibration weights
    /// scaled by fan-in, effective temperatures 1.0.
    pub fn init<R: Rng + ?Sized>(variant: Variant, cfg: &AttnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(variant, cfg);
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let t = match *name {
                "beta" => initial_beta(cfg.heads)?,
                "calib.dw_kernels" => Tensor::randn(shape, 1.0 / cfg.kernel as f64, rng)?,
                _ => Tensor::randn(shape, 1.0 / (shape[shape.len() - 1] as f64).sqrt(), rng)?,
            };
            tensors.push((name.to_string(), t));
        }
        Self::from_named(variant, cfg, tensors)
    }

    /// All-zero weights (temperatures still at their initial value).
    pub fn zeros(variant: Variant, cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_layout(variant, cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == "beta" {
                    initial_beta(cfg.heads)?
                } else {
                    Tensor::zeros(&shape)?
                };
                Ok((name.to_string(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(variant, cfg, tensors)
    }

    /// Builds parameters from named tensors, checking every shape against `cfg`.
    pub fn from_named(variant: Variant, cfg: &AttnConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = param_layout(variant, cfg);
        if tensors.len() != layout.len() {
            return Err(Error::Config(format!(
                "{variant} expects {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut by_name = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("{variant} is missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "block params",
                    format!("{name} has shape {:?}, config needs {shape:?}", t.shape()),
                ));
            }
            by_name.push(t);
        }
        let mut it = by_name.into_iter();
        let mut next = || it.next().expect("layout length checked");
        Ok(match variant {
            Variant::Csa => BlockParams::Csa(CsaParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                beta: next(),
            }),
            Variant::Glmha => BlockParams::Glmha(GlmhaParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                calib: CalibParams {
                    dw_kernels: next(),
                    head_linear: next(),
                },
                beta: next(),
            }),
            Variant::PostProj => BlockParams::PostProj(PostProjParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                e_k: next(),
                e_v: next(),
                beta: next(),
            }),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            BlockParams::Csa(_) => Variant::Csa,
            BlockParams::Glmha(_) => Variant::Glmha,
            BlockParams::PostProj(_) => Variant::PostProj,
        }
    }

    /// Tensors in binding order (the order of [`param_layout`]).
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            BlockParams::Csa(p) => vec![("w_q", &p.w_q), ("w_k", &p.w_k), ("w_v", &p.w_v), ("beta", &p.beta)],
            BlockParams::Glmha(p) => vec![
                ("w_q", &p.w_q),
                ("w_k", &p.w_k),
                ("w_v", &p.w_v),
                ("calib.dw_kernels", &p.calib.dw_kernels),
                ("calib.head_linear", &p.calib.head_linear),
                ("beta", &p.beta),
            ],
            BlockParams::PostProj(p) => vec![
                ("w_q", &p.w_q),
                ("w_k", &p.w_k),
                ("w_v", &p.w_v),
                ("e_k", &p.e_k),
                ("e_v", &p.e_v),
                ("beta", &p.beta),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            BlockParams::Csa(p) => vec![&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.beta],
            BlockParams::Glmha(p) => vec![
                &mut p.w_q,
                &mut p.w_k,
                &mut p.w_v,
                &mut p.calib.dw_kernels,
                &mut p.calib.head_linear,
                &mut p.beta,
            ],
            BlockParams::PostProj(p) => vec![&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.e_k, &mut p.e_v, &mut p.beta],
        }
    }

    /// Learnable entries excluding the per-head temperatures.
    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| *name != "beta")
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every tensor as a leaf, in binding order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(&'static str, Var)> {
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.leaf(t.clone())))
            .collect()
    }

    /// Runs the block on a fresh tape and returns the output `[n, HW]`.
    pub fn forward(&self, x: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = record_block(&mut tape, self, cfg, x)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Output plus each head's post-softmax attention map.
    pub fn forward_with_maps(&self, x: &Tensor, cfg: &AttnConfig) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let trace = record_block(&mut tape, self, cfg, x)?;
        let maps = trace.attention.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(trace.output).clone(), maps))
    }
}

/// Vars produced by recording one block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Var,
    pub params: Vec<(&'static str, Var)>,
    pub output: Var,
    /// Post-softmax attention map of each head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub input: Tensor,
    pub params: Vec<(&'static str, Tensor)>,
}

/// Binds `params` and `x` as leaves and records the block forward pass.
pub fn record_block(tape: &mut Tape, params: &BlockParams, cfg: &AttnConfig, x: &Tensor) -> Result<BlockTrace> {
    let input = tape.leaf(x.clone());
    let bound = params.bind(tape);
    let vars: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
    let (output, attention) = forward_vars(tape, params.variant(), cfg, input, &vars)?;
    Ok(BlockTrace {
        input,
        params: bound,
        output,
        attention,
    })
}

/// Reverse pass for a recorded block given the upstream gradient of its output.
pub fn block_backward(tape: &Tape, trace: &BlockTrace, loss_grad: Tensor) -> Result<BlockGradients> {
    let grads: Gradients = tape.backward_with(trace.output, loss_grad)?;
    Ok(BlockGradients {
        input: grads.wrt(tape, trace.input),
        params: trace
            .params
            .iter()
            .map(|&(name, v)| (name, grads.wrt(tape, v)))
            .collect(),
    })
}

fn check_input(tape: &Tape, cfg: &AttnConfig, x: Var) -> Result<()> {
    cfg.validate()?;
    let shape = tape.value(x).shape();
    if shape != [cfg.channels, cfg.spatial()] {
        return Err(Error::dim(
            "attention",
            format!(
                "input {shape:?} does not match config [{}, {}]",
                cfg.channels,
                cfg.spatial()
            ),
        ));
    }
    Ok(())
}

fn check_params(tape: &Tape, variant: Variant, cfg: &AttnConfig, vars: &[Var]) -> Result<()> {
    let layout = param_layout(variant, cfg);
    if layout.len() != vars.len() {
        return Err(Error::Config(format!(
            "{variant} expects {} parameter vars, got {}",
            layout.len(),
            vars.len()
        )));
    }
    for ((name, shape), &v) in layout.iter().zip(vars) {
        if tape.value(v).shape() != shape.as_slice() {
            return Err(Error::dim(
                "attention",
                format!("{name} has shape {:?}, config needs {shape:?}", tape.value(v).shape()),
            ));
        }
    }
    Ok(())
}

/// Records a block given already-bound parameter vars (in [`param_layout`] order).
/// Returns the output var and the per-head attention maps.
pub fn forward_vars(
    tape: &mut Tape,
    variant: Variant,
    cfg: &AttnConfig,
    x: Var,
    vars: &[Var],
) -> Result<(Var, Vec<Var>)> {
    check_input(tape, cfg, x)?;
    check_params(tape, variant, cfg, vars)?;
    let (z, maps) = match variant {
        Variant::Csa => {
            let q = tape.matmul(vars[0], x)?;
            let k = tape.matmul(vars[1], x)?;
            let v = tape.matmul(vars[2], x)?;
            multi_head(tape, cfg.heads, q, k, v, vars[3])?
        }
        Variant::Glmha => {
            let q = tape.matmul(vars[0], x)?;
            let q3 = tape.reshape(q, &[cfg.channels, cfg.height, cfg.width])?;
            let a = calibrate_on_tape(tape, q3, vars[3], vars[4])?;
            let xr = tape.row_scale_add(x, a, cfg.alpha)?;
            let k = tape.matmul(vars[1], xr)?;
            let v = tape.matmul(vars[2], xr)?;
            multi_head(tape, cfg.heads, q, k, v, vars[5])?
        }
        Variant::PostProj => {
            let q = tape.matmul(vars[0], x)?;
            let k_full = tape.matmul(vars[1], x)?;
            let v_full = tape.matmul(vars[2], x)?;
            let k = tape.matmul(vars[3], k_full)?;
            let v = tape.matmul(vars[4], v_full)?;
            multi_head(tape, cfg.heads, q, k, v, vars[5])?
        }
    };
    let out = tape.add(z, x)?;
    Ok((out, maps))
}

/// Per head `j`: `softmax(Q_j K_jᵀ / softplus(β_j)) V_j`, heads concatenated
/// along channels. Queries and keys are split into contiguous equal chunks.
fn multi_head(tape: &mut Tape, heads: usize, q: Var, k: Var, v: Var, beta_raw: Var) -> Result<(Var, Vec<Var>)> {
    let dq = tape.value(q).shape()[0] / heads;
    let dk = tape.value(k).shape()[0] / heads;
    let beta = tape.softplus(beta_raw);
    let mut outputs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for j in 0..heads {
        let qj = tape.slice_rows(q, j * dq, dq)?;
        let kj = tape.slice_rows(k, j * dk, dk)?;
        let vj = tape.slice_rows(v, j * dk, dk)?;
        let kt = tape.transpose(kj)?;
        let scores = tape.matmul(qj, kt)?;
        let bj = tape.element(beta, j)?;
        let attn = tape.softmax_rows(scores, bj)?;
        outputs.push(tape.matmul(attn, vj)?);
        maps.push(attn);
    }
    let merged = tape.concat_rows(&outputs)?;
    Ok((merged, maps))
}

pub fn csa_forward(x: &Tensor, p: &CsaParams, cfg: &AttnConfig) -> Result<Tensor> {
    BlockParams::Csa(p.clone()).forward(x, cfg)
}

pub fn glmha_forward(x: &Tensor, p: &GlmhaParams, cfg: &AttnConfig) -> Result<Tensor> {
    BlockParams::Glmha(p.clone()).forward(x, cfg)
}

pub fn postproj_forward(x: &Tensor, p: &PostProjParams, cfg: &AttnConfig) -> Result<Tensor> {
    BlockParams::PostProj(p.clone()).forward(x, cfg)
}
