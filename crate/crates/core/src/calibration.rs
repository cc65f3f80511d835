//! Instance calibration: a small network mapping the query embedding to one
//! weight per channel in (−1, 1), and the re-weighting it drives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of the calibration network. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibParams {
    /// `[C, k, k]` depthwise kernels.
    pub dw_kernels: Tensor,
    /// `[C/h, C/h]` linear map shared by every head.
    pub head_linear: Tensor,
}

impl CalibParams {
    pub fn zeros(channels: usize, heads: usize, kernel: usize) -> Result<Self> {
        let d = head_dim(channels, heads)?;
        Ok(CalibParams {
            dw_kernels: Tensor::zeros(&[channels, kernel, kernel])?,
            head_linear: Tensor::zeros(&[d, d])?,
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, heads: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let d = head_dim(channels, heads)?;
        Ok(CalibParams {
            dw_kernels: Tensor::randn(&[channels, kernel, kernel], 1.0 / kernel as f64, rng)?,
            head_linear: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw_kernels.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.dw_kernels.shape()[1]
    }

    pub fn heads(&self) -> usize {
        self.channels() / self.head_linear.shape()[0]
    }

    /// `C·k² + (C/h)²`.
    pub fn param_count(&self) -> usize {
        self.dw_kernels.numel() + self.head_linear.numel()
    }

    fn validate(&self) -> Result<()> {
        let (c, k, k2) = self.dw_kernels.dims3()?;
        let (d, d2) = self.head_linear.dims2()?;
        if k != k2 || d != d2 || c % d != 0 {
            return Err(Error::dim(
                "calibrate",
                format!(
                    "inconsistent calibration weights: kernels {:?}, linear {:?}",
                    self.dw_kernels.shape(),
                    self.head_linear.shape()
                ),
            ));
        }
        Ok(())
    }
}

fn head_dim(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::dim(
            "calibrate",
            format!("{channels} channels cannot be split into {heads} heads"),
        ));
    }
    Ok(channels / heads)
}

/// Per-channel weights, each in (−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationVector(Tensor);

impl CalibrationVector {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::dim(
                "calibration vector",
                format!("expected rank 1, got {:?}", values.shape()),
            ));
        }
        Ok(CalibrationVector(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.0.numel() == 0
    }
}

/// Records the calibration network on `tape`:
/// max pool to `k×k` → valid `k×k` depthwise conv → GELU → shared per-head
/// linear map over contiguous channel chunks → tanh. Returns a `[C]` var.
pub fn calibrate_on_tape(tape: &mut Tape, query: Var, dw_kernels: Var, head_linear: Var) -> Result<Var> {
    let (c, h, w) = tape.value(query).dims3()?;
    let k = tape.value(dw_kernels).shape()[1];
    let d = tape.value(head_linear).shape()[0];
    if h < k || w < k {
        return Err(Error::dim(
            "calibrate",
            format!("spatial dims {h}x{w} smaller than kernel {k}"),
        ));
    }
    if c % d != 0 {
        return Err(Error::dim(
            "calibrate",
            format!("{c} channels not divisible into heads of {d}"),
        ));
    }
    let pooled = tape.adaptive_max_pool2d(query, k)?;
    let conv = tape.depthwise_conv2d(pooled, dw_kernels, Padding::Valid)?;
    let act = tape.gelu(conv);
    // rows of `chunks` are the per-head slices of the channel vector
    let chunks = tape.reshape(act, &[c / d, d])?;
    let wt = tape.transpose(head_linear)?;
    let mixed = tape.matmul(chunks, wt)?;
    let flat = tape.reshape(mixed, &[c])?;
    Ok(tape.tanh(flat))
}

/// Computes the calibration vector for a query embedding shaped `[C, H, W]`.
pub fn calibrate(query: &Tensor, params: &CalibParams) -> Result<CalibrationVector> {
    params.validate()?;
    let (c, _, _) = query.dims3()?;
    if c != params.channels() {
        return Err(Error::dim(
            "calibrate",
            format!("query has {c} channels, weights expect {}", params.channels()),
        ));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let dw = tape.leaf(params.dw_kernels.clone());
    let lin = tape.leaf(params.head_linear.clone());
    let a = calibrate_on_tape(&mut tape, q, dw, lin)?;
    CalibrationVector::new(tape.value(a).clone())
}

/// `X + X ⊙ αA`: row `c` of `x` (shape `[C, HW]`) scaled by `1 + α·A_c`.
pub fn reweight(x: &Tensor, a: &CalibrationVector, alpha: f64) -> Result<Tensor> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::domain("reweight", format!("alpha must be >= 0, got {alpha}")));
    }
    crate::ops::row_scale_add(x, a.values(), alpha)
}
