use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_REDUCTION: f64 = 2.0;
/// Effective temperature every head starts from.
pub const DEFAULT_BETA: f64 = 1.0;

/// Static hyperparameters of one attention block.
///
/// `reduction` is the K/V size-reduction factor `r`. Each head keeps
/// `ceil((channels / heads) / r)` key/value channels, which is exactly
/// `channels / (r · heads)` whenever that divides evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub reduction: f64,
    pub alpha: f64,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl AttnConfig {
    /// Config with the default `alpha` and `kernel`.
    pub fn new(channels: usize, heads: usize, reduction: f64, height: usize, width: usize) -> Self {
        AttnConfig {
            channels,
            heads,
            reduction,
            alpha: DEFAULT_ALPHA,
            kernel: DEFAULT_KERNEL,
            height,
            width,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_reduction(mut self, reduction: f64) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.heads == 0 {
            return fail(format!(
                "channels ({}) and heads ({}) must be positive",
                self.channels, self.heads
            ));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if !(self.reduction.is_finite() && self.reduction >= 1.0) {
            return fail(format!("reduction must be a finite value >= 1, got {}", self.reduction));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be an odd positive integer, got {}", self.kernel));
        }
        if self.height < self.kernel || self.width < self.kernel {
            return fail(format!(
                "spatial dims {}x{} smaller than kernel {}",
                self.height, self.width, self.kernel
            ));
        }
        Ok(())
    }

    /// Channels per head, `n / h`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Reduced key/value channels per head.
    pub fn kv_head_dim(&self) -> usize {
        let exact = self.head_dim() as f64 / self.reduction;
        ((exact - 1e-9).ceil() as usize).clamp(1, self.head_dim())
    }

    /// Total reduced key/value channels `C'`.
    pub fn kv_channels(&self) -> usize {
        self.heads * self.kv_head_dim()
    }

    /// Sequence embedding length `H·W`.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}
