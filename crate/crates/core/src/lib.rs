//! Channel-wise self-attention and its guided low-rank multi-head variant.
//!
//! The crate provides:
//! - a small dense tensor engine with tape-based reverse-mode gradients ([`tape`]),
//!   plus a finite-difference checker ([`gradcheck`]);
//! - the calibration network and instance re-weighting ([`calibration`]);
//! - CSA, GLMHA and a post-projection low-rank baseline ([`attention`]);
//! - exact parameter/FLOP accounting ([`cost`]);
//! - SVD-based spectrum analysis of attention maps ([`spectra`]);
//! - a deterministic synthetic denoising task and training loop ([`train`]);
//! - the `LRT1` tensor file format ([`io`]).

pub mod attention;
pub mod calibration;
pub mod config;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod rng;
pub mod spectra;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{
    block_backward, csa_forward, glmha_forward, merge_heads, postproj_forward, record_block, split_heads, BlockParams,
    BlockTrace, CsaParams, GlmhaParams, PostProjParams, Variant,
};
pub use calibration::{calibrate, reweight, CalibParams, CalibrationVector};
pub use config::AttnConfig;
pub use cost::{count_flops, count_params, param_reduction_ratio, CostReport};
pub use error::{Error, Result};
pub use gradcheck::{check_block, grad_check, GradCheckReport};
pub use spectra::{best_rank_m_error, spectrum, SpectrumReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{make_task, train, Model, ModelSpec, SyntheticTask, TaskSpec, TrainLog, TrainSettings};
