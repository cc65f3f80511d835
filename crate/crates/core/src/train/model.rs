use serde::{Deserialize, Serialize};

use crate::attention::{forward_vars, param_layout, BlockParams, Variant};
use crate::config::AttnConfig;
use crate::cost::{count_flops, count_params};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Multiplier on the value projection at initialisation.
pub const VALUE_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub variant: Variant,
    pub config: AttnConfig,
}

/// Stack of attention blocks, each followed by a pointwise feed-forward layer
/// `z + W₂·gelu(W₁·z)` with `W₁, W₂ ∈ ℝ^{n×n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: Vec<BlockSpec>,
}

impl ModelSpec {
    pub fn uniform(variant: Variant, config: AttnConfig, depth: usize) -> Self {
        ModelSpec {
            blocks: vec![BlockSpec { variant, config }; depth],
        }
    }

    /// Depth-3 model over 16 channels at 8×8 with two heads.
    pub fn default_toy(variant: Variant) -> Self {
        Self::uniform(variant, AttnConfig::new(16, 2, 2.0, 8, 8), 3)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.config.channels)
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.blocks
            .first()
            .map_or((0, 0), |b| (b.config.height, b.config.width))
    }

    /// Same configs with every block switched to `variant`.
    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelSpec {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSpec {
                    variant,
                    config: b.config.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .blocks
            .first()
            .ok_or_else(|| Error::Config("model needs at least one block".into()))?;
        for (i, b) in self.blocks.iter().enumerate() {
            b.config.validate()?;
            let c = &b.config;
            if c.channels != first.config.channels || (c.height, c.width) != (first.config.height, first.config.width) {
                return Err(Error::Config(format!(
                    "block {i} has dims [{}, {}x{}], block 0 has [{}, {}x{}]",
                    c.channels, c.height, c.width, first.config.channels, first.config.height, first.config.width
                )));
            }
        }
        Ok(())
    }

    /// Sum of attention-block parameter counts.
    pub fn attention_params(&self) -> Result<u64> {
        self.blocks.iter().map(|b| count_params(&b.config, b.variant)).sum()
    }

    /// Sum of attention-block forward FLOPs for one input.
    pub fn attention_flops(&self) -> Result<u64> {
        self.blocks.iter().map(|b| count_flops(&b.config, b.variant)).sum()
    }

    /// `variant` column label: the shared variant name, or names joined by `+`.
    pub fn variant_label(&self) -> String {
        let names: Vec<&str> = self.blocks.iter().map(|b| b.variant.name()).collect();
        if names.windows(2).all(|w| w[0] == w[1]) {
            names.first().copied().unwrap_or("").to_string()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub blocks: Vec<BlockParams>,
    pub ffn: Vec<FeedForward>,
}

/// Vars from recording a model forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub input: Var,
    pub output: Var,
    /// Every trainable tensor, in [`Model::params_mut`] order.
    pub params: Vec<Var>,
    /// Per layer, per head attention maps.
    pub attention: Vec<Vec<Var>>,
}

impl Model {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed, rng::stream::MODEL_INIT);
        let n = spec.channels();
        let std = 1.0 / (n as f64).sqrt();
        let mut blocks = Vec::with_capacity(spec.depth());
        let mut ffn = Vec::with_capacity(spec.depth());
        for b in &spec.blocks {
            let mut block = BlockParams::init(b.variant, &b.config, &mut rng)?;
            // start every block near the identity: the attention branch is scaled down
            let names = param_layout(b.variant, &b.config);
            // and query/key scales keep the initial scores O(1) so the softmax is not saturated
            let qk_scale = (b.config.spatial() as f64).powf(-0.25);
            for ((name, _), t) in names.iter().zip(block.tensors_mut()) {
                match *name {
                    "w_v" => *t = t.map(|v| v * VALUE_INIT_SCALE),
                    "w_q" | "w_k" => *t = t.map(|v| v * qk_scale),
                    _ => {}
                }
            }
            blocks.push(block);
            ffn.push(FeedForward {
                w1: Tensor::randn(&[n, n], std, &mut rng)?,
                w2: Tensor::randn(&[n, n], 0.1 * std, &mut rng)?,
            });
        }
        Ok(Model {
            spec: spec.clone(),
            blocks,
            ffn,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Trainable tensors: each block's parameters followed by its `W₁`, `W₂`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (b, f) in self.blocks.iter_mut().zip(&mut self.ffn) {
            out.extend(b.tensors_mut());
            out.push(&mut f.w1);
            out.push(&mut f.w2);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.ffn.iter().map(|f| f.w1.numel() + f.w2.numel()).sum::<usize>()
    }

    pub fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<ModelTrace> {
        let input = tape.leaf(x.clone());
        let mut z = input;
        let mut params = Vec::new();
        let mut attention = Vec::with_capacity(self.depth());
        for ((block, spec), f) in self.blocks.iter().zip(&self.spec.blocks).zip(&self.ffn) {
            let vars: Vec<Var> = block.bind(tape).into_iter().map(|(_, v)| v).collect();
            let (out, maps) = forward_vars(tape, spec.variant, &spec.config, z, &vars)?;
            params.extend(vars);
            let w1 = tape.leaf(f.w1.clone());
            let w2 = tape.leaf(f.w2.clone());
            params.push(w1);
            params.push(w2);
            let hidden = tape.matmul(w1, out)?;
            let act = tape.gelu(hidden);
            let mixed = tape.matmul(w2, act)?;
            z = tape.add(out, mixed)?;
            attention.push(maps);
        }
        Ok(ModelTrace {
            input,
            output: z,
            params,
            attention,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, x)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Post-softmax attention maps for input `x`, indexed `[layer][head]`.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, x)?;
        Ok(trace
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }
}
