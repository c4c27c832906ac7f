//! Temporal fusion of per-frame token features `[N, T, D]` into a single
//! video representation `[T, D]`.
//!
//! Attention mode treats every token position as its own length-`N`
//! sequence over frames: frame positional embeddings are added, one shared
//! self-attention layer runs across frames with a residual and layer norm,
//! and the result is averaged over frames. Average mode is the parameter-free
//! mean over frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, AttentionWeights};
use crate::numerics::{multi_head_attention, Bindings, Element, Graph, Init, ParamSpec, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Attention,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_max: usize,
    pub heads: usize,
    pub use_positional: bool,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_max: 8,
            heads: 4,
            use_positional: true,
            mode: FusionMode::Attention,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("fusion n_max must be at least 1".into()));
        }
        if self.mode == FusionMode::Attention
            && (self.heads == 0 || !dim.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!(
                "fusion dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters of the fusion layer; empty in average mode.
pub fn describe_params(cfg: &FusionConfig, dim: usize) -> Vec<ParamSpec> {
    if cfg.mode == FusionMode::Average {
        return Vec::new();
    }
    let mut specs = AttentionWeights::specs("fusion.attn", dim);
    specs.extend(nn::layer_norm_specs("fusion.norm", dim));
    if cfg.use_positional {
        specs.push(ParamSpec::new(
            "fusion.pos",
            vec![cfg.n_max, dim],
            Init::Uniform { fan_in: dim },
        ));
    }
    specs
}

/// `[N, T, D] -> [T, D]`.
pub fn fuse<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    h_images: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let shape = g.shape(h_images).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "fuse",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::Validation("fusion needs at least one frame".into()));
    }
    if n > cfg.n_max {
        return Err(Error::Config(format!(
            "{n} frames exceed fusion n_max {}",
            cfg.n_max
        )));
    }
    match cfg.mode {
        FusionMode::Average => g.mean_axis(h_images, 0),
        FusionMode::Attention => {
            // one sequence over frames per token position
            let mut x = g.permute(h_images, &[1, 0, 2])?;
            if cfg.use_positional {
                let pos = b.get("fusion.pos")?;
                let pos = g.slice_rows(pos, 0, n)?;
                x = g.add_broadcast(x, pos)?;
            }
            let w = AttentionWeights::bind(b, "fusion.attn")?;
            let a = multi_head_attention(g, x, x, x, &w, cfg.heads, None)?;
            let y = g.add(x, a)?;
            let y = nn::layer_norm(g, b, "fusion.norm", y)?;
            g.mean_axis(y, 1)
        }
    }
}
