//! Per-tag logits from visual tokens and frozen tag embeddings.
//!
//! Every tag embedding is a query that cross-attends to the visual tokens;
//! there is no attention between tag queries, so a tag's logit depends only
//! on its own embedding and the visual input. Appending tags therefore never
//! changes existing logits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::TagEmbedder;
use crate::error::{Error, Result};
use crate::numerics::nn::{self, AttentionWeights};
use crate::numerics::{multi_head_attention, sigmoid, Bindings, Element, Graph, ParamSpec, Var};
use crate::vocab::TagVocabulary;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl DecoderConfig {
    pub fn param_specs(&self, dim: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for i in 0..self.layers {
            let p = format!("decoder.blocks.{i}");
            specs.extend(nn::layer_norm_specs(&format!("{p}.ln1"), dim));
            specs.extend(AttentionWeights::specs(&format!("{p}.cross"), dim));
            specs.extend(nn::layer_norm_specs(&format!("{p}.ln2"), dim));
            specs.extend(nn::mlp_specs(&format!("{p}.mlp"), dim, self.mlp_hidden));
        }
        specs.extend(nn::layer_norm_specs("decoder.norm", dim));
        specs.extend(nn::linear_specs("decoder.head", dim, 1, true));
        specs
    }
}

/// Logits `[K]` for tag queries `[K, D]` against visual tokens `[T, D]`.
pub fn decode_logits<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    visual: Var,
    tag_queries: Var,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let vs = g.shape(visual).to_vec();
    let qs = g.shape(tag_queries).to_vec();
    if vs.len() != 2 || qs.len() != 2 || vs[1] != qs[1] {
        return Err(Error::Config(format!(
            "tag embedding dim {:?} does not match visual feature dim {:?}",
            qs.get(1),
            vs.get(1)
        )));
    }
    let k = qs[0];
    let mut x = tag_queries;
    for i in 0..cfg.layers {
        let p = format!("decoder.blocks.{i}");
        let h = nn::layer_norm(g, b, &format!("{p}.ln1"), x)?;
        let w = AttentionWeights::bind(b, &format!("{p}.cross"))?;
        let a = multi_head_attention(g, h, visual, visual, &w, cfg.heads, None)?;
        x = g.add(x, a)?;
        let h = nn::layer_norm(g, b, &format!("{p}.ln2"), x)?;
        let m = nn::mlp(g, b, &format!("{p}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    let x = nn::layer_norm(g, b, "decoder.norm", x)?;
    let logits = nn::linear(g, b, "decoder.head", x, true)?;
    g.reshape(logits, &[k])
}

/// Logits for every tag of `vocab`; empty when the vocabulary is empty.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    visual: Var,
    vocab: &TagVocabulary,
    cfg: &DecoderConfig,
) -> Result<Vec<f64>> {
    let dim = g.shape(visual).last().copied().unwrap_or(0);
    if vocab.dim() != dim {
        return Err(Error::Config(format!(
            "tag embedding dim {} does not match visual feature dim {dim}",
            vocab.dim()
        )));
    }
    if vocab.is_empty() {
        return Ok(Vec::new());
    }
    let q = g.constant(vocab.embedding_tensor()?);
    let logits = decode_logits(g, b, visual, q, cfg)?;
    Ok(g.value(logits).to_f64_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagPrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub selected: BTreeSet<usize>,
    pub threshold: f64,
}

/// Select every tag whose probability is at least `threshold`.
pub fn apply_threshold(logits: &[f64], threshold: f64) -> Result<TagPrediction> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let probabilities: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let selected = probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(TagPrediction {
        logits: logits.to_vec(),
        probabilities,
        selected,
        threshold,
    })
}

pub fn extend_vocabulary(
    vocab: &TagVocabulary,
    new_names: &[&str],
    provider: &TagEmbedder,
) -> Result<TagVocabulary> {
    vocab.extend(new_names, provider)
}
