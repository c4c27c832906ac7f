//! Caption head used only during training: reconstructs the transcript
//! sentence from visual tokens and the sample's tag embeddings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::numerics::nn::{self, AttentionWeights};
use crate::numerics::{multi_head_attention, Bindings, Element, Graph, Init, ParamSpec, Var};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    pub max_len: usize,
}

impl CaptionTokenizer {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokens mapped to ids; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Training target: tokens followed by EOS, truncated to `max_len`.
    pub fn target_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.truncate(self.max_len.saturating_sub(1));
        ids.push(EOS);
        ids
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("#max_len={}\n", self.max_len);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        out
    }

    pub fn parse_tsv(text: &str, label: &str) -> Result<Self> {
        let mut max_len = None;
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(v) = line.strip_prefix("#max_len=") {
                max_len = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::format(label, Some(i + 1), "bad max_len"))?,
                );
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(label, Some(i + 1), "expected word<TAB>id"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format(label, Some(i + 1), "bad id"))?;
            if id != words.len() {
                return Err(Error::format(
                    label,
                    Some(i + 1),
                    format!("ids must be dense, expected {}", words.len()),
                ));
            }
            words.push(w.to_string());
        }
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS {
            return Err(Error::format(
                label,
                None,
                "special tokens must occupy ids 0-3",
            ));
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self {
            words,
            ids,
            max_len: max_len.unwrap_or(DEFAULT_MAX_LEN),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&read_to_string(path)?, &path.display().to_string())
    }
}

pub const DEFAULT_MAX_LEN: usize = 24;

/// Words with frequency >= `min_freq`, ordered by frequency desc then word.
pub fn build_tokenizer<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    min_freq: usize,
    max_len: usize,
) -> CaptionTokenizer {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *freq.entry(w.to_lowercase()).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, f)| *f >= min_freq && !SPECIALS.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect();
    let ids = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();
    CaptionTokenizer {
        words,
        ids,
        max_len,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDecoderConfig {
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl Default for TextDecoderConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mlp_hidden: 128,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TextDecoderConfig {
    pub fn param_specs(&self, dim: usize, vocab_size: usize) -> Vec<ParamSpec> {
        let p = "text_decoder";
        let mut specs = vec![
            ParamSpec::new(
                format!("{p}.tok_embed"),
                vec![vocab_size, dim],
                Init::Uniform { fan_in: dim },
            ),
            ParamSpec::new(
                format!("{p}.pos"),
                vec![self.max_len, dim],
                Init::Uniform { fan_in: dim },
            ),
        ];
        specs.extend(nn::layer_norm_specs(&format!("{p}.ln1"), dim));
        specs.extend(AttentionWeights::specs(&format!("{p}.self_attn"), dim));
        specs.extend(nn::layer_norm_specs(&format!("{p}.ln2"), dim));
        specs.extend(AttentionWeights::specs(&format!("{p}.cross"), dim));
        specs.extend(nn::layer_norm_specs(&format!("{p}.ln3"), dim));
        specs.extend(nn::mlp_specs(&format!("{p}.mlp"), dim, self.mlp_hidden));
        specs.extend(nn::layer_norm_specs(&format!("{p}.norm"), dim));
        specs.extend(nn::linear_specs(
            &format!("{p}.head"),
            dim,
            vocab_size,
            true,
        ));
        specs
    }
}

/// Teacher-forced next-token logits `[L, V]` for `target_ids`.
pub fn caption_logits<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    visual: Var,
    tag_context: Option<Var>,
    target_ids: &[usize],
    cfg: &TextDecoderConfig,
) -> Result<Var> {
    let len = target_ids.len();
    if len == 0 {
        return Err(Error::Validation("empty caption target".into()));
    }
    if len > cfg.max_len {
        return Err(Error::Validation(format!(
            "caption of {len} tokens exceeds max_len {}",
            cfg.max_len
        )));
    }
    let p = "text_decoder";
    let inputs: Vec<usize> = std::iter::once(BOS)
        .chain(target_ids[..len - 1].iter().copied())
        .collect();
    let tok = g.gather_rows(b.get(&format!("{p}.tok_embed"))?, &inputs)?;
    let pos = g.slice_rows(b.get(&format!("{p}.pos"))?, 0, len)?;
    let mut x = g.add(tok, pos)?;

    let h = nn::layer_norm(g, b, &format!("{p}.ln1"), x)?;
    let mask = nn::causal_mask(g, len);
    let w = AttentionWeights::bind(b, &format!("{p}.self_attn"))?;
    let a = multi_head_attention(g, h, h, h, &w, cfg.heads, Some(mask))?;
    x = g.add(x, a)?;

    let memory = match tag_context {
        Some(tags) => g.concat0(&[visual, tags])?,
        None => visual,
    };
    let h = nn::layer_norm(g, b, &format!("{p}.ln2"), x)?;
    let w = AttentionWeights::bind(b, &format!("{p}.cross"))?;
    let a = multi_head_attention(g, h, memory, memory, &w, cfg.heads, None)?;
    x = g.add(x, a)?;

    let h = nn::layer_norm(g, b, &format!("{p}.ln3"), x)?;
    let m = nn::mlp(g, b, &format!("{p}.mlp"), h)?;
    x = g.add(x, m)?;
    let x = nn::layer_norm(g, b, &format!("{p}.norm"), x)?;
    nn::linear(g, b, &format!("{p}.head"), x, true)
}

/// Mean teacher-forced cross-entropy over the target positions.
pub fn caption_loss<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    visual: Var,
    tag_context: Option<Var>,
    target_ids: &[usize],
    cfg: &TextDecoderConfig,
) -> Result<Var> {
    let logits = caption_logits(g, b, visual, tag_context, target_ids, cfg)?;
    g.cross_entropy(logits, target_ids)
}
