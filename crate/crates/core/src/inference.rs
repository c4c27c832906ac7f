//! Image, fused-video, and per-frame-union inference paths.

use std::collections::BTreeSet;

use crate::encoder::{encode_frames, encode_image, ImageRaster};
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::model::{Model, ModelConfig};
use crate::numerics::{sigmoid, Bindings, Element, Graph, Var};
use crate::tag_decoder::{apply_threshold, decode, TagPrediction};
use crate::vocab::TagVocabulary;

/// Visual tokens `[T, D]`. One frame goes straight through the encoder
/// unless `always_fuse` is set; several frames are always fused.
pub fn visual_tokens<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    frames: &[ImageRaster],
    always_fuse: bool,
) -> Result<Var> {
    match frames {
        [] => Err(Error::Validation("no frames".into())),
        [single] if !always_fuse => encode_image(g, b, single, &cfg.encoder),
        _ => {
            let h = encode_frames(g, b, frames, &cfg.encoder)?;
            fuse(g, b, h, &cfg.fusion)
        }
    }
}

/// Indices of `n` frames spread evenly over `count`; all frames when
/// `count <= n`.
pub fn select_frame_indices(count: usize, n: usize) -> Vec<usize> {
    if count <= n || n == 0 {
        return (0..count).collect();
    }
    if n == 1 {
        return vec![(count - 1) / 2];
    }
    (0..n)
        .map(|i| {
            // nearest index, ties toward the earlier frame
            let num = i * (count - 1);
            let (q, r) = (num / (n - 1), num % (n - 1));
            if 2 * r > n - 1 {
                q + 1
            } else {
                q
            }
        })
        .collect()
}

pub fn image_logits(img: &ImageRaster, model: &Model, vocab: &TagVocabulary) -> Result<Vec<f64>> {
    let mut g = Graph::<f32>::new();
    let b = model.bind_inference(&mut g);
    let v = encode_image(&mut g, &b, img, &model.config.encoder)?;
    model.counters().bump_encode(1);
    let logits = decode(&mut g, &b, v, vocab, &model.config.decoder)?;
    model.counters().bump_decode();
    Ok(logits)
}

pub fn infer_image(
    img: &ImageRaster,
    model: &Model,
    vocab: &TagVocabulary,
    threshold: f64,
) -> Result<TagPrediction> {
    apply_threshold(&image_logits(img, model, vocab)?, threshold)
}

/// Logits from one decode over the fused representation of up to `n` frames.
pub fn video_logits(
    frames: &[ImageRaster],
    model: &Model,
    vocab: &TagVocabulary,
    n: usize,
) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::Validation("video has no frames".into()));
    }
    let picked: Vec<ImageRaster> = select_frame_indices(frames.len(), n)
        .into_iter()
        .map(|i| frames[i].clone())
        .collect();
    let mut g = Graph::<f32>::new();
    let b = model.bind_inference(&mut g);
    let h = encode_frames(&mut g, &b, &picked, &model.config.encoder)?;
    model.counters().bump_encode(picked.len() as u64);
    let v = fuse(&mut g, &b, h, &model.config.fusion)?;
    model.counters().bump_fuse();
    let logits = decode(&mut g, &b, v, vocab, &model.config.decoder)?;
    model.counters().bump_decode();
    Ok(logits)
}

pub fn infer_video(
    frames: &[ImageRaster],
    model: &Model,
    vocab: &TagVocabulary,
    threshold: f64,
    n: usize,
) -> Result<TagPrediction> {
    apply_threshold(&video_logits(frames, model, vocab, n)?, threshold)
}

/// Per-frame inference; the selection is the union of per-frame selections
/// and each reported logit is the per-tag maximum over frames.
pub fn infer_video_imagewise(
    frames: &[ImageRaster],
    model: &Model,
    vocab: &TagVocabulary,
    threshold: f64,
) -> Result<TagPrediction> {
    if frames.is_empty() {
        return Err(Error::Validation("video has no frames".into()));
    }
    let mut logits = vec![f64::NEG_INFINITY; vocab.len()];
    let mut selected = BTreeSet::new();
    for f in frames {
        let p = infer_image(f, model, vocab, threshold)?;
        for (m, &z) in logits.iter_mut().zip(&p.logits) {
            *m = m.max(z);
        }
        selected.extend(p.selected);
    }
    let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(TagPrediction {
        logits,
        probabilities,
        selected,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_selection_matches_uniform_rule() {
        assert_eq!(select_frame_indices(100, 4), vec![0, 33, 66, 99]);
        assert_eq!(select_frame_indices(3, 8), vec![0, 1, 2]);
        assert_eq!(select_frame_indices(5, 1), vec![2]);
        assert_eq!(select_frame_indices(4, 1), vec![1]);
    }
}
