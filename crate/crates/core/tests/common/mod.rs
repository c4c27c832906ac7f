#![allow(dead_code)]

pub mod corpus;
pub mod oracles;
pub mod training;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgtag::embedding::TagEmbedder;
use surgtag::encoder::{EncoderConfig, ImageRaster};
use surgtag::fusion::{FusionConfig, FusionMode};
use surgtag::model::{Model, ModelConfig, TAG_TABLE};
use surgtag::numerics::{grad_check, Bindings, GradCheckReport, GradInput, Tensor};
use surgtag::tag_decoder::DecoderConfig;
use surgtag::text_decoder::{build_tokenizer, TextDecoderConfig};
use surgtag::training::{sample_loss, PreparedSample, TrainConfig};
use surgtag::vocab::{Category, Split, TagEntry, TagVocabulary};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for per-element finite differences.
pub fn tiny_config(mode: FusionMode, use_positional: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            dim: 4,
            layers: 1,
            heads: 2,
            mlp_hidden: 4,
        },
        fusion: FusionConfig {
            n_max: 4,
            heads: 2,
            use_positional,
            mode,
        },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            mlp_hidden: 4,
        },
        text: TextDecoderConfig {
            heads: 2,
            mlp_hidden: 4,
            max_len: 4,
        },
    }
}

/// A modest config for inference-level properties.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            dim: 16,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
        },
        fusion: FusionConfig {
            n_max: 8,
            heads: 2,
            use_positional: true,
            mode: FusionMode::Attention,
        },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
        },
        text: TextDecoderConfig {
            heads: 2,
            mlp_hidden: 16,
            max_len: 6,
        },
    }
}

pub fn vocab_of(names: &[&str], dim: usize) -> TagVocabulary {
    let entries = names
        .iter()
        .map(|n| TagEntry::new(n, Category::Other, Split::Both))
        .collect();
    TagVocabulary::from_entries(entries, &TagEmbedder::hashed(dim)).unwrap()
}

pub fn numbered_vocab(k: usize, dim: usize) -> TagVocabulary {
    let names: Vec<String> = (0..k).map(|i| format!("tag {i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    vocab_of(&refs, dim)
}

pub fn model_with(cfg: ModelConfig, k: usize, seed: u64) -> Model {
    let vocab = numbered_vocab(k, cfg.dim());
    let max_len = cfg.text.max_len;
    let tok = build_tokenizer(["the grasper holds the gallbladder"], 1, max_len);
    Model::init(cfg, vocab, tok, seed).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> ImageRaster {
    let n = cfg.image_height * cfg.image_width * cfg.channels;
    let px = (0..n).map(|_| rng.gen::<f32>()).collect();
    ImageRaster::new(cfg.image_height, cfg.image_width, cfg.channels, px).unwrap()
}

pub fn random_frames(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, n: usize) -> Vec<ImageRaster> {
    (0..n).map(|_| random_image(rng, cfg)).collect()
}

/// Finite-difference check of the full training loss (tag + weighted
/// caption) with respect to every trainable parameter of `model`.
pub fn composed_grad_check(
    model: &Model,
    sample: &PreparedSample,
    train: &TrainConfig,
    tol: f64,
) -> GradCheckReport {
    let inputs: Vec<GradInput> = model
        .params
        .iter()
        .map(|p| {
            let t = Tensor::from_f64(p.shape.clone(), &p.data).unwrap();
            if p.frozen {
                GradInput::frozen(p.name.clone(), t)
            } else {
                GradInput::new(p.name.clone(), t)
            }
        })
        .collect();
    let names: Vec<String> = inputs.iter().map(|i| i.name.clone()).collect();
    assert!(names.iter().any(|n| n == TAG_TABLE));
    let cfg = model.config.clone();
    grad_check(
        |g, vars| {
            let mut b = Bindings::default();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            Ok(sample_loss(g, &b, &cfg, sample, train)?.total)
        },
        &inputs,
        1e-5,
        tol,
    )
    .unwrap()
}

/// 32 single-frame samples over 8 tags; tag `k` is a bright 8x8 patch at
/// grid cell `k` of a 32x32 image, each sample carrying a distinct tag mask.
pub fn planted_patch_fixture() -> (Model, Vec<PreparedSample>) {
    let cfg = ModelConfig::default();
    let vocab = numbered_vocab(8, cfg.dim());
    let tok = build_tokenizer(["alpha beta gamma delta"], 1, 8);
    let model = Model::init(cfg, vocab, tok, 1).unwrap();
    let mut r = rng(3);
    let samples = (0..32)
        .map(|i| {
            let mut px: Vec<f32> = (0..1024).map(|_| r.gen::<f32>() * 0.2).collect();
            let mut targets = vec![0.0; 8];
            let mask = (i * 37 + 11) % 255 + 1;
            for (k, t) in targets.iter_mut().enumerate() {
                if mask >> k & 1 == 1 {
                    *t = 1.0;
                    let (py, pxx) = (k / 4, k % 4);
                    for y in 0..8 {
                        for x in 0..8 {
                            px[(py * 8 + y) * 32 + pxx * 8 + x] = 0.9;
                        }
                    }
                }
            }
            let tag_ids = (0..8).filter(|k| targets[*k] == 1.0).collect();
            PreparedSample {
                id: format!("{i}"),
                frames: vec![ImageRaster::new(32, 32, 1, px).unwrap()],
                targets,
                tag_ids,
                caption: vec![4, 5, 1],
            }
        })
        .collect();
    (model, samples)
}

pub fn order_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            dim: 32,
            layers: 1,
            heads: 2,
            mlp_hidden: 64,
        },
        fusion: FusionConfig {
            n_max: 4,
            heads: 2,
            use_positional: true,
            mode,
        },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            mlp_hidden: 64,
        },
        text: TextDecoderConfig {
            heads: 2,
            mlp_hidden: 32,
            max_len: 4,
        },
    }
}

/// Two-class frame-order task: a 4x4 patch crosses a 16x16 image over four
/// frames. Each pair shares frames and differs only in their order.
pub fn order_task(mode: FusionMode, model_seed: u64) -> (Model, Vec<PreparedSample>) {
    let cfg = order_config(mode);
    let vocab = vocab_of(&["left to right", "right to left"], cfg.dim());
    let tok = build_tokenizer(std::iter::empty(), 1, 4);
    let model = Model::init(cfg, vocab, tok, model_seed).unwrap();
    let mut r = rng(11);
    let mut samples = Vec::new();
    for p in 0..16 {
        let row = r.gen_range(0..4);
        let frames: Vec<ImageRaster> = (0..4)
            .map(|f| {
                let mut px: Vec<f32> = (0..256).map(|_| r.gen::<f32>() * 0.2).collect();
                for y in 0..4 {
                    for x in 0..4 {
                        px[(row * 4 + y) * 16 + f * 4 + x] = 0.9;
                    }
                }
                ImageRaster::new(16, 16, 1, px).unwrap()
            })
            .collect();
        let mut reversed = frames.clone();
        reversed.reverse();
        samples.push(PreparedSample {
            id: format!("{p}f"),
            frames,
            targets: vec![1.0, 0.0],
            tag_ids: vec![0],
            caption: vec![1],
        });
        samples.push(PreparedSample {
            id: format!("{p}r"),
            frames: reversed,
            targets: vec![0.0, 1.0],
            tag_ids: vec![1],
            caption: vec![1],
        });
    }
    (model, samples)
}
