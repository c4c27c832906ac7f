mod common;

use proptest::prelude::*;
use rand::Rng;
use surgtag::fusion::{fuse, FusionConfig, FusionMode};
use surgtag::inference::*;
use surgtag::model::Model;
use surgtag::numerics::{Bindings, Graph, ParamSet, Tensor};

fn fusion_params(cfg: &FusionConfig, dim: usize, seed: u64) -> ParamSet {
    ParamSet::init(
        &surgtag::fusion::describe_params(cfg, dim),
        &mut common::rng(seed),
    )
    .unwrap()
}

fn random_h(seed: u64, n: usize, t: usize, d: usize) -> Tensor<f64> {
    let mut r = common::rng(seed);
    Tensor::new(
        vec![n, t, d],
        (0..n * t * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn run_fuse(cfg: &FusionConfig, params: &ParamSet, h: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let b: Bindings = params.bind(&mut g, false);
    let x = g.constant(h.clone());
    let y = fuse(&mut g, &b, x, cfg).unwrap();
    g.value(y).clone()
}

fn permute_frames(h: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let (n, rest) = (h.shape()[0], h.numel() / h.shape()[0]);
    assert_eq!(order.len(), n);
    let data = order
        .iter()
        .flat_map(|&i| h.data()[i * rest..(i + 1) * rest].to_vec())
        .collect();
    Tensor::new(h.shape().to_vec(), data).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fuse_maps_frames_to_tokens() {
    let (t, d) = (5, 8);
    for mode in [FusionMode::Attention, FusionMode::Average] {
        let cfg = FusionConfig {
            n_max: 8,
            heads: 2,
            use_positional: true,
            mode,
        };
        let p = fusion_params(&cfg, d, 1);
        for n in [1, 2, 5, 8] {
            assert_eq!(
                run_fuse(&cfg, &p, &random_h(n as u64, n, t, d)).shape(),
                &[t, d]
            );
        }
    }
}

#[test]
fn average_mode_is_the_exact_mean() {
    let cfg = FusionConfig {
        mode: FusionMode::Average,
        ..FusionConfig::default()
    };
    for n in [1, 2, 5, 8] {
        let h = random_h(10 + n as u64, n, 3, 4);
        let y = run_fuse(&cfg, &ParamSet::new(), &h);
        for j in 0..12 {
            let mut s = 0.0;
            for f in 0..n {
                s += h.data()[f * 12 + j];
            }
            assert_eq!(y.data()[j], s / n as f64);
        }
    }
}

#[test]
fn too_many_frames_is_a_config_error() {
    let cfg = FusionConfig {
        n_max: 2,
        heads: 2,
        ..FusionConfig::default()
    };
    let p = fusion_params(&cfg, 4, 1);
    let mut g = Graph::<f64>::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(random_h(1, 3, 2, 4));
    assert!(matches!(
        fuse(&mut g, &b, x, &cfg),
        Err(surgtag::Error::Config(_))
    ));
}

#[test]
fn permutation_invariance_iff_no_positional_embedding() {
    for seed in 0..5 {
        for use_positional in [false, true] {
            let cfg = FusionConfig {
                n_max: 8,
                heads: 2,
                use_positional,
                mode: FusionMode::Attention,
            };
            let p = fusion_params(&cfg, 8, seed);
            let h = random_h(100 + seed, 5, 3, 8);
            let a = run_fuse(&cfg, &p, &h);
            let b = run_fuse(&cfg, &p, &permute_frames(&h, &[3, 0, 4, 2, 1]));
            let diff = max_abs_diff(&a, &b);
            if use_positional {
                assert!(
                    diff > 1e-6,
                    "seed {seed}: positional fusion ignored order ({diff})"
                );
            } else {
                assert!(diff < 1e-12, "seed {seed}: order changed output by {diff}");
            }
        }
    }
}

#[test]
fn frame_selection_examples() {
    assert_eq!(select_frame_indices(100, 4), vec![0, 33, 66, 99]);
    assert_eq!(select_frame_indices(3, 8), vec![0, 1, 2]);
    assert_eq!(select_frame_indices(9, 1), vec![4]);
    // 2 * 3 / 4 = 1.5 ties toward the earlier frame
    assert_eq!(select_frame_indices(4, 5), vec![0, 1, 2, 3]);
    assert_eq!(select_frame_indices(4, 3), vec![0, 1, 3]);
}

#[test]
fn extending_the_vocabulary_keeps_existing_logits() {
    let mut r = common::rng(4);
    for seed in 0..5 {
        let model = common::model_with(common::small_config(), 6, seed);
        let img = common::random_image(&mut r, &model.config.encoder);
        let base = image_logits(&img, &model, model.vocab()).unwrap();
        let ext = model
            .vocab()
            .extend(&["clip applier", "cystic plate"], &model.embedder)
            .unwrap();
        let wide = image_logits(&img, &model, &ext).unwrap();
        assert_eq!(wide.len(), base.len() + 2);
        for (a, b) in base.iter().zip(&wide) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn imagewise_selection_is_the_union_of_frames() {
    let mut r = common::rng(8);
    let model = common::model_with(common::small_config(), 10, 2);
    let frames = common::random_frames(&mut r, &model.config.encoder, 4);
    let vocab = model.vocab();
    let threshold = 0.5;
    let pred = infer_video_imagewise(&frames, &model, vocab, threshold).unwrap();
    let mut union = std::collections::BTreeSet::new();
    for f in &frames {
        union.extend(infer_image(f, &model, vocab, threshold).unwrap().selected);
    }
    assert_eq!(pred.selected, union);
}

#[test]
fn decoder_runs_once_for_video_and_per_frame_imagewise() {
    let mut r = common::rng(9);
    let model = common::model_with(common::small_config(), 5, 3);
    let frames = common::random_frames(&mut r, &model.config.encoder, 8);
    model.counters().reset();
    infer_video(&frames, &model, model.vocab(), 0.5, 8).unwrap();
    let v = model.counters().snapshot();
    assert_eq!((v.encode, v.fuse, v.decode), (8, 1, 1));
    model.counters().reset();
    infer_video_imagewise(&frames, &model, model.vocab(), 0.5).unwrap();
    let w = model.counters().snapshot();
    assert_eq!((w.encode, w.fuse, w.decode), (8, 0, 8));
}

#[test]
fn single_frame_video_still_fuses() {
    let mut r = common::rng(10);
    let model = common::model_with(common::small_config(), 5, 4);
    let frames = common::random_frames(&mut r, &model.config.encoder, 1);
    model.counters().reset();
    let video = video_logits(&frames, &model, model.vocab(), 8).unwrap();
    assert_eq!(model.counters().snapshot().fuse, 1);
    let image = image_logits(&frames[0], &model, model.vocab()).unwrap();
    assert_ne!(video, image);
}

#[test]
fn inference_is_deterministic_and_clone_safe() {
    let mut r = common::rng(12);
    let model = common::model_with(common::small_config(), 7, 5);
    let frames = common::random_frames(&mut r, &model.config.encoder, 3);
    let copy: Model = model.clone();
    assert_eq!(
        video_logits(&frames, &model, model.vocab(), 8).unwrap(),
        video_logits(&frames, &copy, copy.vocab(), 8).unwrap()
    );
}

proptest! {
    #[test]
    fn frame_selection_is_sorted_and_in_range(count in 1usize..200, n in 1usize..16) {
        let idx = select_frame_indices(count, n);
        prop_assert_eq!(idx.len(), count.min(n));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < count));
    }

    #[test]
    fn threshold_selection_is_monotone(seed in 0u64..50, lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let model = common::model_with(common::tiny_config(FusionMode::Attention, true), 6, seed);
        let mut r = common::rng(seed);
        let img = common::random_image(&mut r, &model.config.encoder);
        let low = infer_image(&img, &model, model.vocab(), lo).unwrap();
        let high = infer_image(&img, &model, model.vocab(), lo + gap).unwrap();
        prop_assert!(high.selected.is_subset(&low.selected));
    }
}
