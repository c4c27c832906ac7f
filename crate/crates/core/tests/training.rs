mod common;

use common::training::{synthetic, tiny_train, tree_bytes};
use proptest::prelude::*;
use surgtag::checkpoint::{load_checkpoint, save_checkpoint};
use surgtag::data_engine::TripletSample;
use surgtag::fusion::FusionMode;
use surgtag::inference::visual_tokens;
use surgtag::model::TAG_TABLE;
use surgtag::numerics::Graph;
use surgtag::text_decoder::caption_logits;
use surgtag::training::*;
use surgtag::vocab::Split;

#[test]
fn composed_loss_gradients_match_finite_differences() {
    let mut r = common::rng(1);
    for (seed, mode, frames) in [
        (0, FusionMode::Attention, 1),
        (1, FusionMode::Attention, 3),
        (2, FusionMode::Average, 2),
    ] {
        let model = common::model_with(common::tiny_config(mode, true), 3, seed);
        let sample = PreparedSample {
            id: "x".into(),
            frames: common::random_frames(&mut r, &model.config.encoder, frames),
            targets: vec![1.0, 0.0, 1.0],
            tag_ids: vec![0, 2],
            caption: model.tokenizer.target_ids("the grasper holds"),
        };
        for kind in [TagLossKind::Bce, TagLossKind::Asl] {
            let train = TrainConfig {
                tag_loss: kind,
                caption_weight: 0.7,
                ..TrainConfig::for_stage(Stage::Pretrain)
            };
            let rep = common::composed_grad_check(&model, &sample, &train, 1e-4);
            let worst = rep
                .entries
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
            assert!(
                rep.passed,
                "seed {seed} {kind:?}: {:?} {worst:?}",
                rep.diagnostic
            );
            assert_eq!(rep.excluded, vec![TAG_TABLE.to_string()]);
        }
    }
}

#[test]
fn caption_logits_are_causal() {
    let model = common::model_with(common::small_config(), 4, 7);
    let mut r = common::rng(2);
    let frames = common::random_frames(&mut r, &model.config.encoder, 1);
    let logits = |ids: &[usize]| {
        let mut g = Graph::<f64>::new();
        let b = model.bind(&mut g, false);
        let v = visual_tokens(&mut g, &b, &model.config, &frames, false).unwrap();
        let l = caption_logits(&mut g, &b, v, None, ids, &model.config.text).unwrap();
        g.value(l).clone()
    };
    let v = model.tokenizer.vocab_size();
    let a = logits(&[4, 5, 6, 7, 1]);
    let b = logits(&[4, 5, 8 % v, 4, 1]);
    // input at position i is the target at i - 1, so rows 0..=2 see only 4, 5
    assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
    assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
}

#[test]
fn adamw_matches_reference_update() {
    let mut model = common::model_with(common::tiny_config(FusionMode::Attention, true), 2, 3);
    let before = model.params.clone();
    let mut grads = Grads::new();
    for (k, p) in model.params.iter().filter(|p| !p.frozen).enumerate() {
        grads.insert(
            p.name.clone(),
            (0..p.numel())
                .map(|i| ((i + k) as f64 * 0.37).sin())
                .collect(),
        );
    }
    let cfg = TrainConfig {
        weight_decay: 0.05,
        ..TrainConfig::for_stage(Stage::Pretrain)
    };
    let mut state = AdamState::default();
    let lr = 1e-3;
    adamw_step(&mut model.params, &grads, &mut state, lr, &cfg).unwrap();
    adamw_step(&mut model.params, &grads, &mut state, lr, &cfg).unwrap();
    for (p0, p1) in before.iter().zip(model.params.iter()) {
        if p0.frozen {
            assert_eq!(p0.data, p1.data);
            continue;
        }
        let g = &grads[&p0.name];
        for i in 0..g.len() {
            // two steps with the same gradient: m_hat = g, v_hat = g^2
            let mut x = p0.data[i];
            for _ in 0..2 {
                x *= 1.0 - lr * 0.05;
                x -= lr * g[i] / (g[i].abs() + 1e-8);
                x = x as f32 as f64;
            }
            assert!(
                (x - p1.data[i]).abs() < 1e-6,
                "{} [{i}]: {x} vs {}",
                p0.name,
                p1.data[i]
            );
        }
    }
}

#[test]
fn schedule_reproduces_reference_constants() {
    let cfg = TrainConfig::for_stage(Stage::Pretrain);
    assert_eq!(lr_at(0, 0, &cfg), 5e-7);
    assert_eq!(lr_at(3000, 0, &cfg), 1e-4);
    assert!((lr_at(1500, 0, &cfg) - (5e-7 + (1e-4 - 5e-7) / 2.0)).abs() < 1e-18);
    for e in 1..5 {
        assert!(
            (lr_at(3000 + e as u64 * 100, e, &cfg) - 1e-4 * 0.9f64.powi(e as i32)).abs() < 1e-18
        );
    }
    assert_eq!(lr_at(1_000_000, 100, &cfg), 5e-7);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let model = common::model_with(common::small_config(), 5, 11);
    let mut state = TrainingState::new(3);
    let (samples, loader) = synthetic(&model, 4, 2, 1);
    let mut trained = model.clone();
    let train = TrainConfig {
        epochs: 1,
        ..tiny_train()
    };
    run_stage(
        &samples,
        &mut trained,
        &train,
        &mut state,
        &d.path().join("run"),
        &loader,
    )
    .unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    save_checkpoint(&a, &trained, Some(&train), &state).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.model.params, trained.params);
    assert_eq!(loaded.state, state);
    assert_eq!(loaded.train.as_ref(), Some(&train));
    save_checkpoint(&b, &loaded.model, loaded.train.as_ref(), &loaded.state).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let d = tempfile::tempdir().unwrap();
    let model = common::model_with(common::tiny_config(FusionMode::Attention, true), 2, 1);
    save_checkpoint(d.path(), &model, None, &TrainingState::new(0)).unwrap();
    let w = d.path().join("weights.bin");
    let mut bytes = std::fs::read(&w).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&w, bytes).unwrap();
    let err = load_checkpoint(d.path()).unwrap_err();
    assert!(err.is_usage(), "{err}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut model = common::model_with(common::small_config(), 5, 21);
        let (samples, loader) = synthetic(&model, 7, 2, 4);
        let mut state = TrainingState::new(9);
        run_stage(
            &samples,
            &mut model,
            &tiny_train(),
            &mut state,
            &d.path().join(name),
            &loader,
        )
        .unwrap();
        tree_bytes(&d.path().join(name))
    };
    assert_eq!(run("x"), run("y"));
}

#[test]
fn resume_equals_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let base = common::model_with(common::small_config(), 5, 22);
    let (samples, loader) = synthetic(&base, 7, 2, 5);
    let train = TrainConfig {
        epochs: 3,
        ..tiny_train()
    };

    let mut full = base.clone();
    let mut s_full = TrainingState::new(1);
    run_stage(
        &samples,
        &mut full,
        &train,
        &mut s_full,
        &d.path().join("full"),
        &loader,
    )
    .unwrap();

    let mut part = base.clone();
    let mut s_part = TrainingState::new(1);
    let first = TrainConfig {
        epochs: 1,
        ..train.clone()
    };
    run_stage(
        &samples,
        &mut part,
        &first,
        &mut s_part,
        &d.path().join("part"),
        &loader,
    )
    .unwrap();
    let ck = load_checkpoint(&epoch_dir(&d.path().join("part"), 1)).unwrap();
    let (mut resumed, mut s_res) = (ck.model, ck.state);
    run_stage(
        &samples,
        &mut resumed,
        &train,
        &mut s_res,
        &d.path().join("resumed"),
        &loader,
    )
    .unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(s_res, s_full);
    assert_eq!(
        std::fs::read(d.path().join("full/final/weights.bin")).unwrap(),
        std::fs::read(d.path().join("resumed/final/weights.bin")).unwrap()
    );
}

#[test]
fn frozen_table_survives_both_stages() {
    let d = tempfile::tempdir().unwrap();
    let mut model = common::model_with(common::small_config(), 5, 23);
    let table0 = model.params.get(TAG_TABLE).unwrap().data.clone();
    let (samples, loader) = synthetic(&model, 5, 1, 6);
    let mut st = TrainingState::new(2);
    run_stage(
        &samples,
        &mut model,
        &tiny_train(),
        &mut st,
        &d.path().join("pre"),
        &loader,
    )
    .unwrap();
    let mut ft = load_checkpoint(&d.path().join("pre/final")).unwrap().model;
    let fine = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::for_stage(Stage::Finetune)
    };
    let mut st2 = TrainingState::new(3);
    let ft_samples: Vec<TripletSample> = samples
        .iter()
        .map(|s| TripletSample {
            split: Split::Finetune,
            ..s.clone()
        })
        .collect();
    run_stage(
        &ft_samples,
        &mut ft,
        &fine,
        &mut st2,
        &d.path().join("ft"),
        &loader,
    )
    .unwrap();
    let after = load_checkpoint(&d.path().join("ft/final")).unwrap().model;
    assert_eq!(after.params.get(TAG_TABLE).unwrap().data, table0);
    let moved = after
        .params
        .iter()
        .zip(model.params.iter())
        .any(|(a, b)| !a.frozen && a.data != b.data);
    assert!(moved, "finetuning changed no trainable weight");
}

#[test]
fn zero_epochs_writes_the_initial_weights() {
    let d = tempfile::tempdir().unwrap();
    let mut model = common::model_with(common::small_config(), 4, 24);
    let before = model.params.clone();
    let (samples, loader) = synthetic(&model, 3, 1, 7);
    let train = TrainConfig {
        epochs: 0,
        ..tiny_train()
    };
    let rep = run_stage(
        &samples,
        &mut model,
        &train,
        &mut TrainingState::new(0),
        d.path(),
        &loader,
    )
    .unwrap();
    assert_eq!(rep.steps, 0);
    assert_eq!(
        load_checkpoint(&d.path().join(FINAL_DIR))
            .unwrap()
            .model
            .params,
        before
    );
}

#[test]
fn max_steps_stops_mid_epoch() {
    let d = tempfile::tempdir().unwrap();
    let mut model = common::model_with(common::small_config(), 4, 25);
    let (samples, loader) = synthetic(&model, 9, 1, 8);
    let train = TrainConfig {
        max_steps: Some(4),
        ..tiny_train()
    };
    let rep = run_stage(
        &samples,
        &mut model,
        &train,
        &mut TrainingState::new(0),
        d.path(),
        &loader,
    )
    .unwrap();
    assert_eq!(rep.steps, 4);
    let lines = std::fs::read_to_string(d.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn missing_frames_skip_the_sample() {
    let d = tempfile::tempdir().unwrap();
    let mut model = common::model_with(common::small_config(), 4, 26);
    let (mut samples, loader) = synthetic(&model, 4, 1, 9);
    samples[1].frame_refs = vec!["nowhere".into()];
    let rep = run_stage(
        &samples,
        &mut model,
        &tiny_train(),
        &mut TrainingState::new(0),
        d.path(),
        &loader,
    )
    .unwrap();
    assert_eq!((rep.samples_used, rep.samples_skipped), (3, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_stays_within_bounds(step in 0u64..20_000, epoch in 0usize..40) {
        let cfg = TrainConfig::for_stage(Stage::Pretrain);
        let lr = lr_at(step, epoch, &cfg);
        prop_assert!(lr >= cfg.min_lr.min(cfg.warmup_lr) && lr <= cfg.init_lr);
    }

    #[test]
    fn lr_decays_across_epochs_after_warmup(epoch in 0usize..30) {
        let cfg = TrainConfig::for_stage(Stage::Pretrain);
        prop_assert!(lr_at(5000, epoch + 1, &cfg) <= lr_at(5000, epoch, &cfg));
    }
}
