//! In-memory training fixtures.

use std::collections::HashMap;
use std::path::Path;

use surgtag::data_engine::TripletSample;
use surgtag::model::Model;
use surgtag::training::{MemoryLoader, Stage, TrainConfig};
use surgtag::vocab::Split;

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        warmup_steps: 2,
        batch_size: 3,
        epochs: 2,
        init_lr: 1e-3,
        caption_weight: 0.7,
        ..TrainConfig::for_stage(Stage::Pretrain)
    }
}

/// Samples over `model`'s vocabulary with frames held in memory.
pub fn synthetic(
    model: &Model,
    n: usize,
    frames: usize,
    seed: u64,
) -> (Vec<TripletSample>, MemoryLoader) {
    let mut r = super::rng(seed);
    let mut store = HashMap::new();
    let names: Vec<String> = model.vocab().names().map(str::to_string).collect();
    let samples = (0..n)
        .map(|i| {
            let refs: Vec<String> = (0..frames).map(|f| format!("s{i}/f{f}")).collect();
            for rf in &refs {
                store.insert(
                    rf.clone(),
                    super::random_image(&mut r, &model.config.encoder),
                );
            }
            TripletSample {
                sample_id: format!("v:{i}"),
                frame_refs: refs,
                text: "the grasper holds the gallbladder".into(),
                tags: vec![
                    names[i % names.len()].clone(),
                    names[(i + 2) % names.len()].clone(),
                ],
                split: Split::Pretrain,
            }
        })
        .collect();
    (samples, MemoryLoader(store))
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
