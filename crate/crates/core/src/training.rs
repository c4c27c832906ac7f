//! Two-stage training: schedule, AdamW, the joint tag + caption step, and
//! the epoch loop with per-epoch checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::save_checkpoint;
use crate::data_engine::TripletSample;
use crate::encoder::ImageRaster;
use crate::error::{Error, Result};
use crate::inference::visual_tokens;
use crate::model::{Model, ModelConfig, TAG_TABLE};
use crate::numerics::{round_f32, Bindings, Element, Graph, ParamSet, Var};
use crate::tag_decoder::decode_logits;
use crate::text_decoder::caption_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagLossKind {
    Bce,
    Asl,
}

pub const ASL_GAMMA_NEG: f64 = 4.0;
pub const ASL_GAMMA_POS: f64 = 0.0;
pub const ASL_CLIP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub init_lr: f64,
    pub min_lr: f64,
    pub lr_decay: f64,
    pub warmup_lr: f64,
    pub warmup_steps: u64,
    pub caption_weight: f64,
    pub tag_loss: TagLossKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, init_lr, min_lr) = match stage {
            Stage::Pretrain => (10, 1e-4, 5e-7),
            Stage::Finetune => (4, 5e-6, 0.0),
        };
        Self {
            stage,
            epochs,
            batch_size: 26,
            weight_decay: 0.05,
            init_lr,
            min_lr,
            lr_decay: 0.9,
            warmup_lr: 5e-7,
            warmup_steps: 3000,
            caption_weight: 1.0,
            tag_loss: TagLossKind::Bce,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
        }
    }

    /// Stage defaults overlaid with the keys of a JSON object.
    pub fn from_json(stage: Stage, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_stage(stage))
            .map_err(|e| Error::json("train config", e))?;
        let obj = overrides
            .as_object()
            .ok_or_else(|| Error::Config("train config must be a JSON object".into()))?;
        for (k, v) in obj {
            if base.get(k).is_none() && k != "max_steps" {
                return Err(Error::Config(format!("unknown train config key {k:?}")));
            }
            base[k] = v.clone();
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::json("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("init_lr", self.init_lr),
            ("warmup_lr", self.warmup_lr),
            ("lr_decay", self.lr_decay),
            ("eps", self.eps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        let non_negative = [
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
            ("caption_weight", self.caption_weight),
        ];
        if let Some((k, v)) = non_negative
            .iter()
            .find(|(_, v)| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
        }
        if self.min_lr > self.init_lr {
            return Err(Error::Config(format!(
                "min_lr {} exceeds init_lr {}",
                self.min_lr, self.init_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_lr` to `init_lr`, then per-epoch decay
/// floored at `min_lr`.
pub fn lr_at(step: u64, epoch: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        let frac = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_lr + (cfg.init_lr - cfg.warmup_lr) * frac;
    }
    (cfg.init_lr * cfg.lr_decay.powi(epoch as i32)).max(cfg.min_lr)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

pub type Grads = BTreeMap<String, Vec<f64>>;

/// One AdamW update over every non-frozen parameter that has a gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.numel() != g.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape.clone(),
                rhs: vec![g.len()],
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for p in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let Some(g) = grads.get(&p.name) else {
            continue;
        };
        let mo = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
        for i in 0..g.len() {
            let mut x = p.data[i];
            x -= lr * cfg.weight_decay * x;
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g[i];
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = mo.m[i] / bc1;
            let vhat = mo.v[i] / bc2;
            x -= lr * mhat / (vhat.sqrt() + cfg.eps);
            p.data[i] = round_f32(x);
        }
    }
    Ok(())
}

pub trait FrameLoader: Sync {
    fn load(&self, frame_ref: &str) -> Result<ImageRaster>;
}

/// Loads frames from disk; relative references resolve against `root`.
#[derive(Debug, Clone)]
pub struct FsLoader {
    pub root: PathBuf,
}

impl FrameLoader for FsLoader {
    fn load(&self, frame_ref: &str) -> Result<ImageRaster> {
        let p = Path::new(frame_ref);
        let path = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        };
        ImageRaster::load(&path)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLoader(pub HashMap<String, ImageRaster>);

impl FrameLoader for MemoryLoader {
    fn load(&self, frame_ref: &str) -> Result<ImageRaster> {
        self.0
            .get(frame_ref)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown frame {frame_ref}")))
    }
}

/// A sample with frames loaded and labels resolved against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub frames: Vec<ImageRaster>,
    pub targets: Vec<f64>,
    pub tag_ids: Vec<usize>,
    pub caption: Vec<usize>,
}

pub fn prepare_sample(
    sample: &TripletSample,
    model: &Model,
    loader: &dyn FrameLoader,
) -> Result<PreparedSample> {
    let frames = sample
        .frame_refs
        .iter()
        .map(|r| loader.load(r))
        .collect::<Result<Vec<_>>>()?;
    let vocab = model.vocab();
    let mut targets = vec![0.0; vocab.len()];
    let mut tag_ids = Vec::new();
    for t in &sample.tags {
        match vocab.index_of(t) {
            Some(i) => {
                if targets[i] == 0.0 {
                    tag_ids.push(i);
                }
                targets[i] = 1.0;
            }
            None => tracing::warn!(sample = %sample.sample_id, tag = %t, "tag not in vocabulary"),
        }
    }
    tag_ids.sort_unstable();
    Ok(PreparedSample {
        id: sample.sample_id.clone(),
        frames,
        targets,
        tag_ids,
        caption: model.tokenizer.target_ids(&sample.text),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub tag: Var,
    pub caption: Var,
    pub total: Var,
}

/// tag loss + caption_weight * caption loss for one sample, using bound
/// parameters (including the frozen tag table).
pub fn sample_loss<T: Element>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    s: &PreparedSample,
    train: &TrainConfig,
) -> Result<LossVars> {
    let visual = visual_tokens(g, b, cfg, &s.frames, false)?;
    let table = b.get(TAG_TABLE)?;
    let logits = decode_logits(g, b, visual, table, &cfg.decoder)?;
    let targets: Vec<T> = s.targets.iter().map(|&t| T::of(t)).collect();
    let tag = match train.tag_loss {
        TagLossKind::Bce => g.bce_with_logits(logits, &targets)?,
        TagLossKind::Asl => {
            g.asymmetric_loss(logits, &targets, ASL_GAMMA_NEG, ASL_GAMMA_POS, ASL_CLIP)?
        }
    };
    let context = if s.tag_ids.is_empty() {
        None
    } else {
        Some(g.gather_rows(table, &s.tag_ids)?)
    };
    let caption = caption_loss(g, b, visual, context, &s.caption, &cfg.text)?;
    let weighted = g.scale(caption, T::of(train.caption_weight));
    let total = g.add(tag, weighted)?;
    Ok(LossVars {
        tag,
        caption,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub tag: f64,
    pub caption: f64,
    pub total: f64,
}

struct SampleOutput {
    losses: StepLosses,
    grads: Vec<(String, Vec<f64>)>,
}

fn forward_backward(
    model: &Model,
    s: &PreparedSample,
    train: &TrainConfig,
) -> Result<SampleOutput> {
    let mut g = Graph::<f64>::new();
    let b = model.bind(&mut g, true);
    let l = sample_loss(&mut g, &b, &model.config, s, train)?;
    g.backward(l.total)?;
    let mut grads: Vec<(String, Vec<f64>)> = b
        .iter()
        .filter_map(|(name, v)| g.grad(v).map(|gr| (name.to_string(), gr.to_vec())))
        .collect();
    grads.sort_by(|a, b| a.0.cmp(&b.0));
    let item = |v: Var| g.value(v).data()[0];
    Ok(SampleOutput {
        losses: StepLosses {
            tag: item(l.tag),
            caption: item(l.caption),
            total: item(l.total),
        },
        grads,
    })
}

/// Mean losses and gradients over `batch`, without updating anything.
pub fn batch_gradients(
    batch: &[PreparedSample],
    model: &Model,
    train: &TrainConfig,
) -> Result<(StepLosses, Grads)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let outputs = batch
        .par_iter()
        .map(|s| forward_backward(model, s, train))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut grads: Grads = BTreeMap::new();
    let mut sum = StepLosses {
        tag: 0.0,
        caption: 0.0,
        total: 0.0,
    };
    // accumulate in batch order so the result does not depend on scheduling
    for o in outputs {
        sum.tag += o.losses.tag;
        sum.caption += o.losses.caption;
        sum.total += o.losses.total;
        for (name, g) in o.grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    grads
        .values_mut()
        .for_each(|g| g.iter_mut().for_each(|x| *x /= n));
    Ok((
        StepLosses {
            tag: sum.tag / n,
            caption: sum.caption / n,
            total: sum.total / n,
        },
        grads,
    ))
}

/// Forward, backward, and one optimizer step over `batch`.
pub fn train_step(
    batch: &[PreparedSample],
    model: &mut Model,
    state: &mut AdamState,
    train: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let (losses, grads) = batch_gradients(batch, model, train)?;
    adamw_step(&mut model.params, &grads, state, lr, train)?;
    Ok(losses)
}

/// Optimizer, shuffling RNG, and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainingState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            optimizer: AdamState::default(),
            rng,
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsLine {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub tag_loss: f64,
    pub caption_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub samples_used: usize,
    pub samples_skipped: usize,
    pub steps: u64,
    pub epochs: usize,
    pub last: Option<StepLosses>,
    pub final_checkpoint: PathBuf,
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch-{epoch:03}"))
}

pub const FINAL_DIR: &str = "final";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Shuffled mini-batch epochs from `state` onwards. Writes a checkpoint
/// after each epoch, `final/` at the end, and appends to `metrics.jsonl`.
pub fn run_stage(
    samples: &[TripletSample],
    model: &mut Model,
    train: &TrainConfig,
    state: &mut TrainingState,
    out_dir: &Path,
    loader: &dyn FrameLoader,
) -> Result<StageReport> {
    train.validate()?;
    if model.vocab().is_empty() && train.epochs > state.epoch {
        return Err(Error::Validation(
            "cannot train with an empty tag vocabulary".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut prepared = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        match prepare_sample(s, model, loader) {
            Ok(p) => prepared.push(p),
            Err(e) => {
                tracing::warn!(sample = %s.sample_id, error = %e, "skipping sample");
                skipped += 1;
            }
        }
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(format!("opening {}", metrics_path.display()), e))?;
    let mut last = None;
    let limit = train.max_steps.unwrap_or(u64::MAX);
    'epochs: for epoch in state.epoch..train.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(train.batch_size) {
            if state.step >= limit {
                break 'epochs;
            }
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let lr = lr_at(state.step, epoch, train);
            let losses = train_step(&batch, model, &mut state.optimizer, train, lr)?;
            let line = MetricsLine {
                step: state.step,
                epoch,
                lr,
                tag_loss: losses.tag,
                caption_loss: losses.caption,
                total: losses.total,
            };
            let text = serde_json::to_string(&line).map_err(|e| Error::json("metrics", e))?;
            writeln!(metrics, "{text}")
                .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
            tracing::debug!(step = state.step, epoch, lr, total = losses.total, "step");
            state.step += 1;
            last = Some(losses);
        }
        state.epoch = epoch + 1;
        save_checkpoint(&epoch_dir(out_dir, state.epoch), model, Some(train), state)?;
    }
    let final_dir = out_dir.join(FINAL_DIR);
    save_checkpoint(&final_dir, model, Some(train), state)?;
    Ok(StageReport {
        samples_used: prepared.len(),
        samples_skipped: skipped,
        steps: state.step,
        epochs: state.epoch,
        last,
        final_checkpoint: final_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    #[test]
    fn schedule_constants() {
        let cfg = TrainConfig::for_stage(Stage::Pretrain);
        assert_eq!(lr_at(0, 0, &cfg), 5e-7);
        assert_eq!(lr_at(3000, 0, &cfg), 1e-4);
        assert!((lr_at(5000, 2, &cfg) - 8.1e-5).abs() < 1e-18);
        assert_eq!(lr_at(10_000_000, 200, &cfg), 5e-7);
    }

    #[test]
    fn overrides_reject_unknown_keys() {
        assert!(TrainConfig::from_json(Stage::Pretrain, &serde_json::json!({"epoch": 3})).is_err());
        let c = TrainConfig::from_json(Stage::Finetune, &serde_json::json!({"epochs": 1})).unwrap();
        assert_eq!(c.epochs, 1);
        assert_eq!(c.init_lr, 5e-6);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut ps = ParamSet::new();
        ps.push(Parameter::new("w", vec![3], vec![0.5, -1.0, 2.0], false).unwrap())
            .unwrap();
        let before = ps.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::for_stage(Stage::Pretrain)
        };
        let grads = Grads::from([("w".to_string(), vec![0.0; 3])]);
        adamw_step(&mut ps, &grads, &mut AdamState::default(), 1e-3, &cfg).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut ps = ParamSet::new();
        ps.push(Parameter::new("w", vec![1], vec![1.0], false).unwrap())
            .unwrap();
        let grads = Grads::from([("w".to_string(), vec![f64::NAN])]);
        let mut st = AdamState::default();
        let err = adamw_step(
            &mut ps,
            &grads,
            &mut st,
            1e-3,
            &TrainConfig::for_stage(Stage::Pretrain),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.t, 0);
    }
}
