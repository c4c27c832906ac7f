//! Command-line surface: vocabulary and dataset construction, annotation,
//! training, evaluation, tagging, and the latency benchmark.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::data_engine::{
    annotate_clips, assemble_dataset, ingest_transcript, load_frames_manifest, read_dataset,
    to_jsonl, FrameIndex, RemoteFilter, StopPhraseFilter, TranscriptSegment, VisualFilter,
};
use crate::encoder::ImageRaster;
use crate::error::{read_to_string, Error, Result};
use crate::evaluation::{csv_row, evaluate, read_records, write_records, EvalRecord, CSV_HEADER};
use crate::inference::{image_logits, select_frame_indices, video_logits};
use crate::label_engine::{
    annotate_images, build_vocabulary, entity_observations, extract_actions, extract_entities,
    load_gazetteer, tag_sentence, triplet_observations, vlm_observations, AnnotationRecord,
    Stoplist, VlmAnnotation,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::sigmoid;
use crate::tag_decoder::apply_threshold;
use crate::text_decoder::build_tokenizer;
use crate::training::{run_stage, FsLoader, Stage, TagLossKind, TrainConfig, TrainingState};
use crate::transport::{
    serve_lines, FnTransport, HttpTransport, JsonTransport, RetryPolicy, SubprocessTransport,
};
use crate::vocab::{entries_to_tsv, load_vocab_entries, Split, TagEntry, TagVocabulary};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "surgtag",
    version,
    about = "Open-vocabulary surgical image and video tagging"
)]
pub struct Cli {
    /// Seed for every random choice; recorded in the run manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tag vocabulary from transcripts and optional VLM annotations.
    BuildVocab(BuildVocabArgs),
    /// Build an image-tag-text dataset from transcripts and frame manifests.
    BuildDataset(BuildDatasetArgs),
    /// Annotate images through a VLM service.
    Annotate(AnnotateArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint or stored score records.
    Eval(EvalArgs),
    /// Tag one image or a directory of video frames.
    Tag(TagArgs),
    /// Compare fused video inference against per-frame inference.
    Bench(BenchArgs),
    #[command(hide = true)]
    MockVlm(MockVlmArgs),
    #[command(hide = true)]
    MockFilter(MockFilterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Pretrain,
    Finetune,
    Both,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Finetune => Split::Finetune,
            SplitArg::Both => Split::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageArg {
    Pretrain,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TagLossArg {
    Bce,
    Asl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Image,
    Video,
    Imagewise,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub gazetteer: PathBuf,
    #[arg(long)]
    pub stoplist: Option<PathBuf>,
    #[arg(long, num_args = 0..)]
    pub transcripts: Vec<PathBuf>,
    /// JSONL written by `annotate`.
    #[arg(long)]
    pub vlm_annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub min_freq: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub gazetteer: PathBuf,
    #[arg(long, num_args = 0..)]
    pub transcripts: Vec<PathBuf>,
    /// `VIDEO_ID=PATH`, or `PATH` whose file name up to the first dot is the video id.
    #[arg(long, num_args = 0..)]
    pub frames_manifest: Vec<String>,
    /// `mock`, an `http://` URL, or `cmd:<command line>`.
    #[arg(long, default_value = "mock")]
    pub filter: String,
    /// Stop phrases for the mock filter.
    #[arg(long)]
    pub stop_phrases: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n_frames: usize,
    #[arg(long, value_enum, default_value = "pretrain")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnnotateArgs {
    /// Image references sent to the service.
    #[arg(long, num_args = 1..)]
    pub images: Vec<String>,
    /// `http://` URL, `cmd:<command line>`, or `mock:<fixture.json>`.
    #[arg(long)]
    pub vlm: String,
    /// Vocabulary whose names are sent as candidate tags.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Required for a fresh model; with `--init` it extends the label space.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON `{"model": {...}, "train": {...}}`; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint's weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue this checkpoint's run exactly.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Root for relative frame references (default: the working directory).
    #[arg(long)]
    pub frames_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub init_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub caption_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub tag_loss: Option<TagLossArg>,
    #[arg(long, default_value_t = 2)]
    pub tokenizer_min_freq: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate stored score records instead of running a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
    pub records: Option<PathBuf>,
    /// Label space (default: the checkpoint's vocabulary).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "video")]
    pub mode: Mode,
    #[arg(long, default_value_t = 8)]
    pub n_frames: usize,
    /// Root for relative frame references (default: the working directory).
    #[arg(long)]
    pub frames_root: Option<PathBuf>,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Append a group-mAP row to this CSV (header written when new).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Method name for the CSV row (default: the mode).
    #[arg(long)]
    pub method: Option<String>,
    /// Also write the per-sample score records.
    #[arg(long)]
    pub records_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TagArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(
        long,
        conflicts_with = "frames_dir",
        required_unless_present = "frames_dir"
    )]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long, default_value_t = crate::tag_decoder::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Comma-separated tags appended to the vocabulary for this call.
    #[arg(long)]
    pub add_tags: Option<String>,
    /// Video path: fused (`video`) or per-frame union (`imagewise`).
    #[arg(long, value_enum, default_value = "video")]
    pub mode: Mode,
    #[arg(long, default_value_t = 8)]
    pub n_frames: usize,
    /// Write the run manifest here instead of stderr.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Extra synthetic tags appended to the vocabulary before timing.
    #[arg(long, default_value_t = 0)]
    pub extra_tags: usize,
    /// Write the run manifest here instead of stderr.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MockVlmArgs {
    /// JSON object mapping image reference to `{"tags", "caption"}`.
    #[arg(long)]
    pub fixture: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MockFilterArgs {
    #[arg(long)]
    pub stop_phrases: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Value,
    pub config_digest: String,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 of a file, or of a directory's sorted `relpath\0digest\n` listing.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(digest_path(&path.join(&rel))?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for e in entries {
        let p = e
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

struct Run {
    command: &'static str,
    args: Value,
    seed: u64,
    started: u64,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, args: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command,
            args: serde_json::to_value(args).map_err(|e| Error::json("arguments", e))?,
            seed,
            started: unix_now(),
            inputs: Vec::new(),
        })
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn manifest(&self) -> Result<RunManifest> {
        let config = serde_json::to_vec(
            &json!({ "command": self.command, "args": self.args, "seed": self.seed }),
        )
        .map_err(|e| Error::json("arguments", e))?;
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: digest_path(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config_digest: hex::encode(Sha256::digest(config)),
            inputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
        })
    }

    /// Writes the manifest to `path`, or to stderr when `path` is `None`.
    fn finish(&self, path: Option<&Path>) -> Result<()> {
        let m = self.manifest()?;
        match path {
            Some(p) => write_json(p, &m),
            None => {
                let line = serde_json::to_string(&m).map_err(|e| Error::json("run manifest", e))?;
                eprintln!("{line}");
                Ok(())
            }
        }
    }
}

/// `<out>.<suffix>` next to an output file.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    write_text(path, &s)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn open_transport(spec: &str) -> Result<Box<dyn JsonTransport>> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(Box::new(HttpTransport::new(spec)))
    } else if let Some(cmd) = spec.strip_prefix("cmd:") {
        Ok(Box::new(SubprocessTransport::from_command_line(cmd)?))
    } else if let Some(path) = spec.strip_prefix("mock:") {
        let fixture = load_vlm_fixture(Path::new(path))?;
        Ok(Box::new(FnTransport(move |req: &Value| {
            Ok(mock_vlm_reply(&fixture, req))
        })))
    } else {
        Err(Error::Config(format!(
            "unrecognised service {spec:?}; expected http://, cmd:, or mock:"
        )))
    }
}

fn load_vlm_fixture(path: &Path) -> Result<HashMap<String, Value>> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::format(path.display().to_string(), Some(e.line()), e.to_string()))
}

fn mock_vlm_reply(fixture: &HashMap<String, Value>, req: &Value) -> Value {
    match req.get("image_ref").and_then(Value::as_str) {
        Some(r) => fixture
            .get(r)
            .cloned()
            .unwrap_or_else(|| json!({ "error": format!("no annotation for {r}") })),
        None => json!({ "error": "request lacks image_ref" }),
    }
}

/// Frame manifest flag: `VIDEO_ID=PATH` or a bare path.
fn parse_manifest_flag(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((id, p)) if !id.is_empty() => (id.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let id = name.split('.').next().unwrap_or_default().to_string();
            (id, p)
        }
    }
}

fn read_annotations(path: &Path) -> Result<Vec<VlmAnnotation>> {
    let label = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&label, Some(i + 1), e.to_string()))?;
        out.extend(rec.annotation);
    }
    Ok(out)
}

fn load_segments(paths: &[PathBuf]) -> Result<Vec<TranscriptSegment>> {
    let mut out = Vec::new();
    for p in paths {
        require_file(p, "transcript")?;
        out.extend(ingest_transcript(p)?);
    }
    Ok(out)
}

pub fn cmd_build_vocab(a: &BuildVocabArgs, seed: u64) -> Result<()> {
    let mut run = Run::new("build-vocab", a, seed)?;
    require_file(&a.gazetteer, "gazetteer")?;
    run.input(&a.gazetteer);
    let gaz = load_gazetteer(&a.gazetteer)?;
    let stoplist = match &a.stoplist {
        Some(p) => {
            require_file(p, "stoplist")?;
            run.input(p);
            Stoplist::load(p)?
        }
        None => Stoplist::default(),
    };
    let segments = load_segments(&a.transcripts)?;
    a.transcripts.iter().for_each(|p| run.input(p));
    let mut entities = Vec::new();
    let mut triplets = Vec::new();
    for seg in &segments {
        let id = seg.id();
        entities.extend(entity_observations(&id, &extract_entities(&seg.text, &gaz)));
        triplets.extend(triplet_observations(
            &id,
            &extract_actions(&seg.text, &gaz, seg.index),
            &gaz,
        ));
    }
    let annotations = match &a.vlm_annotations {
        Some(p) => {
            require_file(p, "annotation file")?;
            run.input(p);
            read_annotations(p)?
        }
        None => Vec::new(),
    };
    let (n_entities, n_triplets) = (entities.len(), triplets.len());
    let vlm = vlm_observations(&annotations);
    let n_vlm = vlm.len();
    let entries = build_vocabulary(
        entities,
        triplets,
        vlm,
        a.min_freq,
        &stoplist,
        a.split.into(),
    );
    write_text(&a.out, &entries_to_tsv(&entries))?;
    let mut by_category = std::collections::BTreeMap::new();
    for e in &entries {
        *by_category.entry(e.category.as_str()).or_insert(0usize) += 1;
    }
    write_json(
        &sidecar(&a.out, "stats.json"),
        &json!({
            "segments": segments.len(),
            "entity_observations": n_entities,
            "triplet_observations": n_triplets,
            "vlm_observations": n_vlm,
            "vlm_annotations": annotations.len(),
            "min_freq": a.min_freq,
            "tags": entries.len(),
            "by_category": by_category,
        }),
    )?;
    tracing::info!(tags = entries.len(), out = %a.out.display(), "vocabulary written");
    run.finish(Some(&sidecar(&a.out, "manifest.json")))
}

pub fn cmd_build_dataset(a: &BuildDatasetArgs, seed: u64, jobs: usize) -> Result<()> {
    let mut run = Run::new("build-dataset", a, seed)?;
    require_file(&a.vocab, "vocabulary")?;
    require_file(&a.gazetteer, "gazetteer")?;
    run.input(&a.vocab);
    run.input(&a.gazetteer);
    if a.n_frames == 0 {
        return Err(Error::Validation("--n-frames must be at least 1".into()));
    }
    let entries = load_vocab_entries(&a.vocab)?;
    let vocab = TagVocabulary::from_entries(entries, &crate::embedding::TagEmbedder::hashed(8))?;
    let gaz = load_gazetteer(&a.gazetteer)?;
    let segments = load_segments(&a.transcripts)?;
    a.transcripts.iter().for_each(|p| run.input(p));
    let mut indexes: HashMap<String, FrameIndex> = HashMap::new();
    for spec in &a.frames_manifest {
        let (id, path) = parse_manifest_flag(spec);
        require_file(&path, "frames manifest")?;
        run.input(&path);
        if indexes
            .insert(id.clone(), load_frames_manifest(&path)?)
            .is_some()
        {
            return Err(Error::Validation(format!(
                "two frame manifests for video {id:?}"
            )));
        }
    }

    let stop;
    let transport;
    let remote;
    let filter: &dyn VisualFilter = if a.filter == "mock" {
        stop = match &a.stop_phrases {
            Some(p) => {
                require_file(p, "stop phrase list")?;
                run.input(p);
                StopPhraseFilter::load(p)?
            }
            None => StopPhraseFilter::default(),
        };
        &stop
    } else {
        transport = open_transport(&a.filter)?;
        remote = RemoteFilter {
            transport: transport.as_ref(),
            policy: RetryPolicy {
                concurrency: jobs,
                ..RetryPolicy::default()
            },
        };
        &remote
    };

    let mut by_video: Vec<(String, Vec<TranscriptSegment>)> = Vec::new();
    for seg in segments {
        match by_video.iter_mut().find(|(v, _)| *v == seg.video_id) {
            Some((_, list)) => list.push(seg),
            None => by_video.push((seg.video_id.clone(), vec![seg])),
        }
    }
    let tagger = |text: &str| {
        tag_sentence(text, &gaz)
            .into_iter()
            .map(|(t, _)| t)
            .collect()
    };
    let mut clips = Vec::new();
    let mut failures = 0;
    for (video, segs) in &by_video {
        let index = indexes.get(video);
        if index.is_none() {
            tracing::warn!(video = %video, "no frames manifest; clips will have no frames");
        }
        let (c, f) = annotate_clips(segs, index, filter, tagger, a.n_frames);
        clips.extend(c);
        failures += f;
    }
    let (samples, mut stats) = assemble_dataset(&clips, &vocab, a.split.into())?;
    stats.filter_failures = failures;
    write_text(&a.out, &to_jsonl(&samples)?)?;
    write_json(&sidecar(&a.out, "stats.json"), &stats)?;
    tracing::info!(samples = samples.len(), out = %a.out.display(), "dataset written");
    run.finish(Some(&sidecar(&a.out, "manifest.json")))
}

pub fn cmd_annotate(a: &AnnotateArgs, seed: u64, jobs: usize) -> Result<()> {
    let mut run = Run::new("annotate", a, seed)?;
    if let Some(p) = a.vlm.strip_prefix("mock:") {
        run.input(Path::new(p));
    }
    let hint = match &a.vocab {
        Some(p) => {
            require_file(p, "vocabulary")?;
            run.input(p);
            Some(
                load_vocab_entries(p)?
                    .into_iter()
                    .map(|e| e.name)
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let transport = open_transport(&a.vlm)?;
    let policy = RetryPolicy {
        concurrency: jobs,
        ..RetryPolicy::default()
    };
    let records = annotate_images(&a.images, transport.as_ref(), hint.as_deref(), &policy);
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json("annotation", e))?);
        text.push('\n');
    }
    write_text(&a.out, &text)?;
    let failed = records.iter().filter(|r| r.annotation.is_none()).count();
    tracing::info!(images = records.len(), failed, "annotations written");
    run.finish(Some(&sidecar(&a.out, "manifest.json")))
}

fn read_config_file(path: &Path) -> Result<(Option<ModelConfig>, Option<Value>)> {
    let label = path.display().to_string();
    let v: Value = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::format(&label, Some(e.line()), e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::format(&label, None, "config must be a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "model" && *k != "train") {
        return Err(Error::format(
            &label,
            None,
            format!("unknown key {k:?}; expected \"model\" or \"train\""),
        ));
    }
    let model = match obj.get("model") {
        Some(m) => Some(
            serde_json::from_value(m.clone())
                .map_err(|e| Error::format(&label, None, format!("model: {e}")))?,
        ),
        None => None,
    };
    Ok((model, obj.get("train").cloned()))
}

fn apply_train_flags(cfg: &mut TrainConfig, a: &TrainArgs, seed: Option<u64>) {
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.init_lr {
        cfg.init_lr = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.caption_weight {
        cfg.caption_weight = v;
    }
    if let Some(v) = a.tag_loss {
        cfg.tag_loss = match v {
            TagLossArg::Bce => TagLossKind::Bce,
            TagLossArg::Asl => TagLossKind::Asl,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    require_file(&a.dataset, "dataset")?;
    let samples = read_dataset(&a.dataset)?;
    let (file_model, file_train) = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            read_config_file(p)?
        }
        None => (None, None),
    };
    let stage: Stage = a.stage.into();

    let (mut model, train, mut state) = if let Some(dir) = &a.resume {
        let ck = load_checkpoint(dir)?;
        let mut train = ck.train.ok_or_else(|| {
            Error::Validation(format!(
                "{} has no training config to resume",
                dir.display()
            ))
        })?;
        if train.stage != stage {
            return Err(Error::Validation(format!(
                "checkpoint stage {:?} does not match --stage",
                train.stage
            )));
        }
        if let Some(t) = &file_train {
            train = TrainConfig::from_json(stage, &merge(&train, t)?)?;
        }
        apply_train_flags(&mut train, a, seed);
        (ck.model, train, ck.state)
    } else {
        let mut train = TrainConfig::from_json(stage, file_train.as_ref().unwrap_or(&json!({})))?;
        apply_train_flags(&mut train, a, seed);
        let model = if let Some(dir) = &a.init {
            let mut model = load_checkpoint(dir)?.model;
            if let Some(p) = &a.vocab {
                require_file(p, "vocabulary")?;
                let extended = model
                    .vocab()
                    .union(&load_vocab_entries(p)?, &model.embedder)?;
                model.set_vocab(extended)?;
            }
            model
        } else {
            let p = a.vocab.as_ref().ok_or_else(|| {
                Error::Validation("--vocab is required without --init or --resume".into())
            })?;
            require_file(p, "vocabulary")?;
            let config = file_model.unwrap_or_default();
            config.validate()?;
            let vocab = TagVocabulary::from_entries(
                load_vocab_entries(p)?,
                &crate::embedding::TagEmbedder::hashed(config.dim()),
            )?;
            let tokenizer = build_tokenizer(
                samples.iter().map(|s| s.text.as_str()),
                a.tokenizer_min_freq,
                config.text.max_len,
            );
            Model::init(config, vocab, tokenizer, train.seed)?
        };
        let state = TrainingState::new(train.seed);
        (model, train, state)
    };
    train.validate()?;

    let mut run = Run::new("train", a, train.seed)?;
    run.input(&a.dataset);
    for p in [&a.vocab, &a.config].into_iter().flatten() {
        run.input(p);
    }
    for p in [&a.init, &a.resume].into_iter().flatten() {
        run.input(p);
    }
    let root = a.frames_root.clone().unwrap_or_default();
    let loader = FsLoader { root };
    let report = run_stage(&samples, &mut model, &train, &mut state, &a.out, &loader)?;
    write_json(&a.out.join("report.json"), &report)?;
    tracing::info!(
        steps = report.steps,
        epochs = report.epochs,
        "training finished"
    );
    run.finish(Some(&a.out.join("run_manifest.json")))
}

fn merge(base: &TrainConfig, overlay: &Value) -> Result<Value> {
    let mut v = serde_json::to_value(base).map_err(|e| Error::json("train config", e))?;
    let obj = overlay
        .as_object()
        .ok_or_else(|| Error::Config("train config must be a JSON object".into()))?;
    for (k, x) in obj {
        v[k] = x.clone();
    }
    Ok(v)
}

/// Label space for evaluation: the `--vocab` entries when given, reusing the
/// model's stored embedding for tags it already knows.
fn eval_vocabulary(model: &Model, entries: Option<Vec<TagEntry>>) -> Result<TagVocabulary> {
    let Some(entries) = entries else {
        return Ok(model.vocab().clone());
    };
    let known = model.vocab();
    let mut v = TagVocabulary::empty(known.dim());
    for e in entries {
        let emb = match known.index_of(&e.name) {
            Some(i) => known.embedding(i).to_vec(),
            None => model.embedder.embed(&e.name)?,
        };
        v.push(e, emb)?;
    }
    Ok(v)
}

fn sample_scores(
    frames: &[ImageRaster],
    model: &Model,
    vocab: &TagVocabulary,
    mode: Mode,
    n: usize,
) -> Result<Vec<f64>> {
    let logits = match mode {
        Mode::Image => image_logits(&frames[(frames.len() - 1) / 2], model, vocab)?,
        Mode::Video => video_logits(frames, model, vocab, n)?,
        Mode::Imagewise => {
            let mut best = vec![f64::NEG_INFINITY; vocab.len()];
            for i in select_frame_indices(frames.len(), n) {
                for (m, z) in best.iter_mut().zip(image_logits(&frames[i], model, vocab)?) {
                    *m = m.max(z);
                }
            }
            best
        }
    };
    Ok(logits.into_iter().map(sigmoid).collect())
}

pub fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let mut run = Run::new("eval", a, seed)?;
    let vocab_entries = match &a.vocab {
        Some(p) => {
            require_file(p, "vocabulary")?;
            run.input(p);
            Some(load_vocab_entries(p)?)
        }
        None => None,
    };
    let (records, vocab) = if let Some(p) = &a.records {
        require_file(p, "records")?;
        run.input(p);
        let entries =
            vocab_entries.ok_or_else(|| Error::Validation("--records needs --vocab".into()))?;
        let vocab =
            TagVocabulary::from_entries(entries, &crate::embedding::TagEmbedder::hashed(8))?;
        (read_records(p)?, vocab)
    } else {
        let (Some(ck), Some(ds)) = (&a.checkpoint, &a.dataset) else {
            return Err(Error::Validation(
                "eval needs --checkpoint and --dataset, or --records".into(),
            ));
        };
        require_file(ds, "dataset")?;
        run.input(ck);
        run.input(ds);
        let model = load_checkpoint(ck)?.model;
        let vocab = eval_vocabulary(&model, vocab_entries)?;
        let samples = read_dataset(ds)?;
        let root = a.frames_root.clone().unwrap_or_default();
        let mut records = Vec::with_capacity(samples.len());
        for s in &samples {
            let frames = s
                .frame_refs
                .iter()
                .map(|r| {
                    let p = Path::new(r);
                    ImageRaster::load(&if p.is_absolute() {
                        p.to_path_buf()
                    } else {
                        root.join(p)
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut truth = vec![0u8; vocab.len()];
            for t in &s.tags {
                if let Some(i) = vocab.index_of(t) {
                    truth[i] = 1;
                }
            }
            records.push(EvalRecord {
                sample_id: s.sample_id.clone(),
                scores: sample_scores(&frames, &model, &vocab, a.mode, a.n_frames)?,
                truth,
            });
        }
        (records, vocab)
    };
    let report = evaluate(&records, &vocab, a.beta)?;
    write_json(&a.out, &report)?;
    if let Some(p) = &a.records_out {
        write_records(p, &records)?;
    }
    if let Some(p) = &a.csv {
        let method = a
            .method
            .clone()
            .unwrap_or_else(|| format!("{:?}", a.mode).to_lowercase());
        let mut text = if p.is_file() {
            read_to_string(p)?
        } else {
            format!("{CSV_HEADER}\n")
        };
        text.push_str(&csv_row(&method, &report));
        text.push('\n');
        write_text(p, &text)?;
    }
    tracing::info!(samples = report.samples, map = ?report.map, "evaluation written");
    run.finish(Some(&sidecar(&a.out, "manifest.json")))
}

const FRAME_EXTS: [&str; 4] = ["pgm", "ppm", "pnm", "rt"];

/// Image files in `dir` sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if p.is_file()
            && p.extension()
                .is_some_and(|x| FRAME_EXTS.iter().any(|f| x == *f))
        {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("no frames in {}", dir.display())));
    }
    Ok(out)
}

fn load_frames(paths: &[PathBuf]) -> Result<Vec<ImageRaster>> {
    paths.iter().map(|p| ImageRaster::load(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagOutput {
    pub name: String,
    pub category: String,
    pub prob: f64,
}

/// Prediction JSON printed by `tag`.
pub fn tag_json(a: &TagArgs) -> Result<Value> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let vocab = match &a.add_tags {
        Some(list) => {
            let names: Vec<&str> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            model.vocab().extend(&names, &model.embedder)?
        }
        None => model.vocab().clone(),
    };
    let pred = match (&a.image, &a.frames_dir) {
        (Some(img), _) => apply_threshold(
            &image_logits(&ImageRaster::load(img)?, &model, &vocab)?,
            a.threshold,
        )?,
        (None, Some(dir)) => {
            let frames = load_frames(&list_frames(dir)?)?;
            match a.mode {
                Mode::Imagewise => {
                    let picked: Vec<ImageRaster> = select_frame_indices(frames.len(), a.n_frames)
                        .into_iter()
                        .map(|i| frames[i].clone())
                        .collect();
                    crate::inference::infer_video_imagewise(&picked, &model, &vocab, a.threshold)?
                }
                Mode::Video | Mode::Image => {
                    crate::inference::infer_video(&frames, &model, &vocab, a.threshold, a.n_frames)?
                }
            }
        }
        (None, None) => {
            return Err(Error::Validation(
                "tag needs --image or --frames-dir".into(),
            ))
        }
    };
    let mut tags: Vec<TagOutput> = pred
        .selected
        .iter()
        .map(|&i| TagOutput {
            name: vocab.entry(i).name.clone(),
            category: vocab.entry(i).category.to_string(),
            prob: pred.probabilities[i],
        })
        .collect();
    tags.sort_by(|x, y| y.prob.total_cmp(&x.prob).then_with(|| x.name.cmp(&y.name)));
    Ok(json!({ "tags": tags, "threshold": a.threshold, "vocabulary_size": vocab.len() }))
}

pub fn cmd_tag(a: &TagArgs, seed: u64) -> Result<()> {
    let mut run = Run::new("tag", a, seed)?;
    run.input(&a.checkpoint);
    for p in [&a.image, &a.frames_dir].into_iter().flatten() {
        run.input(p);
    }
    let out = tag_json(a)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| Error::json("prediction", e))?
    );
    run.finish(a.manifest_out.as_deref())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchMode {
    pub median_ms: f64,
    pub decoder_calls: u64,
    pub encoder_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub repeats: usize,
    pub tags: usize,
    pub video: BenchMode,
    pub imagewise: BenchMode,
    pub speedup: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn time_mode(repeats: usize, model: &Model, f: impl Fn() -> Result<()>) -> Result<BenchMode> {
    model.counters().reset();
    f()?;
    let counts = model.counters().snapshot();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchMode {
        median_ms: median(&mut times),
        decoder_calls: counts.decode,
        encoder_calls: counts.encode,
    })
}

/// Time fused video inference against per-frame inference over the same
/// `n` frames. Fails unless decoder calls are exactly 1 and `n`.
pub fn bench(
    model: &Model,
    frames: &[ImageRaster],
    n: usize,
    repeats: usize,
    extra_tags: usize,
) -> Result<BenchReport> {
    if n == 0 || repeats == 0 {
        return Err(Error::Validation(
            "--n and --repeats must be at least 1".into(),
        ));
    }
    if frames.len() < n {
        return Err(Error::Validation(format!(
            "need {n} frames, found {}",
            frames.len()
        )));
    }
    let picked: Vec<ImageRaster> = select_frame_indices(frames.len(), n)
        .into_iter()
        .map(|i| frames[i].clone())
        .collect();
    let extra: Vec<String> = (0..extra_tags).map(|i| format!("bench tag {i}")).collect();
    let names: Vec<&str> = extra.iter().map(String::as_str).collect();
    let vocab = model.vocab().extend(&names, &model.embedder)?;
    let video = time_mode(repeats, model, || {
        video_logits(&picked, model, &vocab, n).map(drop)
    })?;
    let imagewise = time_mode(repeats, model, || {
        for f in &picked {
            image_logits(f, model, &vocab)?;
        }
        Ok(())
    })?;
    if video.decoder_calls != 1 || imagewise.decoder_calls != n as u64 {
        return Err(Error::Validation(format!(
            "decoder calls (video, imagewise) = ({}, {}), expected (1, {n})",
            video.decoder_calls, imagewise.decoder_calls
        )));
    }
    Ok(BenchReport {
        n,
        repeats,
        tags: vocab.len(),
        speedup: imagewise.median_ms / video.median_ms,
        video,
        imagewise,
    })
}

pub fn cmd_bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let mut run = Run::new("bench", a, seed)?;
    run.input(&a.checkpoint);
    run.input(&a.frames_dir);
    let model = load_checkpoint(&a.checkpoint)?.model;
    let frames = load_frames(&list_frames(&a.frames_dir)?)?;
    let report = bench(&model, &frames, a.n, a.repeats, a.extra_tags)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::json("bench report", e))?
    );
    run.finish(a.manifest_out.as_deref())
}

pub fn cmd_mock_vlm(a: &MockVlmArgs) -> Result<()> {
    let fixture = load_vlm_fixture(&a.fixture)?;
    serve_lines(std::io::stdin().lock(), std::io::stdout().lock(), |req| {
        mock_vlm_reply(&fixture, req)
    })
}

pub fn cmd_mock_filter(a: &MockFilterArgs) -> Result<()> {
    let filter = match &a.stop_phrases {
        Some(p) => StopPhraseFilter::load(p)?,
        None => StopPhraseFilter::default(),
    };
    serve_lines(
        std::io::stdin().lock(),
        std::io::stdout().lock(),
        |req| match req.get("text").and_then(Value::as_str) {
            Some(t) => json!({ "visual": filter.is_visual(t) }),
            None => json!({ "error": "request lacks text" }),
        },
    )
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    if jobs == 0 {
        return Err(Error::Validation("--jobs must be at least 1".into()));
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
    {
        tracing::debug!(error = %e, "thread pool already configured");
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a, seed),
        Command::BuildDataset(a) => cmd_build_dataset(a, seed, jobs),
        Command::Annotate(a) => cmd_annotate(a, seed, jobs),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Tag(a) => cmd_tag(a, seed),
        Command::Bench(a) => cmd_bench(a, seed),
        Command::MockVlm(a) => cmd_mock_vlm(a),
        Command::MockFilter(a) => cmd_mock_filter(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn manifest_flag_forms() {
        assert_eq!(
            parse_manifest_flag("v1=a/b.tsv"),
            ("v1".into(), PathBuf::from("a/b.tsv"))
        );
        assert_eq!(
            parse_manifest_flag("dir/vid07.frames.tsv"),
            ("vid07".into(), PathBuf::from("dir/vid07.frames.tsv"))
        );
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(
            sidecar(Path::new("out/vocab.tsv"), "stats.json"),
            PathBuf::from("out/vocab.tsv.stats.json")
        );
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn directory_digest_ignores_listing_order() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("b"), "2").unwrap();
        std::fs::write(d.path().join("a"), "1").unwrap();
        let first = digest_path(d.path()).unwrap();
        std::fs::write(d.path().join("a"), "x").unwrap();
        assert_ne!(digest_path(d.path()).unwrap(), first);
        std::fs::write(d.path().join("a"), "1").unwrap();
        assert_eq!(digest_path(d.path()).unwrap(), first);
    }
}
