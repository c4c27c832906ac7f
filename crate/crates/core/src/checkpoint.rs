//! Checkpoint directory: config.json, manifest.json, weights.bin (f32 LE),
//! optimizer.bin, rng.json, vocab.tsv, tokenizer.tsv.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TAG_TABLE};
use crate::numerics::{ParamSet, Parameter};
use crate::text_decoder::CaptionTokenizer;
use crate::training::{AdamState, Moments, TrainConfig, TrainingState};
use crate::vocab::{parse_vocab_tsv, TagVocabulary};

pub const FORMAT_VERSION: u32 = 1;
const OPT_MAGIC: &[u8; 4] = b"ADAM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into weights.bin.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
    epoch: usize,
    step: u64,
}

pub fn manifest_of(params: &ParamSet) -> Manifest {
    let mut offset = 0;
    let params = params
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                frozen: p.frozen,
            };
            offset += p.numel() * 4;
            e
        })
        .collect();
    Manifest {
        dtype: "f32-le".into(),
        params,
    }
}

pub fn weights_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.numel() * 4);
    for p in params.iter() {
        for &x in &p.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

fn optimizer_bytes(state: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.t.to_le_bytes());
    out.extend_from_slice(&(state.moments.len() as u32).to_le_bytes());
    for (name, mo) in &state.moments {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(mo.m.len() as u64).to_le_bytes());
        for x in mo.m.iter().chain(&mo.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(&self.label, None, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn parse_optimizer(bytes: &[u8], label: &str) -> Result<AdamState> {
    let mut r = Reader {
        bytes,
        pos: 0,
        label: label.to_string(),
    };
    if r.take(4)? != OPT_MAGIC {
        return Err(Error::format(label, None, "bad optimizer magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            label,
            None,
            format!("unsupported optimizer format {version}"),
        ));
    }
    let t = r.u64()?;
    let count = r.u32()?;
    let mut moments = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(label, None, "name is not UTF-8"))?;
        let n = r.u64()? as usize;
        let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        moments.insert(name, Moments { m, v });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(label, None, "trailing bytes"));
    }
    Ok(AdamState { t, moments })
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(what, e))?;
    s.push('\n');
    Ok(s)
}

/// Writes every checkpoint file into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    train: Option<&TrainConfig>,
    state: &TrainingState,
) -> Result<()> {
    let fail = |m: String| Error::CheckpointWrite {
        partial: dir.to_path_buf(),
        message: m,
    };
    std::fs::create_dir_all(dir).map_err(|e| fail(format!("creating directory: {e}")))?;
    let config = CheckpointConfig {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        train: train.cloned(),
    };
    let rng = RngRecord {
        seed: hex::encode(state.rng.get_seed()),
        stream: state.rng.get_stream(),
        word_pos: state.rng.get_word_pos().to_string(),
        epoch: state.epoch,
        step: state.step,
    };
    let files: [(&str, Vec<u8>); 7] = [
        ("config.json", to_json(&config, "config")?.into_bytes()),
        (
            "manifest.json",
            to_json(&manifest_of(&model.params), "manifest")?.into_bytes(),
        ),
        ("weights.bin", weights_bytes(&model.params)),
        ("optimizer.bin", optimizer_bytes(&state.optimizer)),
        ("rng.json", to_json(&rng, "rng")?.into_bytes()),
        ("vocab.tsv", model.vocab().to_tsv().into_bytes()),
        ("tokenizer.tsv", model.tokenizer.to_tsv().into_bytes()),
    ];
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes).map_err(|e| fail(format!("writing {name}: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub state: TrainingState,
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let p = dir.join(name);
    serde_json::from_slice(&read(dir, name)?).map_err(|e| Error::json(p.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let label = |n: &str| dir.join(n).display().to_string();
    let config: CheckpointConfig = read_json(dir, "config.json")?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::format(
            label("config.json"),
            None,
            format!("unsupported format {}", config.format_version),
        ));
    }
    let manifest: Manifest = read_json(dir, "manifest.json")?;
    if manifest.dtype != "f32-le" {
        return Err(Error::format(
            label("manifest.json"),
            None,
            format!("unsupported dtype {}", manifest.dtype),
        ));
    }
    let weights = read(dir, "weights.bin")?;
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + 4 * n > weights.len() {
            return Err(Error::format(
                label("manifest.json"),
                None,
                format!("bad offset for {}", e.name),
            ));
        }
        let data = weights[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(Parameter::new(
            e.name.clone(),
            e.shape.clone(),
            data,
            e.frozen,
        )?)?;
        expected_offset += 4 * n;
    }
    if expected_offset != weights.len() {
        return Err(Error::format(
            label("weights.bin"),
            None,
            "size does not match manifest",
        ));
    }
    let vocab_text = String::from_utf8(read(dir, "vocab.tsv")?)
        .map_err(|_| Error::format(label("vocab.tsv"), None, "not UTF-8"))?;
    let entries = parse_vocab_tsv(&vocab_text, &label("vocab.tsv"))?;
    let table = params.get(TAG_TABLE).ok_or_else(|| {
        Error::format(label("manifest.json"), None, format!("missing {TAG_TABLE}"))
    })?;
    let dim = config.model.dim();
    if table.shape != [entries.len(), dim] {
        return Err(Error::format(
            label("manifest.json"),
            None,
            format!(
                "{TAG_TABLE} shape {:?} does not match {} tags of dim {dim}",
                table.shape,
                entries.len()
            ),
        ));
    }
    let vocab = TagVocabulary::with_embeddings(
        entries,
        dim,
        table.data.iter().map(|&x| x as f32).collect(),
    )?;
    let tok_text = String::from_utf8(read(dir, "tokenizer.tsv")?)
        .map_err(|_| Error::format(label("tokenizer.tsv"), None, "not UTF-8"))?;
    let tokenizer = CaptionTokenizer::parse_tsv(&tok_text, &label("tokenizer.tsv"))?;

    let optimizer = parse_optimizer(&read(dir, "optimizer.bin")?, &label("optimizer.bin"))?;
    let rng: RngRecord = read_json(dir, "rng.json")?;
    let seed_bytes = hex::decode(&rng.seed)
        .map_err(|e| Error::format(label("rng.json"), None, e.to_string()))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::format(label("rng.json"), None, "seed must be 32 bytes"))?;
    let word_pos: u128 = rng
        .word_pos
        .parse()
        .map_err(|_| Error::format(label("rng.json"), None, "bad word_pos"))?;
    let mut chacha = ChaCha8Rng::from_seed(seed);
    chacha.set_stream(rng.stream);
    chacha.set_word_pos(word_pos);

    let model = Model::from_parts(config.model, params, vocab, tokenizer)?;
    Ok(LoadedCheckpoint {
        model,
        train: config.train,
        state: TrainingState {
            optimizer,
            rng: chacha,
            epoch: rng.epoch,
            step: rng.step,
        },
    })
}
