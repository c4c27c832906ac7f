//! The full recognizer: encoder, fusion, tag decoder, the training-only
//! caption head, and the frozen tag embedding table.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TagEmbedder;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::numerics::{Bindings, Element, Graph, ParamSet, ParamSpec, Parameter};
use crate::tag_decoder::DecoderConfig;
use crate::text_decoder::{CaptionTokenizer, TextDecoderConfig};
use crate::vocab::TagVocabulary;

pub const TAG_TABLE: &str = "tag_embed.table";
pub const TEXT_PREFIX: &str = "text_decoder.";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub text: TextDecoderConfig,
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let dim = self.dim();
        self.fusion.validate(dim)?;
        for (what, heads) in [
            ("decoder", self.decoder.heads),
            ("text decoder", self.text.heads),
        ] {
            if heads == 0 || !dim.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{what} dim {dim} not divisible by {heads} heads"
                )));
            }
        }
        if self.text.max_len == 0 {
            return Err(Error::Config(
                "text decoder max_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Trainable parameters, in checkpoint order. The tag table is separate.
    pub fn param_specs(&self, text_vocab: usize) -> Vec<ParamSpec> {
        let dim = self.dim();
        let mut specs = self.encoder.param_specs();
        specs.extend(fusion::describe_params(&self.fusion, dim));
        specs.extend(self.decoder.param_specs(dim));
        specs.extend(self.text.param_specs(dim, text_vocab));
        specs
    }
}

/// True for every parameter an inference path may read.
pub fn is_inference_param(name: &str) -> bool {
    !name.starts_with(TEXT_PREFIX)
}

#[derive(Debug, Default)]
pub struct InferenceCounters {
    encode: AtomicU64,
    fuse: AtomicU64,
    decode: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub encode: u64,
    pub fuse: u64,
    pub decode: u64,
}

impl InferenceCounters {
    pub(crate) fn bump_encode(&self, n: u64) {
        self.encode.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn bump_fuse(&self) {
        self.fuse.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn bump_decode(&self) {
        self.decode.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            encode: self.encode.load(Ordering::Relaxed),
            fuse: self.fuse.load(Ordering::Relaxed),
            decode: self.decode.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.encode.store(0, Ordering::Relaxed);
        self.fuse.store(0, Ordering::Relaxed);
        self.decode.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub tokenizer: CaptionTokenizer,
    pub embedder: TagEmbedder,
    vocab: TagVocabulary,
    counters: InferenceCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            tokenizer: self.tokenizer.clone(),
            embedder: self.embedder.clone(),
            vocab: self.vocab.clone(),
            counters: InferenceCounters::default(),
        }
    }
}

fn table_param(vocab: &TagVocabulary) -> Result<Parameter> {
    Parameter::new(
        TAG_TABLE,
        vec![vocab.len(), vocab.dim()],
        vocab.embeddings().iter().map(|&x| x as f64).collect(),
        true,
    )
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(
        config: ModelConfig,
        vocab: TagVocabulary,
        tokenizer: CaptionTokenizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init(&config.param_specs(tokenizer.vocab_size()), &mut rng)?;
        Self::from_parts(config, params, vocab, tokenizer)
    }

    /// Assemble from loaded parts; the tag table parameter is derived from
    /// `vocab` and any stored copy in `params` is replaced.
    pub fn from_parts(
        config: ModelConfig,
        mut params: ParamSet,
        vocab: TagVocabulary,
        tokenizer: CaptionTokenizer,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.max_len > config.text.max_len {
            return Err(Error::Config(format!(
                "tokenizer max_len {} exceeds text decoder max_len {}",
                tokenizer.max_len, config.text.max_len
            )));
        }
        params.check_specs(&config.param_specs(tokenizer.vocab_size()))?;
        if vocab.dim() != config.dim() {
            return Err(Error::Config(format!(
                "tag embedding dim {} does not match model dim {}",
                vocab.dim(),
                config.dim()
            )));
        }
        params.upsert(table_param(&vocab)?);
        let embedder = TagEmbedder::hashed(config.dim());
        Ok(Self {
            config,
            params,
            tokenizer,
            embedder,
            vocab,
            counters: InferenceCounters::default(),
        })
    }

    pub fn vocab(&self) -> &TagVocabulary {
        &self.vocab
    }

    /// Swap the label space, keeping every learned weight.
    pub fn set_vocab(&mut self, vocab: TagVocabulary) -> Result<()> {
        if vocab.dim() != self.config.dim() {
            return Err(Error::Config(format!(
                "tag embedding dim {} does not match model dim {}",
                vocab.dim(),
                self.config.dim()
            )));
        }
        self.params.upsert(table_param(&vocab)?);
        self.vocab = vocab;
        Ok(())
    }

    pub fn counters(&self) -> &InferenceCounters {
        &self.counters
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        self.params.bind(g, trainable)
    }

    /// Binds only what inference reads; the caption head is left out.
    pub fn bind_inference<T: Element>(&self, g: &mut Graph<T>) -> Bindings {
        self.params
            .bind_where(g, false, |n| is_inference_param(n) && n != TAG_TABLE)
    }
}
