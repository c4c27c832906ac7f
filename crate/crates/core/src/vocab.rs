//! Tag vocabulary: ordered tag entries with their frozen text embeddings.
//! Entry order defines the logit index.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::TagEmbedder;
use crate::error::{read_to_string, Error, Result};
use crate::numerics::{Element, Tensor};

/// Lowercase, trim, and collapse internal whitespace to single spaces.
pub fn normalize_tag(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Instrument,
    Verb,
    Target,
    Organ,
    Phase,
    Procedure,
    /// Composed `instrument,verb,target` action tags.
    Triplet,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Instrument,
        Category::Verb,
        Category::Target,
        Category::Organ,
        Category::Phase,
        Category::Procedure,
        Category::Triplet,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Instrument => "instrument",
            Category::Verb => "verb",
            Category::Target => "target",
            Category::Organ => "organ",
            Category::Phase => "phase",
            Category::Procedure => "procedure",
            Category::Triplet => "triplet",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Finetune,
    Both,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Both => "both",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "finetune" => Ok(Split::Finetune),
            "both" => Ok(Split::Both),
            _ => Err(Error::Validation(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEntry {
    pub name: String,
    pub category: Category,
    pub split: Split,
}

impl TagEntry {
    pub fn new(name: &str, category: Category, split: Split) -> Self {
        Self {
            name: normalize_tag(name),
            category,
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagVocabulary {
    entries: Vec<TagEntry>,
    dim: usize,
    /// `K x dim`, row-major, each row unit norm.
    embeddings: Vec<f32>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn empty(dim: usize) -> Self {
        Self {
            entries: Vec::new(),
            dim,
            embeddings: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_entries(entries: Vec<TagEntry>, embedder: &TagEmbedder) -> Result<Self> {
        let mut vocab = Self::empty(embedder.dim());
        for e in entries {
            let emb = embedder.embed(&e.name)?;
            vocab.push(e, emb)?;
        }
        Ok(vocab)
    }

    /// Rebuild from entries plus a stored `K x dim` table.
    pub fn with_embeddings(
        entries: Vec<TagEntry>,
        dim: usize,
        embeddings: Vec<f32>,
    ) -> Result<Self> {
        if embeddings.len() != entries.len() * dim {
            return Err(Error::Shape {
                op: "vocabulary embeddings",
                lhs: vec![entries.len(), dim],
                rhs: vec![embeddings.len()],
            });
        }
        let mut vocab = Self::empty(dim);
        for (i, e) in entries.into_iter().enumerate() {
            let row = embeddings[i * dim..(i + 1) * dim].to_vec();
            vocab.push(e, row)?;
        }
        Ok(vocab)
    }

    pub fn push(&mut self, entry: TagEntry, embedding: Vec<f32>) -> Result<()> {
        if entry.name.is_empty() {
            return Err(Error::Validation("empty tag name".into()));
        }
        if self.index.contains_key(&entry.name) {
            return Err(Error::Validation(format!("duplicate tag {:?}", entry.name)));
        }
        if embedding.len() != self.dim {
            return Err(Error::Shape {
                op: "tag embedding",
                lhs: vec![self.dim],
                rhs: vec![embedding.len()],
            });
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        self.embeddings.extend(embedding);
        Ok(())
    }

    /// Append new tags (category `other`, split `both`), embedding them with
    /// `embedder`. Existing entries keep their order and index.
    pub fn extend(&self, names: &[&str], embedder: &TagEmbedder) -> Result<Self> {
        let mut out = self.clone();
        for raw in names {
            let name = normalize_tag(raw);
            if name.is_empty() {
                return Err(Error::Validation(format!(
                    "tag {raw:?} is empty after normalization"
                )));
            }
            if out.index.contains_key(&name) {
                return Err(Error::Validation(format!(
                    "tag {name:?} already in vocabulary"
                )));
            }
            let emb = embedder.embed(&name)?;
            out.push(TagEntry::new(&name, Category::Other, Split::Both), emb)?;
        }
        Ok(out)
    }

    /// Append the entries not already present, keeping their metadata.
    pub fn union(&self, entries: &[TagEntry], embedder: &TagEmbedder) -> Result<Self> {
        let mut out = self.clone();
        for e in entries {
            if !out.contains(&e.name) {
                let emb = embedder.embed(&e.name)?;
                out.push(e.clone(), emb)?;
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[TagEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &TagEntry {
        &self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_tag(name)).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// `[K, dim]` table on the requested element type.
    pub fn embedding_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            vec![self.len(), self.dim],
            self.embeddings.iter().map(|&x| T::of(x as f64)).collect(),
        )
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn to_tsv(&self) -> String {
        entries_to_tsv(&self.entries)
    }
}

const TSV_HEADER: &str = "#name\tcategory\tsplit";

pub fn entries_to_tsv(entries: &[TagEntry]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.name,
            e.category,
            e.split.as_str()
        ));
    }
    out
}

/// Parse a vocabulary TSV (`name<TAB>category<TAB>split`, `#` comments).
pub fn parse_vocab_tsv(text: &str, label: &str) -> Result<Vec<TagEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                label,
                Some(lineno),
                format!("expected 3 columns, found {}", cols.len()),
            ));
        }
        let name = normalize_tag(cols[0]);
        if name.is_empty() {
            return Err(Error::format(label, Some(lineno), "empty tag name"));
        }
        let category = cols[1]
            .parse()
            .map_err(|e: Error| Error::format(label, Some(lineno), e.to_string()))?;
        let split = cols[2]
            .parse()
            .map_err(|e: Error| Error::format(label, Some(lineno), e.to_string()))?;
        if let Some(prev) = seen.insert(name.clone(), lineno) {
            return Err(Error::format(
                label,
                Some(lineno),
                format!("duplicate tag {name:?} (first on line {prev})"),
            ));
        }
        entries.push(TagEntry {
            name,
            category,
            split,
        });
    }
    Ok(entries)
}

pub fn load_vocab_entries(path: &Path) -> Result<Vec<TagEntry>> {
    parse_vocab_tsv(&read_to_string(path)?, &path.display().to_string())
}
