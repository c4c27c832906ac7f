//! Frozen text embeddings for tag names.
//!
//! The default provider feature-hashes character trigrams of `<name>` into
//! `dim` signed buckets and L2-normalises, so any string embeds. A table
//! loaded from disk can replace it; unknown tags then fall back to hashing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::vocab::normalize_tag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderId {
    Hashed,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagEmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f32>>,
    pub provider_id: ProviderId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TagEmbedder {
    Hashed { dim: usize },
    File(TagEmbeddingTable),
}

impl TagEmbedder {
    pub fn hashed(dim: usize) -> Self {
        TagEmbedder::Hashed { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            TagEmbedder::Hashed { dim } => *dim,
            TagEmbedder::File(t) => t.dim,
        }
    }

    pub fn provider_id(&self) -> ProviderId {
        match self {
            TagEmbedder::Hashed { .. } => ProviderId::Hashed,
            TagEmbedder::File(_) => ProviderId::File,
        }
    }

    /// Unit-norm embedding of the normalised `name`.
    pub fn embed(&self, name: &str) -> Result<Vec<f32>> {
        let name = normalize_tag(name);
        if name.is_empty() {
            return Err(Error::Validation("cannot embed an empty tag name".into()));
        }
        match self {
            TagEmbedder::Hashed { dim } => Ok(hashed_embedding(&name, *dim)),
            TagEmbedder::File(t) => Ok(t
                .entries
                .get(&name)
                .cloned()
                .unwrap_or_else(|| hashed_embedding(&name, t.dim))),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h = FNV_OFFSET ^ salt;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    // final avalanche so nearby trigrams spread across buckets
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

fn hashed_embedding(name: &str, dim: usize) -> Vec<f32> {
    let chars: Vec<char> = std::iter::once('<')
        .chain(name.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut acc = vec![0.0f64; dim];
    let mut buf = String::new();
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        let bucket = (fnv1a(buf.as_bytes(), 0) % dim as u64) as usize;
        let sign = if fnv1a(buf.as_bytes(), SIGN_SALT) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        acc[bucket] += sign;
    }
    let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // all trigram contributions cancelled
        acc[(fnv1a(name.as_bytes(), 1) % dim as u64) as usize] = 1.0;
        norm = 1.0;
    }
    acc.iter().map(|x| (x / norm) as f32).collect()
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| (x as f64 / norm) as f32).collect()
}

/// Parse `#dim=<D>` then `tag<TAB>v1,...,vD` rows. Vectors are re-normalised.
pub fn parse_table(text: &str, label: &str) -> Result<TagEmbeddingTable> {
    let mut lines = text.lines().enumerate();
    let dim = loop {
        match lines.next() {
            None => return Err(Error::format(label, None, "missing #dim=<D> header")),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                let d = l
                    .trim()
                    .strip_prefix("#dim=")
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::format(label, Some(i + 1), "expected #dim=<D> header"))?;
                break d;
            }
        }
    };
    let mut entries = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, vals) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(label, Some(i + 1), "expected tag<TAB>values"))?;
        let v = vals
            .split(',')
            .map(|x| x.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(label, Some(i + 1), e.to_string()))?;
        if v.len() != dim {
            return Err(Error::format(
                label,
                Some(i + 1),
                format!("row has {} values, header says {dim}", v.len()),
            ));
        }
        let name = normalize_tag(tag);
        if name.is_empty() {
            return Err(Error::format(label, Some(i + 1), "empty tag"));
        }
        entries.insert(name, unit(v));
    }
    Ok(TagEmbeddingTable {
        dim,
        entries,
        provider_id: ProviderId::File,
    })
}

pub fn load_table(path: &Path) -> Result<TagEmbeddingTable> {
    parse_table(&read_to_string(path)?, &path.display().to_string())
}

pub fn table_to_tsv(table: &TagEmbeddingTable) -> String {
    let mut out = format!("#dim={}\n", table.dim);
    for (tag, v) in &table.entries {
        out.push_str(tag);
        out.push('\t');
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
