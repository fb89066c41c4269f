//! Exact cosine search over unit vectors, plus the binary embedding cache.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("cache file: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedItem {
    pub id: String,
    pub vector: Vec<f32>,
    pub text: String,
}

/// `uᵀv / (‖u‖‖v‖)` accumulated in `f64` and clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, IndexError> {
    if u.len() != v.len() {
        return Err(IndexError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Descending score, then ascending id.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    dim: Option<usize>,
    items: Vec<EmbeddedItem>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: Vec<EmbeddedItem>) -> Result<Self, IndexError> {
        let mut idx = Self::new();
        let mut seen = BTreeSet::new();
        for it in items {
            if !seen.insert(it.id.clone()) {
                return Err(IndexError::DuplicateId(it.id));
            }
            idx.push_unchecked(it)?;
        }
        Ok(idx)
    }

    fn push_unchecked(&mut self, item: EmbeddedItem) -> Result<(), IndexError> {
        match self.dim {
            Some(d) if d != item.vector.len() => return Err(IndexError::DimensionMismatch(d, item.vector.len())),
            None => self.dim = Some(item.vector.len()),
            _ => {}
        }
        self.items.push(item);
        Ok(())
    }

    pub fn push(&mut self, item: EmbeddedItem) -> Result<(), IndexError> {
        if self.items.iter().any(|i| i.id == item.id) {
            return Err(IndexError::DuplicateId(item.id));
        }
        self.push_unchecked(item)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn items(&self) -> &[EmbeddedItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddedItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Sub-index holding only items whose id passes `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> VectorIndex {
        VectorIndex {
            dim: self.dim,
            items: self.items.iter().filter(|i| keep(&i.id)).cloned().collect(),
        }
    }

    /// Exhaustive top-k by cosine; ties go to the smaller id.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<(String, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.items.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let mut scored = self
            .items
            .iter()
            .map(|it| Ok((it.id.clone(), cosine(query, &it.vector)?)))
            .collect::<Result<Vec<_>, IndexError>>()?;
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    pub fn to_cache(&self) -> EmbeddingCache {
        EmbeddingCache {
            dim: self.dim.unwrap_or(0),
            entries: self.items.iter().map(|i| (i.id.clone(), i.vector.clone())).collect(),
        }
    }
}

const CACHE_MAGIC: &[u8; 4] = b"KGEC";
const CACHE_VERSION: u32 = 1;

/// On-disk vectors: a 16-byte header (magic, version, dimension, count as
/// little-endian `u32`) followed by `(id length, id bytes, dim × f32 LE)` records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, v)| v.as_slice())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        let count = u32::try_from(self.entries.len()).map_err(|_| IndexError::Cache("too many entries".into()))?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for (id, v) in &self.entries {
            if v.len() != self.dim {
                return Err(IndexError::DimensionMismatch(self.dim, v.len()));
            }
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != CACHE_MAGIC {
            return Err(IndexError::Cache("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != CACHE_VERSION {
            return Err(IndexError::Cache(format!("unsupported version {}", word(4))));
        }
        let dim = word(8) as usize;
        let count = word(12) as usize;
        let mut entries = Vec::with_capacity(count);
        let mut b4 = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| IndexError::Cache("id is not UTF-8".into()))?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4)?;
                v.push(f32::from_le_bytes(b4));
            }
            entries.push((id, v));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(IndexError::Cache("trailing bytes after last record".into()));
        }
        Ok(Self { dim, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::read_from(fs::File::open(path)?)
    }
}
