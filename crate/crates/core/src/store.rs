//! Case store: accepted cases indexed by the embedding of their task description.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::case::{self, Case, CaseFileError};
use crate::embed::{self, EmbedError, EmbeddingProvider};
use crate::index::{EmbeddedItem, EmbeddingCache, IndexError, VectorIndex};

pub const CASES_FILE: &str = "cases.jsonl";
pub const EMBEDDINGS_FILE: &str = "case-embeddings.bin";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    CaseFile(#[from] CaseFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("embedding cache does not match cases file: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Default)]
pub struct CaseStore {
    cases: Vec<Case>,
    index: VectorIndex,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// Drop cases whose `validated` flag is false.
    pub require_validated: bool,
    pub batch: usize,
    pub fanout: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            require_validated: true,
            batch: 32,
            fanout: 4,
        }
    }
}

/// Embeds each task description and indexes it under the case id.
pub fn store_cases(
    base: Vec<Case>,
    provider: &dyn EmbeddingProvider,
    opts: &StoreOptions,
) -> Result<CaseStore, StoreError> {
    let cases: Vec<Case> = base
        .into_iter()
        .filter(|c| {
            let keep = c.validated || !opts.require_validated;
            if !keep {
                tracing::warn!(case = %c.id, "dropping unvalidated case");
            }
            keep
        })
        .collect();
    let texts: Vec<String> = cases.iter().map(|c| c.task.clone()).collect();
    let vectors = embed::embed_many(provider, &texts, opts.batch, opts.fanout)?;
    let index = VectorIndex::from_items(
        cases
            .iter()
            .zip(vectors)
            .map(|(c, v)| EmbeddedItem {
                id: c.id.clone(),
                vector: v,
                text: c.task.clone(),
            })
            .collect(),
    )?;
    Ok(CaseStore { cases, index })
}

impl CaseStore {
    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        case::save_cases(dir.join(CASES_FILE), &self.cases)?;
        self.index.to_cache().save(dir.join(EMBEDDINGS_FILE))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let cases = case::load_cases(dir.join(CASES_FILE))?;
        let cache = EmbeddingCache::load(dir.join(EMBEDDINGS_FILE))?;
        if cache.entries.len() != cases.len() {
            return Err(StoreError::Mismatch(format!(
                "{} cases but {} vectors",
                cases.len(),
                cache.entries.len()
            )));
        }
        let items = cases
            .iter()
            .zip(cache.entries)
            .map(|(c, (id, v))| {
                if c.id != id {
                    return Err(StoreError::Mismatch(format!("expected `{}`, found `{id}`", c.id)));
                }
                Ok(EmbeddedItem {
                    id,
                    vector: v,
                    text: c.task.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cases,
            index: VectorIndex::from_items(items)?,
        })
    }
}
