use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forward::Matrix;
use crate::error::{Error, Result};
use crate::gateway::{GeneratorConfig, RemoteClient};
use crate::jsonl;
use crate::types::{ContextList, Query};

/// One line of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub query_id: String,
    pub context_id: String,
    pub vector: Vec<f64>,
}

/// Precomputed pair vectors keyed by (query id, context id).
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<(String, String), Vec<f64>>,
}

impl EmbeddingStore {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut store = Self::default();
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(jsonl::read(path)?)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<()> {
        if self.vectors.is_empty() {
            self.dim = record.vector.len();
        } else if record.vector.len() != self.dim {
            return Err(Error::LengthMismatch {
                what: "embedding dimension",
                left: record.vector.len(),
                right: self.dim,
            });
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant(
                "embedding",
                format!("non-finite value for ({}, {})", record.query_id, record.context_id),
            ));
        }
        self.vectors.insert((record.query_id, record.context_id), record.vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, query_id: &str, context_id: &str) -> Option<&[f64]> {
        self.vectors
            .get(&(query_id.to_string(), context_id.to_string()))
            .map(Vec::as_slice)
    }
}

/// Remote `/embeddings` endpoint fed with the concatenated pair text.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: RemoteClient,
    model: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(config: &GeneratorConfig, model: impl Into<String>, dim: usize) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::new(config)?,
            model: model.into(),
            dim,
        })
    }
}

#[derive(Debug)]
pub enum EmbeddingProvider {
    File(EmbeddingStore),
    Remote(RemoteEmbedder),
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::File(s) => s.dim(),
            EmbeddingProvider::Remote(r) => r.dim,
        }
    }
}

/// One row per context, in list order.
pub fn embed_pairs(query: &Query, contexts: &ContextList, provider: &EmbeddingProvider) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = match provider {
        EmbeddingProvider::File(store) => contexts
            .iter()
            .map(|c| {
                store
                    .get(&query.id, &c.id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::MissingEmbedding(format!("pair (query {:?}, context {:?})", query.id, c.id)))
            })
            .collect::<Result<_>>()?,
        EmbeddingProvider::Remote(r) => {
            let inputs: Vec<String> = contexts
                .iter()
                .map(|c| format!("{} [SEP] {}", query.text, c.text))
                .collect();
            let rows = if inputs.is_empty() {
                Vec::new()
            } else {
                r.client.embeddings(&r.model, &inputs)?
            };
            if let Some(bad) = rows.iter().find(|v| v.len() != r.dim) {
                return Err(Error::LengthMismatch {
                    what: "remote embedding dimension",
                    left: bad.len(),
                    right: r.dim,
                });
            }
            rows
        }
    };
    let mut m = Matrix::from_rows(&rows)?;
    if rows.is_empty() {
        m.cols = provider.dim();
    }
    Ok(m)
}

/// Query-only vectors (`{"query_id","vector"}` per line), used to judge query distinctness.
pub fn load_query_vectors(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    #[derive(Deserialize)]
    struct Line {
        query_id: String,
        vector: Vec<f64>,
    }
    Ok(jsonl::read::<Line>(path)?
        .into_iter()
        .map(|l| (l.query_id, l.vector))
        .collect())
}
