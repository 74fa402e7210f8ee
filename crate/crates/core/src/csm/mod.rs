//! Context selection model inference: pair embeddings, a permutation
//! equivariant global attention stack, and a per-context regression head.

mod embed;
mod forward;
mod weights;

pub use embed::{embed_pairs, load_query_vectors, EmbeddingProvider, EmbeddingRecord, EmbeddingStore, RemoteEmbedder};
pub use forward::{gelu, global_forward, predict, score, Matrix};
pub use weights::{
    load_weights, Block, CsmMetadata, CsmWeights, LayerNorm, Linear, ACTIVATION, FORMAT_VERSION, HEAD_COUNT,
    LAYER_COUNT, LAYER_NORM_EPS, NORM, POSITIONAL,
};

use crate::error::Result;
use crate::types::{ContextList, Query, SelectionResult, SelectionStrategy};
use crate::valuation::select_above;

/// Predicted influence for every context.
pub fn csm_scores(
    query: &Query,
    contexts: &ContextList,
    weights: &CsmWeights,
    provider: &EmbeddingProvider,
) -> Result<Vec<f64>> {
    predict(&embed_pairs(query, contexts, provider)?, weights)
}

/// Keeps contexts with a strictly positive predicted influence.
pub fn csm_select(
    query: &Query,
    contexts: &ContextList,
    weights: &CsmWeights,
    provider: &EmbeddingProvider,
) -> Result<SelectionResult> {
    let scores = csm_scores(query, contexts, weights, provider)?;
    select_above(contexts, &scores, 0.0, SelectionStrategy::PositiveCi)
}
