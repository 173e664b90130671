//! Retriever: broad lexical candidates (optionally fused with a dense leg by
//! reciprocal rank) reranked down to a compact evidence set. Results merge
//! without duplicates into an [`EvidenceContext`].

mod context;
mod fusion;
mod lexical;
mod rerank;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, CorpusStore};

pub use context::{EvidenceContext, Provenance, Stage};
pub use fusion::fuse_rrf;
pub use lexical::{tokenize, LexicalIndex, BM25_B, BM25_K1};
pub use rerank::{rerank, CompletionReranker, DenseScorer, IdfCoverageReranker, Reranker};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("reranker failed: {message}")]
    Rerank {
        message: String,
        /// Candidates in their pre-rerank order, usable as a fallback.
        candidates: RankedList,
    },
    #[error("reranker returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("rerank requires at least one candidate")]
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub chunk_id: String,
    pub score: f64,
}

/// Ranked retrieval output, ordered by `(score desc, chunk_id asc)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn empty(query: &str) -> Self {
        Self {
            query: query.to_string(),
            entries: Vec::new(),
        }
    }

    /// Builds a list from unordered scores, applying the global tie-break and
    /// keeping the top `k`.
    pub fn from_scores(query: &str, mut scored: Vec<(String, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Self {
            query: query.to_string(),
            entries: scored
                .into_iter()
                .map(|(chunk_id, score)| RankedEntry { chunk_id, score })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.chunk_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    LexicalOnly,
    RrfFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub candidate_k: usize,
    pub final_k: usize,
    pub fusion: FusionMode,
    pub rrf_constant: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            candidate_k: 100,
            final_k: 5,
            fusion: FusionMode::LexicalOnly,
            rrf_constant: 60.0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.candidate_k == 0 || self.final_k == 0 {
            return Err(RetrievalError::InvalidConfig("k values must be positive".into()));
        }
        if self.final_k > self.candidate_k {
            return Err(RetrievalError::InvalidConfig(format!(
                "final_k ({}) exceeds candidate_k ({})",
                self.final_k, self.candidate_k
            )));
        }
        if self.rrf_constant.is_nan() || self.rrf_constant <= 0.0 {
            return Err(RetrievalError::InvalidConfig("rrf_constant must be positive".into()));
        }
        Ok(())
    }
}

/// Text handed to rerankers and dense scorers for a chunk.
pub fn chunk_passage(chunk: &Chunk) -> String {
    format!("{}\n{}", chunk.title, chunk.text)
}

/// The retriever agent. Immutable once built; `retrieve` is a pure function of
/// the index, the query and the config.
#[derive(Clone)]
pub struct Retriever {
    store: Arc<CorpusStore>,
    index: Arc<LexicalIndex>,
    reranker: Arc<dyn Reranker>,
    dense: Option<Arc<dyn DenseScorer>>,
}

impl std::fmt::Debug for Retriever {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Retriever")
            .field("chunks", &self.store.chunks().len())
            .field("dense", &self.dense.is_some())
            .finish()
    }
}

impl Retriever {
    /// Builds the lexical index and uses the IDF-coverage reranker.
    pub fn new(store: Arc<CorpusStore>) -> Result<Self, RetrievalError> {
        let index = Arc::new(LexicalIndex::build(store.chunks())?);
        let reranker = Arc::new(IdfCoverageReranker::new(index.clone()));
        Ok(Self {
            store,
            index,
            reranker,
            dense: None,
        })
    }

    pub fn with_reranker(mut self, reranker: Arc<dyn Reranker>) -> Self {
        self.reranker = reranker;
        self
    }

    pub fn with_dense(mut self, dense: Arc<dyn DenseScorer>) -> Self {
        self.dense = Some(dense);
        self
    }

    pub fn store(&self) -> &Arc<CorpusStore> {
        &self.store
    }

    pub fn index(&self) -> &Arc<LexicalIndex> {
        &self.index
    }

    pub fn search_lexical(&self, query: &str, k: usize) -> RankedList {
        self.index.search(query, k)
    }

    fn search_dense(&self, dense: &dyn DenseScorer, query: &str, k: usize) -> RankedList {
        let scored = self
            .store
            .chunks()
            .iter()
            .map(|c| (c.chunk_id.clone(), dense.score(query, &chunk_passage(c))))
            .collect();
        RankedList::from_scores(query, scored, k)
    }

    /// Candidate stage followed by reranking.
    pub fn retrieve(&self, query: &str, cfg: &RetrievalConfig) -> Result<RankedList, RetrievalError> {
        cfg.validate()?;
        let lexical = self.search_lexical(query, cfg.candidate_k);
        let candidates = match (&self.dense, cfg.fusion) {
            (Some(dense), FusionMode::RrfFusion) => {
                let dense_list = self.search_dense(dense.as_ref(), query, cfg.candidate_k);
                fuse_rrf(&[lexical, dense_list], cfg.candidate_k, cfg.rrf_constant)
            }
            _ => lexical,
        };
        if candidates.is_empty() {
            return Ok(candidates);
        }
        rerank(&self.store, self.reranker.as_ref(), query, &candidates, cfg.final_k)
    }
}
