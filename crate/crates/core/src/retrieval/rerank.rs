use std::collections::BTreeSet;
use std::sync::Arc;

use super::{chunk_passage, tokenize, LexicalIndex, RankedList, RetrievalError};
use crate::agent::{Backend, CompletionRequest, Decoding, PromptTemplates, RoleTag};
use crate::corpus::CorpusStore;

/// Reranker plug-in: one score per candidate text, same order as the input.
pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, String>;
}

/// Dense-scorer plug-in: relevance of one chunk text to a query.
pub trait DenseScorer: Send + Sync {
    fn score(&self, query: &str, chunk_text: &str) -> f64;
}

/// Fraction of the query's IDF mass whose tokens appear in the candidate.
///
/// `score(c) = Σ_{t ∈ Q ∩ c} idf(t) / Σ_{t ∈ Q} idf(t)` over the set `Q` of
/// distinct query tokens, with IDF taken from the lexical index.
#[derive(Debug, Clone)]
pub struct IdfCoverageReranker {
    index: Arc<LexicalIndex>,
}

impl IdfCoverageReranker {
    pub fn new(index: Arc<LexicalIndex>) -> Self {
        Self { index }
    }

    pub fn coverage(&self, query: &str, text: &str) -> f64 {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        let total: f64 = q.iter().map(|t| self.index.idf(t)).sum();
        if total == 0.0 {
            return 0.0;
        }
        let doc: BTreeSet<String> = tokenize(text).into_iter().collect();
        let hit: f64 = q.intersection(&doc).map(|t| self.index.idf(t)).sum();
        hit / total
    }
}

impl Reranker for IdfCoverageReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, String> {
        Ok(candidates.iter().map(|c| self.coverage(query, c)).collect())
    }
}

/// Pointwise relevance scoring through a completion backend. Each candidate
/// gets one `reranker` call; the reply is parsed as a number.
pub struct CompletionReranker {
    backend: Arc<dyn Backend>,
    prompts: PromptTemplates,
    model_id: String,
}

impl CompletionReranker {
    pub fn new(backend: Arc<dyn Backend>, prompts: PromptTemplates, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            prompts,
            model_id: model_id.into(),
        }
    }
}

impl Reranker for CompletionReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, String> {
        candidates
            .iter()
            .map(|passage| {
                let (system, user) = self.prompts.render_rerank(query, passage).map_err(|e| e.to_string())?;
                let req = CompletionRequest::new(
                    RoleTag::Reranker,
                    "rerank",
                    system,
                    user,
                    &self.model_id,
                    Decoding::default(),
                );
                let res = self.backend.complete(&req).map_err(|e| e.to_string())?;
                parse_relevance(&res.text).ok_or_else(|| format!("unparsable relevance score {:?}", res.text))
            })
            .collect()
    }
}

fn parse_relevance(text: &str) -> Option<f64> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .filter(|s| !s.is_empty())
        .find_map(|s| s.parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Rescores `candidates` with `reranker` and keeps the best `final_k`.
pub fn rerank(
    store: &CorpusStore,
    reranker: &dyn Reranker,
    query: &str,
    candidates: &RankedList,
    final_k: usize,
) -> Result<RankedList, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let texts: Vec<String> = candidates
        .ids()
        .map(|id| store.get_chunk(id).map(chunk_passage).unwrap_or_default())
        .collect();
    let scores = reranker
        .score(query, &texts)
        .map_err(|message| RetrievalError::Rerank {
            message,
            candidates: candidates.clone(),
        })?;
    if scores.len() != texts.len() {
        return Err(RetrievalError::ScoreCount {
            expected: texts.len(),
            got: scores.len(),
        });
    }
    let scored = candidates.ids().map(str::to_string).zip(scores).collect();
    Ok(RankedList::from_scores(query, scored, final_k))
}
