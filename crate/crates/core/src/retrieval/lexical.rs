//! BM25 inverted index over chunk title + text.

use std::collections::HashMap;

use super::{RankedList, RetrievalError};
use crate::corpus::Chunk;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Lowercases, deletes punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone)]
pub struct LexicalIndex {
    chunk_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    postings: HashMap<String, Vec<Posting>>,
}

impl LexicalIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self, RetrievalError> {
        if chunks.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(chunks.len());
        for (doc, chunk) in chunks.iter().enumerate() {
            let tokens = tokenize(&format!("{} {}", chunk.title, chunk.text));
            doc_len.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
            }
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| p.doc);
        }
        let avgdl = doc_len.iter().map(|&l| l as f64).sum::<f64>() / chunks.len() as f64;
        Ok(Self {
            chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
            doc_len,
            avgdl,
            postings,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn contains_term(&self, term: &str) -> bool {
        self.postings.contains_key(term)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top-`k` chunks by BM25. Repeated query tokens contribute once per occurrence.
    pub fn search(&self, query: &str, k: usize) -> RankedList {
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in list {
                let dl = self.doc_len[p.doc as usize] as f64;
                let tf = p.tf as f64;
                let norm = tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avgdl));
                *scores.entry(p.doc).or_insert(0.0) += idf * norm;
            }
        }
        let scored = scores
            .into_iter()
            .map(|(doc, s)| (self.chunk_ids[doc as usize].clone(), s))
            .collect();
        RankedList::from_scores(query, scored, k)
    }
}
