//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use anchorchain_core::synthetic::{build, ChainSpec, SyntheticSet};
use anchorchain_core::{CorpusStore, Retriever};

/// A synthetic set with `n_queries` chains and its chunk store.
pub fn synthetic(n_queries: usize) -> (SyntheticSet, Arc<CorpusStore>) {
    let spec = ChainSpec {
        n_queries,
        ..ChainSpec::default()
    };
    let set = build(&spec).expect("default chain spec is valid");
    let store = CorpusStore::from_documents(&set.documents, &Default::default()).expect("synthetic documents ingest");
    (set, Arc::new(store))
}

pub fn retriever(store: &Arc<CorpusStore>) -> Arc<Retriever> {
    Arc::new(Retriever::new(store.clone()).expect("synthetic corpus indexes"))
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_indexes_every_document() {
        let (set, store) = super::synthetic(10);
        assert_eq!(store.doc_ids().len(), set.documents.len());
        assert_eq!(set.qa.len(), 10);
    }
}
