use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Anchor,
    Hop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub hop_index: usize,
    pub source_query: String,
}

/// Ordered, duplicate-free evidence accumulated over a run. Entry order is
/// first-insertion order; every entry has exactly one provenance record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceContext {
    pub entries: Vec<String>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl EvidenceContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.provenance.contains_key(chunk_id)
    }

    /// Appends the entries of `new` that are not yet present, in rank order.
    /// Returns how many were appended.
    pub fn merge_dedup(&mut self, new: &RankedList, stage: Stage, hop_index: usize, source_query: &str) -> usize {
        let before = self.entries.len();
        for id in new.ids() {
            if self.contains(id) {
                continue;
            }
            self.entries.push(id.to_string());
            self.provenance.insert(
                id.to_string(),
                Provenance {
                    stage,
                    hop_index,
                    source_query: source_query.to_string(),
                },
            );
        }
        self.entries.len() - before
    }

    /// Consuming form of [`merge_dedup`](Self::merge_dedup).
    pub fn merged(mut self, new: &RankedList, stage: Stage, hop_index: usize, source_query: &str) -> Self {
        self.merge_dedup(new, stage, hop_index, source_query);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedEntry;
    use proptest::prelude::*;

    fn list(ids: &[&str]) -> RankedList {
        RankedList {
            query: "q".into(),
            entries: ids
                .iter()
                .map(|id| RankedEntry {
                    chunk_id: id.to_string(),
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn merge_into_empty() {
        let ctx = EvidenceContext::new().merged(&list(&["x", "y"]), Stage::Anchor, 0, "q");
        assert_eq!(ctx.entries, ["x", "y"]);
    }

    #[test]
    fn merge_contained_is_noop() {
        let ctx = EvidenceContext::new().merged(&list(&["x", "y"]), Stage::Anchor, 0, "q");
        let again = ctx.clone().merged(&list(&["y"]), Stage::Hop, 2, "other");
        assert_eq!(ctx, again);
    }

    #[test]
    fn merge_hand_trace() {
        let ctx = EvidenceContext::new()
            .merged(&list(&["a", "b"]), Stage::Anchor, 0, "q1")
            .merged(&list(&["b", "c", "a", "d"]), Stage::Hop, 1, "q2");
        assert_eq!(ctx.entries, ["a", "b", "c", "d"]);
        assert_eq!(ctx.provenance["b"].source_query, "q1");
        assert_eq!(ctx.provenance["c"].stage, Stage::Hop);
    }

    proptest! {
        #[test]
        fn merge_is_monotone_and_idempotent(
            first in prop::collection::vec(0u8..12, 0..8),
            second in prop::collection::vec(0u8..12, 0..8),
        ) {
            let dedup = |v: &[u8]| {
                let mut seen = Vec::new();
                for x in v { if !seen.contains(x) { seen.push(*x); } }
                seen.iter().map(|x| format!("c{x}")).collect::<Vec<_>>()
            };
            let a = dedup(&first);
            let b = dedup(&second);
            let la = list(&a.iter().map(String::as_str).collect::<Vec<_>>());
            let lb = list(&b.iter().map(String::as_str).collect::<Vec<_>>());
            let ctx = EvidenceContext::new().merged(&la, Stage::Anchor, 0, "a");
            let once = ctx.clone().merged(&lb, Stage::Hop, 1, "b");
            let twice = once.clone().merged(&lb, Stage::Hop, 2, "c");
            prop_assert_eq!(&once, &twice);
            prop_assert!(ctx.entries.iter().all(|e| once.contains(e)));
            prop_assert_eq!(&once.entries[..ctx.len()], &ctx.entries[..]);
            prop_assert!(once.len() <= ctx.len() + lb.len());
            prop_assert_eq!(once.entries.len(), once.provenance.len());
        }
    }
}
