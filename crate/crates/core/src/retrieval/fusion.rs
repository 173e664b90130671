use std::collections::HashMap;

use super::RankedList;

/// Reciprocal rank fusion: `score(c) = Σ 1 / (constant + rank)` over the lists
/// that contain `c`, with 1-based ranks. Keeps the top `k`.
pub fn fuse_rrf(lists: &[RankedList], k: usize, constant: f64) -> RankedList {
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for (i, entry) in list.entries.iter().enumerate() {
            *scores.entry(entry.chunk_id.as_str()).or_insert(0.0) += 1.0 / (constant + (i + 1) as f64);
        }
    }
    let query = lists.first().map_or("", |l| l.query.as_str());
    let scored = scores.into_iter().map(|(id, s)| (id.to_string(), s)).collect();
    RankedList::from_scores(query, scored, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedEntry;

    fn list(ids: &[&str]) -> RankedList {
        RankedList {
            query: "q".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    chunk_id: id.to_string(),
                    score: 10.0 - i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn single_list_keeps_order() {
        let out = fuse_rrf(&[list(&["x", "a", "m"])], 10, 60.0);
        assert_eq!(out.ids().collect::<Vec<_>>(), ["x", "a", "m"]);
        assert!((out.entries[0].score - 1.0 / 61.0).abs() < 1e-15);
    }

    #[test]
    fn identical_lists_double_scores() {
        let l = list(&["x", "a"]);
        let out = fuse_rrf(&[l.clone(), l], 10, 60.0);
        assert_eq!(out.ids().collect::<Vec<_>>(), ["x", "a"]);
        assert!((out.entries[1].score - 2.0 / 62.0).abs() < 1e-15);
    }

    #[test]
    fn swapped_lists_tie_on_id() {
        let out = fuse_rrf(&[list(&["a", "b"]), list(&["b", "a"])], 10, 60.0);
        assert_eq!(out.ids().collect::<Vec<_>>(), ["a", "b"]);
        let expected = 1.0 / 61.0 + 1.0 / 62.0;
        for e in &out.entries {
            assert!((e.score - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn truncates_to_k() {
        assert_eq!(fuse_rrf(&[list(&["a", "b", "c"])], 2, 60.0).len(), 2);
    }
}
