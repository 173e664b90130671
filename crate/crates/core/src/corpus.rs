//! Corpus ingestion, chunking and the chunk store.
//!
//! Documents arrive as line-delimited JSON records. Each document is split
//! into chunks whose ids are `doc_id#ordinal` (zero-based), so mapping a
//! retrieved chunk back to its source document is a string split.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id {doc_id:?} at line {line}")]
    DuplicateDoc { doc_id: String, line: usize },
    #[error("unknown chunk id {0:?}")]
    UnknownChunk(String),
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    #[serde(alias = "body")]
    pub text: String,
}

impl SourceDocument {
    fn validate(&self) -> Result<(), String> {
        if self.doc_id.is_empty() {
            return Err("doc_id must be non-empty".into());
        }
        if self.text.is_empty() && self.title.is_empty() {
            return Err("document has neither title nor text".into());
        }
        Ok(())
    }
}

/// Half-open `[start, end)` span measured in characters of the parent body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub char_span: CharSpan,
}

impl Chunk {
    /// Parent document id encoded in a chunk id, i.e. everything before the last `#`.
    pub fn doc_id_of(chunk_id: &str) -> Option<&str> {
        chunk_id.rsplit_once('#').map(|(doc, _)| doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    pub split_on_boundaries: bool,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_chars: 1200,
            overlap_chars: 120,
            split_on_boundaries: true,
        }
    }
}

impl ChunkingConfig {
    pub fn fixed(max_chars: usize, overlap_chars: usize) -> Self {
        Self {
            max_chars,
            overlap_chars,
            split_on_boundaries: false,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_chars == 0 {
            return Err(CorpusError::InvalidConfig("max_chars must be positive".into()));
        }
        if self.overlap_chars >= self.max_chars {
            return Err(CorpusError::InvalidConfig(format!(
                "overlap_chars ({}) must be smaller than max_chars ({})",
                self.overlap_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_documents: usize,
    pub n_chunks: usize,
    pub mean_chunk_chars: f64,
}

/// Splits a document body into chunks.
///
/// Windows are at most `max_chars` long and consecutive windows share exactly
/// `overlap_chars` characters. With `split_on_boundaries`, a window that would
/// end mid-text is shortened to the last paragraph or sentence break that still
/// leaves room for the overlap.
pub fn chunk_document(doc: &SourceDocument, cfg: &ChunkingConfig) -> Vec<Chunk> {
    let chars: Vec<char> = doc.text.chars().collect();
    let spans = chunk_spans(&chars, cfg);
    spans
        .into_iter()
        .enumerate()
        .map(|(ordinal, span)| Chunk {
            chunk_id: format!("{}#{}", doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text: chars[span.start..span.end].iter().collect(),
            char_span: span,
        })
        .collect()
}

fn chunk_spans(chars: &[char], cfg: &ChunkingConfig) -> Vec<CharSpan> {
    let len = chars.len();
    let mut spans = Vec::new();
    if len == 0 {
        return spans;
    }
    let mut start = 0;
    loop {
        let mut end = (start + cfg.max_chars).min(len);
        if end < len && cfg.split_on_boundaries {
            if let Some(cut) = boundary_cut(chars, start + cfg.overlap_chars + 1, end) {
                end = cut;
            }
        }
        spans.push(CharSpan { start, end });
        if end == len {
            break;
        }
        start = end - cfg.overlap_chars;
    }
    spans
}

/// Latest cut position in `(min_end..=end)` that falls just after a paragraph
/// break, else after a sentence terminator followed by whitespace.
fn boundary_cut(chars: &[char], min_end: usize, end: usize) -> Option<usize> {
    if min_end > end {
        return None;
    }
    let paragraph = (min_end..=end)
        .rev()
        .find(|&cut| cut >= 2 && chars[cut - 1] == '\n' && chars[cut - 2] == '\n');
    if paragraph.is_some() {
        return paragraph;
    }
    (min_end..=end)
        .rev()
        .find(|&cut| cut >= 2 && chars[cut - 1].is_whitespace() && matches!(chars[cut - 2], '.' | '!' | '?'))
}

/// Reads a line-delimited record file, reporting the 1-based line number of
/// the first malformed record. Blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Immutable chunk store built once by ingestion.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
    doc_order: Vec<String>,
    doc_chunks: HashMap<String, Vec<usize>>,
}

impl CorpusStore {
    pub fn from_documents(docs: &[SourceDocument], cfg: &ChunkingConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let mut seen = HashSet::new();
        let mut store = CorpusStore::default();
        for (i, doc) in docs.iter().enumerate() {
            doc.validate()
                .map_err(|message| CorpusError::Malformed { line: i + 1, message })?;
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDoc {
                    doc_id: doc.doc_id.clone(),
                    line: i + 1,
                });
            }
            store.doc_order.push(doc.doc_id.clone());
            let ids = store.doc_chunks.entry(doc.doc_id.clone()).or_default();
            for chunk in chunk_document(doc, cfg) {
                ids.push(store.chunks.len());
                store.by_id.insert(chunk.chunk_id.clone(), store.chunks.len());
                store.chunks.push(chunk);
            }
        }
        Ok(store)
    }

    /// Ingests a corpus file in the line-delimited `{doc_id, title, text}` format.
    pub fn ingest(path: &Path, cfg: &ChunkingConfig) -> Result<Self, CorpusError> {
        let docs: Vec<SourceDocument> = read_jsonl(path)?;
        Self::from_documents(&docs, cfg)
    }

    pub fn get_chunk(&self, chunk_id: &str) -> Result<&Chunk, CorpusError> {
        self.by_id
            .get(chunk_id)
            .map(|&i| &self.chunks[i])
            .ok_or_else(|| CorpusError::UnknownChunk(chunk_id.to_string()))
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_order
    }

    pub fn has_doc(&self, doc_id: &str) -> bool {
        self.doc_chunks.contains_key(doc_id)
    }

    pub fn chunks_of(&self, doc_id: &str) -> impl Iterator<Item = &Chunk> {
        self.doc_chunks
            .get(doc_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.chunks[i])
    }

    /// Title of a document, taken from its first chunk.
    pub fn doc_title(&self, doc_id: &str) -> Option<&str> {
        self.chunks_of(doc_id).next().map(|c| c.title.as_str())
    }

    pub fn stats(&self) -> CorpusStats {
        let total: usize = self.chunks.iter().map(|c| c.char_span.len()).sum();
        CorpusStats {
            n_documents: self.doc_order.len(),
            n_chunks: self.chunks.len(),
            mean_chunk_chars: if self.chunks.is_empty() {
                0.0
            } else {
                total as f64 / self.chunks.len() as f64
            },
        }
    }

    fn chunks_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for chunk in &self.chunks {
            serde_json::to_writer(&mut buf, chunk).expect("chunk serializes");
            buf.push(b'\n');
        }
        buf
    }

    /// Lowercase hex SHA-256 over the persisted chunk records.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.chunks_bytes()))
    }

    /// Persists the store as `chunks.jsonl` (one chunk per line, keyed by
    /// `chunk_id`) plus `stats.json`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let chunks_path = dir.join(CHUNKS_FILE);
        fs::write(&chunks_path, self.chunks_bytes()).map_err(|e| CorpusError::io(&chunks_path, e))?;
        let stats_path = dir.join(STATS_FILE);
        let meta = StoredStats {
            stats: self.stats(),
            digest: self.digest(),
        };
        let mut f = fs::File::create(&stats_path).map_err(|e| CorpusError::io(&stats_path, e))?;
        serde_json::to_writer_pretty(&mut f, &meta).expect("stats serialize");
        f.write_all(b"\n").map_err(|e| CorpusError::io(&stats_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let chunks: Vec<Chunk> = read_jsonl(&dir.join(CHUNKS_FILE))?;
        let mut store = CorpusStore::default();
        for (i, chunk) in chunks.into_iter().enumerate() {
            if store.by_id.contains_key(&chunk.chunk_id) {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    message: format!("duplicate chunk id {:?}", chunk.chunk_id),
                });
            }
            if !store.doc_chunks.contains_key(&chunk.doc_id) {
                store.doc_order.push(chunk.doc_id.clone());
            }
            store
                .doc_chunks
                .entry(chunk.doc_id.clone())
                .or_default()
                .push(store.chunks.len());
            store.by_id.insert(chunk.chunk_id.clone(), store.chunks.len());
            store.chunks.push(chunk);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredStats {
    pub stats: CorpusStats,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qid: String,
    pub question: String,
    pub answer: String,
    pub gold_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_required: Option<usize>,
}

impl QaRecord {
    pub fn required_len(&self) -> usize {
        self.n_required.unwrap_or(self.gold_doc_ids.len())
    }
}

/// Loads a QA dataset file and rejects duplicate qids.
pub fn load_qa(path: &Path) -> Result<Vec<QaRecord>, CorpusError> {
    let records: Vec<QaRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.qid.as_str()) {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: format!("duplicate qid {:?}", r.qid),
            });
        }
        if r.gold_doc_ids.is_empty() {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: "gold_doc_ids must be non-empty".into(),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> SourceDocument {
        SourceDocument {
            doc_id: id.into(),
            title: format!("title {id}"),
            text: text.into(),
        }
    }

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| (c.char_span.start, c.char_span.end)).collect()
    }

    #[test]
    fn empty_body_has_no_chunks() {
        assert!(chunk_document(&doc("a", ""), &ChunkingConfig::default()).is_empty());
    }

    #[test]
    fn short_body_is_one_chunk() {
        let chunks = chunk_document(&doc("a", &"x".repeat(90)), &ChunkingConfig::fixed(100, 0));
        assert_eq!(spans(&chunks), vec![(0, 90)]);
        assert_eq!(chunks[0].chunk_id, "a#0");
    }

    #[test]
    fn fixed_width_split() {
        let chunks = chunk_document(&doc("a", &"x".repeat(250)), &ChunkingConfig::fixed(100, 0));
        assert_eq!(spans(&chunks), vec![(0, 100), (100, 200), (200, 250)]);
    }

    /// Independent re-chunker: step by (max - overlap) until a window reaches the end.
    fn reference_spans(len: usize, max: usize, overlap: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut s = 0usize;
        if len == 0 {
            return out;
        }
        loop {
            let e = usize::min(s + max, len);
            out.push((s, e));
            if e == len {
                break;
            }
            s += max - overlap;
        }
        out
    }

    #[test]
    fn overlapping_split_matches_reference() {
        assert_eq!(reference_spans(150, 100, 20), vec![(0, 100), (80, 150)]);
        let chunks = chunk_document(&doc("a", &"y".repeat(150)), &ChunkingConfig::fixed(100, 20));
        assert_eq!(spans(&chunks), vec![(0, 100), (80, 150)]);
    }

    #[test]
    fn boundary_split_prefers_sentence_end() {
        let text = "First sentence here. Second sentence is a bit longer than that.";
        let cfg = ChunkingConfig {
            max_chars: 30,
            overlap_chars: 0,
            split_on_boundaries: true,
        };
        let chunks = chunk_document(&doc("a", text), &cfg);
        assert_eq!(chunks[0].text, "First sentence here. ");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ChunkingConfig::fixed(10, 10).validate().is_err());
        assert!(ChunkingConfig::fixed(0, 0).validate().is_err());
    }

    #[test]
    fn duplicate_doc_rejected() {
        let docs = vec![doc("a", "one"), doc("a", "two")];
        let err = CorpusStore::from_documents(&docs, &ChunkingConfig::default()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDoc { line: 2, .. }));
    }

    #[test]
    fn get_chunk_known_and_unknown() {
        let docs = vec![doc("a", &"z".repeat(250)), doc("b", "short")];
        let store = CorpusStore::from_documents(&docs, &ChunkingConfig::fixed(100, 0)).unwrap();
        assert_eq!(
            store.get_chunk("a#2").unwrap().char_span,
            CharSpan { start: 200, end: 250 }
        );
        assert_eq!(store.get_chunk("b#0").unwrap().text, "short");
        assert!(matches!(store.get_chunk("b#1"), Err(CorpusError::UnknownChunk(_))));
    }

    #[test]
    fn doc_id_of_uses_last_hash() {
        assert_eq!(Chunk::doc_id_of("x#y#3"), Some("x#y"));
        assert_eq!(Chunk::doc_id_of("nohash"), None);
    }

    fn reconstruct(chunks: &[Chunk], overlap: usize) -> String {
        let mut out = String::new();
        for (i, c) in chunks.iter().enumerate() {
            let skip = if i == 0 { 0 } else { overlap };
            out.extend(c.text.chars().skip(skip));
        }
        out
    }

    proptest! {
        #[test]
        fn chunks_cover_and_reconstruct(
            text in "[a-z .\n]{0,400}",
            max in 5usize..120,
            overlap_frac in 0.0f64..0.9,
            boundaries in any::<bool>(),
        ) {
            let overlap = ((max as f64) * overlap_frac) as usize;
            let overlap = overlap.min(max - 1);
            let cfg = ChunkingConfig { max_chars: max, overlap_chars: overlap, split_on_boundaries: boundaries };
            let d = doc("d", &text);
            let chunks = chunk_document(&d, &cfg);
            let len = text.chars().count();
            if len == 0 {
                prop_assert!(chunks.is_empty());
            } else {
                prop_assert_eq!(chunks[0].char_span.start, 0);
                prop_assert_eq!(chunks.last().unwrap().char_span.end, len);
                for w in chunks.windows(2) {
                    prop_assert_eq!(w[1].char_span.start, w[0].char_span.end - overlap);
                }
                for c in &chunks {
                    prop_assert!(c.char_span.len() <= max);
                    prop_assert!(c.char_span.end <= len);
                }
                prop_assert_eq!(reconstruct(&chunks, overlap), text);
            }
        }
    }
}
