//! Seeded multi-hop corpora with planted answer chains, and oracle agents
//! that solve them exactly.
//!
//! Each query follows a chain `e_0 -> e_1 -> ... -> e_h` of made-up entity
//! names joined by relations `r_1 ..= r_h`. Gold document `j` states the
//! `j`-th link and is titled `"<r_j> of <e_(j-1)>"`. The question names only
//! `e_0` and `r_1`, so a single search on it can reach the first link at
//! best, and a search on one link's title cannot surface the next link.
//! Near-miss distractors repeat `e_0` with other relations and invented
//! tails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{Backend, BackendError, CompletionRequest, CompletionResult, RoleTag};
use crate::corpus::{read_jsonl, ChunkingConfig, CorpusError, CorpusStore, QaRecord, SourceDocument};
use crate::retrieval::{RetrievalConfig, RetrievalError, Retriever};

pub const INSUFFICIENT: &str = "insufficient evidence";

const RELATIONS: &[&str] = &[
    "mentor",
    "founder",
    "rival",
    "patron",
    "successor",
    "sibling",
    "neighbor",
    "teacher",
    "employer",
    "partner",
    "ally",
    "heir",
    "captain",
    "guardian",
    "sponsor",
    "architect",
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr", "st", "gl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "x"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("gold document {doc_id} is not the top result for its own title (got {got:?})")]
    PostCheck { doc_id: String, got: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSpec {
    pub n_queries: usize,
    /// Hop counts assigned round-robin, so query `i` has
    /// `hops_per_query[i % len]` hops.
    pub hops_per_query: Vec<usize>,
    pub distractors_per_gold: usize,
    /// Fraction of distractors that reuse the question's head entity.
    pub near_miss_rate: f64,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n_queries: 200,
            hops_per_query: vec![2, 3, 4],
            distractors_per_gold: 5,
            near_miss_rate: 0.6,
            seed: 42,
        }
    }
}

impl ChainSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.hops_per_query.is_empty() {
            return Err(SynthError::InvalidSpec("hops_per_query is empty".into()));
        }
        if let Some(h) = self
            .hops_per_query
            .iter()
            .find(|h| **h < 2 || **h > RELATIONS.len() / 2)
        {
            return Err(SynthError::InvalidSpec(format!(
                "hop count {h} outside [2, {}]",
                RELATIONS.len() / 2
            )));
        }
        if !(0.0..=1.0).contains(&self.near_miss_rate) {
            return Err(SynthError::InvalidSpec("near_miss_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn hops_for(&self, i: usize) -> usize {
        self.hops_per_query[i % self.hops_per_query.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub qid: String,
    /// Entities `e_0 ..= e_h`.
    pub chain: Vec<String>,
    /// Relations `r_1 ..= r_h`.
    pub relations: Vec<String>,
    /// One document per link, in chain order.
    pub gold_doc_ids: Vec<String>,
    pub answer: String,
}

impl SyntheticTruth {
    pub fn hops(&self) -> usize {
        self.gold_doc_ids.len()
    }

    /// Title of the document for link `j` (1-based).
    pub fn gold_title(&self, j: usize) -> String {
        link_title(&self.relations[j - 1], &self.chain[j - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub documents: Vec<SourceDocument>,
    pub qa: Vec<QaRecord>,
    pub truth: Vec<SyntheticTruth>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub n_queries: usize,
    pub n_documents: usize,
    pub n_required_histogram: BTreeMap<usize, usize>,
    pub gold_checked: usize,
}

struct Names {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Names {
    fn fresh(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut s = String::new();
            for _ in 0..syllables {
                s.push_str(ONSETS[self.rng.random_range(0..ONSETS.len())]);
                s.push_str(VOWELS[self.rng.random_range(0..VOWELS.len())]);
            }
            s.push_str(CODAS[self.rng.random_range(0..CODAS.len())]);
            if s.len() >= 5 && !RELATIONS.contains(&s.as_str()) && self.used.insert(s.clone()) {
                let mut c = s.chars();
                let first = c.next().expect("non-empty name").to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }
}

fn link_title(relation: &str, head: &str) -> String {
    let mut c = relation.chars();
    let first = c.next().map(|f| f.to_ascii_uppercase());
    format!("{} of {head}", first.into_iter().chain(c).collect::<String>())
}

fn link_text(relation: &str, head: &str, tail: &str) -> String {
    format!("The {relation} of {head} is {tail}. Records list {tail} under {head}.")
}

/// Names only the first relation and the head entity. Later links share no
/// content words with the question, so they cannot surface from a search on
/// it.
fn question_text(first_relation: &str, head: &str, hops: usize) -> String {
    format!(
        "Starting from the {first_relation} of {head} and following {} further links, which entity is reached?",
        hops - 1
    )
}

/// Builds the set in memory. Identical specs give identical sets.
pub fn build(spec: &ChainSpec) -> Result<SyntheticSet, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = Names {
        rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0a7e),
        used: HashSet::new(),
    };
    // (title, text, owning query, gold link index or 0)
    let mut raw: Vec<(String, String, usize, usize)> = Vec::new();
    let mut chains = Vec::new();
    for i in 0..spec.n_queries {
        let h = spec.hops_for(i);
        let mut rels: Vec<&str> = RELATIONS.to_vec();
        rels.shuffle(&mut rng);
        let (chain_rels, spare_rels) = rels.split_at(h);
        let chain: Vec<String> = (0..=h).map(|_| names.fresh()).collect();
        for j in 1..=h {
            raw.push((
                link_title(chain_rels[j - 1], &chain[j - 1]),
                link_text(chain_rels[j - 1], &chain[j - 1], &chain[j]),
                i,
                j,
            ));
        }
        let n_distractors = h * spec.distractors_per_gold;
        let n_near = (n_distractors as f64 * spec.near_miss_rate).round() as usize;
        for d in 0..n_distractors {
            let rel = spare_rels[rng.random_range(0..spare_rels.len())];
            let (head, tail) = if d < n_near {
                (chain[0].clone(), names.fresh())
            } else {
                (names.fresh(), names.fresh())
            };
            raw.push((link_title(rel, &head), link_text(rel, &head, &tail), i, 0));
        }
        chains.push((chain, chain_rels.to_vec()));
    }
    raw.shuffle(&mut rng);

    let mut gold: Vec<BTreeMap<usize, String>> = vec![BTreeMap::new(); spec.n_queries];
    let documents = raw
        .into_iter()
        .enumerate()
        .map(|(n, (title, text, owner, link))| {
            let doc_id = format!("d{n:05}");
            if link > 0 {
                gold[owner].insert(link, doc_id.clone());
            }
            SourceDocument { doc_id, title, text }
        })
        .collect();

    let mut qa = Vec::with_capacity(spec.n_queries);
    let mut truth = Vec::with_capacity(spec.n_queries);
    for (i, ((chain, rels), gold)) in chains.into_iter().zip(gold).enumerate() {
        let qid = format!("syn-{i:04}");
        let gold_doc_ids: Vec<String> = gold.into_values().collect();
        let answer = chain.last().expect("chain has a tail").clone();
        qa.push(QaRecord {
            qid: qid.clone(),
            question: question_text(rels[0], &chain[0], chain.len() - 1),
            answer: answer.clone(),
            gold_doc_ids: gold_doc_ids.clone(),
            n_required: Some(gold_doc_ids.len()),
        });
        truth.push(SyntheticTruth {
            qid,
            chain,
            relations: rels.iter().map(|r| r.to_string()).collect(),
            gold_doc_ids,
            answer,
        });
    }
    Ok(SyntheticSet { documents, qa, truth })
}

/// Confirms that every gold document is the top result for a query equal
/// to its title. Returns the number checked.
pub fn post_check(set: &SyntheticSet) -> Result<usize, SynthError> {
    let store = Arc::new(CorpusStore::from_documents(&set.documents, &ChunkingConfig::default())?);
    let retriever = Retriever::new(store.clone())?;
    let cfg = RetrievalConfig::default();
    let mut checked = 0;
    for t in &set.truth {
        for (j, doc_id) in t.gold_doc_ids.iter().enumerate() {
            let top = retriever.retrieve(&t.gold_title(j + 1), &cfg)?;
            let got = top.entries.first().map(|e| e.chunk_id.clone());
            if got.as_deref().and_then(crate::corpus::Chunk::doc_id_of) != Some(doc_id.as_str()) {
                return Err(SynthError::PostCheck {
                    doc_id: doc_id.clone(),
                    got,
                });
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SynthError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Writes `corpus.jsonl`, `qa.jsonl` and `truth.jsonl` into `out_dir` after
/// running the post-generation check.
pub fn generate(spec: &ChainSpec, out_dir: &Path) -> Result<GenerationSummary, SynthError> {
    let set = build(spec)?;
    let gold_checked = post_check(&set)?;
    fs::create_dir_all(out_dir).map_err(|e| SynthError::Io {
        path: out_dir.display().to_string(),
        message: e.to_string(),
    })?;
    write_jsonl(&out_dir.join("corpus.jsonl"), &set.documents)?;
    write_jsonl(&out_dir.join("qa.jsonl"), &set.qa)?;
    write_jsonl(&out_dir.join("truth.jsonl"), &set.truth)?;
    let mut n_required_histogram = BTreeMap::new();
    for t in &set.truth {
        *n_required_histogram.entry(t.hops()).or_insert(0) += 1;
    }
    Ok(GenerationSummary {
        n_queries: set.qa.len(),
        n_documents: set.documents.len(),
        n_required_histogram,
        gold_checked,
    })
}

pub fn load_truth(path: &Path) -> Result<Vec<SyntheticTruth>, SynthError> {
    Ok(read_jsonl(path)?)
}

/// Deterministic agents that read the question and the rendered passages
/// out of each prompt and act on the planted truth.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    by_question: HashMap<String, SyntheticTruth>,
}

fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

/// Document ids of the passages rendered in a prompt, from the
/// `[n] <chunk_id> | <title>` headers.
fn rendered_docs(prompt: &str) -> HashSet<&str> {
    prompt
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix('[')?;
            let (num, rest) = rest.split_once("] ")?;
            if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            let (chunk_id, _) = rest.split_once(" | ")?;
            crate::corpus::Chunk::doc_id_of(chunk_id)
        })
        .collect()
}

impl OracleBackend {
    pub fn new(truth: &[SyntheticTruth], qa: &[QaRecord]) -> Self {
        let by_qid: HashMap<&str, &SyntheticTruth> = truth.iter().map(|t| (t.qid.as_str(), t)).collect();
        let by_question = qa
            .iter()
            .filter_map(|r| by_qid.get(r.qid.as_str()).map(|t| (r.question.clone(), (*t).clone())))
            .collect();
        Self { by_question }
    }

    pub fn from_set(set: &SyntheticSet) -> Self {
        Self::new(&set.truth, &set.qa)
    }

    fn truth_for(&self, req: &CompletionRequest) -> Result<&SyntheticTruth, BackendError> {
        let q = field(&req.user_prompt, "Question: ")
            .ok_or_else(|| BackendError::BadResponse("oracle: prompt has no question line".into()))?;
        self.by_question
            .get(q)
            .ok_or_else(|| BackendError::BadResponse(format!("oracle: question not in truth: {q}")))
    }

    /// 1-based index of the first gold link missing from the prompt.
    fn first_missing(truth: &SyntheticTruth, prompt: &str) -> Option<usize> {
        let present = rendered_docs(prompt);
        truth
            .gold_doc_ids
            .iter()
            .position(|d| !present.contains(d.as_str()))
            .map(|p| p + 1)
    }

    fn respond(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let truth = self.truth_for(req)?;
        let prompt = &req.user_prompt;
        let missing = Self::first_missing(truth, prompt);
        let text = match (req.role_tag, req.template.as_str()) {
            (RoleTag::Planner, _) => {
                let m = req
                    .system_prompt
                    .lines()
                    .find_map(|l| {
                        l.strip_prefix("Output ")?
                            .strip_suffix(" terms to query for.")?
                            .parse()
                            .ok()
                    })
                    .unwrap_or(usize::MAX);
                let searches: Vec<_> = (1..=truth.hops().min(m))
                    .map(|j| json!({"reason": format!("link {j}"), "query": truth.gold_title(j)}))
                    .collect();
                json!({ "searches": searches }).to_string()
            }
            (RoleTag::Writer, "ircot") => match missing {
                Some(j) => format!("{}.", truth.gold_title(j)),
                None => format!("So the answer is: {}", truth.answer),
            },
            (RoleTag::Writer, "writer") => {
                let answer = if missing.is_none() {
                    truth.answer.as_str()
                } else {
                    INSUFFICIENT
                };
                json!({ "answer": answer }).to_string()
            }
            (RoleTag::Writer, _) => json!({ "answer": INSUFFICIENT }).to_string(),
            (RoleTag::Esc, "esc_decide") => match missing {
                Some(j) => json!({"action": "CONTINUE", "message": format!("link {j} missing")}).to_string(),
                None => json!({"action": "STOP", "message": "all links present"}).to_string(),
            },
            (RoleTag::Esc, _) => match missing {
                Some(j) => json!({
                    "action": "CONTINUE",
                    "next_query": truth.gold_title(j),
                    "message": format!("link {j} missing"),
                })
                .to_string(),
                None => json!({"action": "STOP", "message": "all links present"}).to_string(),
            },
            (RoleTag::Formulator, _) => {
                let j = missing.unwrap_or(truth.hops());
                json!({ "query": truth.gold_title(j) }).to_string()
            }
            (RoleTag::Judge, _) => {
                let predicted = field(prompt, "Predicted Answer:").unwrap_or("");
                let gold = field(prompt, "Ground-Truth Answer:").unwrap_or("");
                let verdict = if predicted == gold { "yes" } else { "no" };
                format!("Explanation: exact comparison.\nDecision: {verdict}")
            }
            (RoleTag::Reranker, _) => {
                return Err(BackendError::BadResponse("oracle: reranking is not scripted".into()));
            }
        };
        Ok(text)
    }
}

impl Backend for OracleBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.respond(req).map(CompletionResult::text)
    }

    fn id(&self) -> String {
        "oracle".into()
    }
}
