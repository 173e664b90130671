//! Answer correctness and run-level retrieval metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    parse_judge_decision, Backend, BackendError, CompletionRequest, Decoding, PromptError, PromptTemplates, RoleTag,
};
use crate::corpus::{CorpusError, CorpusStore, QaRecord};
use crate::pipeline::RunTrace;

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("query {0}: gold document set is empty")]
    EmptyGold(String),
    #[error("query {qid}: {source}")]
    UnknownChunk {
        qid: String,
        #[source]
        source: CorpusError,
    },
    #[error("judgments and correctness results cover different queries (first difference: {0})")]
    MismatchedQids(String),
    #[error("judge call failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalJudgment {
    pub qid: String,
    /// Parent documents of every retrieved chunk, deduplicated in
    /// first-occurrence order.
    pub retrieved_doc_ids_ordered: Vec<String>,
    pub gold_doc_ids: Vec<String>,
    pub n_required: usize,
}

impl RetrievalJudgment {
    pub fn new(
        qid: &str,
        retrieved: Vec<String>,
        gold: Vec<String>,
        n_required: Option<usize>,
    ) -> Result<Self, MetricsError> {
        if gold.is_empty() {
            return Err(MetricsError::EmptyGold(qid.to_string()));
        }
        let mut seen = HashSet::new();
        let retrieved = retrieved.into_iter().filter(|d| seen.insert(d.clone())).collect();
        let n_required = n_required.unwrap_or(gold.len()).max(1);
        Ok(Self {
            qid: qid.to_string(),
            retrieved_doc_ids_ordered: retrieved,
            gold_doc_ids: gold,
            n_required,
        })
    }

    fn gold_set(&self) -> HashSet<&str> {
        self.gold_doc_ids.iter().map(String::as_str).collect()
    }
}

/// 1 when any gold document was retrieved.
pub fn recall_any_hit(j: &RetrievalJudgment) -> u8 {
    let gold = j.gold_set();
    u8::from(j.retrieved_doc_ids_ordered.iter().any(|d| gold.contains(d.as_str())))
}

/// 1 when every gold document was retrieved.
pub fn all_pass(j: &RetrievalJudgment) -> u8 {
    let got: HashSet<&str> = j.retrieved_doc_ids_ordered.iter().map(String::as_str).collect();
    u8::from(j.gold_set().iter().all(|g| got.contains(g)))
}

/// Binary-relevance NDCG. `k` defaults to the retrieved list length.
pub fn ndcg_at_k(j: &RetrievalJudgment, k: Option<usize>) -> f64 {
    let k = k.unwrap_or(j.retrieved_doc_ids_ordered.len());
    if k == 0 || j.retrieved_doc_ids_ordered.is_empty() {
        return 0.0;
    }
    let gold = j.gold_set();
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = j
        .retrieved_doc_ids_ordered
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, d)| gold.contains(d.as_str()))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(gold.len())).map(discount).sum();
    dcg / idcg
}

/// Builds the judgment for one trace: every chunk in the final context,
/// mapped to its parent document.
pub fn judgment_from_trace(
    trace: &RunTrace,
    qa: &QaRecord,
    store: &CorpusStore,
) -> Result<RetrievalJudgment, MetricsError> {
    let docs = trace
        .context
        .entries
        .iter()
        .map(|id| {
            store
                .get_chunk(id)
                .map(|c| c.doc_id.clone())
                .map_err(|source| MetricsError::UnknownChunk {
                    qid: trace.qid.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    RetrievalJudgment::new(&qa.qid, docs, qa.gold_doc_ids.clone(), qa.n_required)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub correct: bool,
    /// No decision could be read, even after a retry.
    pub unparsed: bool,
}

pub trait Judge: Send + Sync {
    fn judge(&self, question: &str, predicted: &str, gold: &str) -> Result<JudgeOutcome, MetricsError>;
}

/// Trimmed string equality.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatchJudge;

impl Judge for ExactMatchJudge {
    fn judge(&self, _question: &str, predicted: &str, gold: &str) -> Result<JudgeOutcome, MetricsError> {
        Ok(JudgeOutcome {
            correct: predicted.trim() == gold.trim(),
            unparsed: false,
        })
    }
}

/// Model judge driven by the `judge` prompt template.
pub struct TemplateJudge {
    backend: Arc<dyn Backend>,
    prompts: PromptTemplates,
    model_id: String,
    decoding: Decoding,
}

impl TemplateJudge {
    pub fn new(backend: Arc<dyn Backend>, prompts: PromptTemplates, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            prompts,
            model_id: model_id.into(),
            decoding: Decoding::default(),
        }
    }
}

impl Judge for TemplateJudge {
    fn judge(&self, question: &str, predicted: &str, gold: &str) -> Result<JudgeOutcome, MetricsError> {
        let (system, user) = self.prompts.render_judge(question, predicted, gold)?;
        let ask = |user: String| {
            let req = CompletionRequest::new(
                RoleTag::Judge,
                "judge",
                system.clone(),
                user,
                &self.model_id,
                self.decoding,
            );
            self.backend.complete(&req).map(|r| parse_judge_decision(&r.text))
        };
        let decision = match ask(user.clone())? {
            Some(d) => Some(d),
            None => ask(self.prompts.with_judge_retry_note(&user)?)?,
        };
        Ok(JudgeOutcome {
            correct: decision.unwrap_or(false),
            unparsed: decision.is_none(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub qid: String,
    pub correct: u8,
    pub recall: u8,
    pub ndcg: f64,
    pub all_pass: u8,
    pub n_required: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub judge_unparsed: bool,
    pub metrics_version: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub correct: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub all_pass: f64,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a QueryMetrics>) -> (Self, usize) {
        let mut sum = Self::default();
        let mut n = 0usize;
        for r in rows {
            sum.correct += f64::from(r.correct);
            sum.recall += f64::from(r.recall);
            sum.ndcg += r.ndcg;
            sum.all_pass += f64::from(r.all_pass);
            n += 1;
        }
        if n == 0 {
            return (sum, 0);
        }
        let d = n as f64;
        (
            Self {
                correct: sum.correct / d,
                recall: sum.recall / d,
                ndcg: sum.ndcg / d,
                all_pass: sum.all_pass / d,
            },
            n,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub n_queries: usize,
    #[serde(flatten)]
    pub means: MetricMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics_version: u32,
    pub n_queries: usize,
    pub aggregates: MetricMeans,
    pub by_required_length: BTreeMap<usize, GroupMeans>,
    pub judge_unparsed: usize,
    /// Rows in input order.
    #[serde(default, skip_serializing)]
    pub per_query: Vec<QueryMetrics>,
}

impl MetricReport {
    pub fn query(&self, qid: &str) -> Option<&QueryMetrics> {
        self.per_query.iter().find(|q| q.qid == qid)
    }

    pub fn from_rows(per_query: Vec<QueryMetrics>) -> Self {
        let (aggregates, n_queries) = MetricMeans::of(&per_query);
        let mut groups: BTreeMap<usize, Vec<&QueryMetrics>> = BTreeMap::new();
        for q in &per_query {
            groups.entry(q.n_required).or_default().push(q);
        }
        let by_required_length = groups
            .into_iter()
            .map(|(len, rows)| {
                let (means, n) = MetricMeans::of(rows);
                (len, GroupMeans { n_queries: n, means })
            })
            .collect();
        Self {
            metrics_version: METRICS_VERSION,
            n_queries,
            aggregates,
            by_required_length,
            judge_unparsed: per_query.iter().filter(|q| q.judge_unparsed).count(),
            per_query,
        }
    }

    pub fn write_per_query(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = Vec::new();
        for q in &self.per_query {
            serde_json::to_writer(&mut out, q).expect("metrics serialize");
            out.push(b'\n');
        }
        write_file(path, &out)
    }

    pub fn write_report(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        write_file(path, &out)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MetricsError> {
    let err = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(err)
}

pub fn read_per_query(path: &Path) -> Result<Vec<QueryMetrics>, MetricsError> {
    crate::corpus::read_jsonl(path).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Combines retrieval judgments with correctness results keyed by qid.
pub fn aggregate(
    judgments: &[RetrievalJudgment],
    correctness: &HashMap<String, JudgeOutcome>,
) -> Result<MetricReport, MetricsError> {
    if judgments.len() != correctness.len() {
        let missing = correctness
            .keys()
            .find(|k| !judgments.iter().any(|j| &j.qid == *k))
            .cloned()
            .unwrap_or_else(|| "count".into());
        return Err(MetricsError::MismatchedQids(missing));
    }
    let rows = judgments
        .iter()
        .map(|j| {
            let c = correctness
                .get(&j.qid)
                .ok_or_else(|| MetricsError::MismatchedQids(j.qid.clone()))?;
            Ok(QueryMetrics {
                qid: j.qid.clone(),
                correct: u8::from(c.correct),
                recall: recall_any_hit(j),
                ndcg: ndcg_at_k(j, None),
                all_pass: all_pass(j),
                n_required: j.n_required,
                judge_unparsed: c.unparsed,
                metrics_version: METRICS_VERSION,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(MetricReport::from_rows(rows))
}

/// Judges and scores a set of traces against their dataset records.
pub fn evaluate(
    traces: &[RunTrace],
    records: &[QaRecord],
    store: &CorpusStore,
    judge: &dyn Judge,
) -> Result<MetricReport, MetricsError> {
    let by_qid: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.qid.as_str(), r)).collect();
    let mut judgments = Vec::with_capacity(traces.len());
    let mut correctness = HashMap::new();
    for t in traces {
        let qa = by_qid
            .get(t.qid.as_str())
            .ok_or_else(|| MetricsError::MismatchedQids(t.qid.clone()))?;
        judgments.push(judgment_from_trace(t, qa, store)?);
        correctness.insert(t.qid.clone(), judge.judge(&qa.question, &t.final_answer, &qa.answer)?);
    }
    aggregate(&judgments, &correctness)
}
