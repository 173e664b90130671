//! Evaluation of trace files and step-count ablation grids.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Backend, PromptTemplates};
use crate::corpus::{CorpusStore, QaRecord};
use crate::metrics::{evaluate, Judge, MetricMeans, MetricReport, MetricsError};
use crate::pipeline::{load_traces, BatchOptions, Pipeline, PipelineConfig, PipelineError, RunTrace, Variant};
use crate::retrieval::Retriever;

pub const DEFAULT_STEPS: [usize; 4] = [3, 5, 7, 10];
pub const PER_QUERY_FILE: &str = "per_query.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("traces missing for {} queries: {}", .0.len(), .0.join(", "))]
    MissingTraces(Vec<String>),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Scores the traces in `trace_path` against `records` and writes the
/// per-query and report files into `out_dir`. Every record needs a trace;
/// traces for unknown qids are ignored.
pub fn evaluate_trace_file(
    trace_path: &Path,
    records: &[QaRecord],
    store: &CorpusStore,
    judge: &dyn Judge,
    out_dir: &Path,
) -> Result<MetricReport, ExperimentError> {
    let traces = load_traces(trace_path)?;
    let report = evaluate_traces(&traces, records, store, judge)?;
    report.write_per_query(&out_dir.join(PER_QUERY_FILE))?;
    report.write_report(&out_dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Orders `traces` like `records` and scores them.
pub fn evaluate_traces(
    traces: &[RunTrace],
    records: &[QaRecord],
    store: &CorpusStore,
    judge: &dyn Judge,
) -> Result<MetricReport, ExperimentError> {
    let mut by_qid: BTreeMap<&str, &RunTrace> = BTreeMap::new();
    for t in traces {
        by_qid.entry(t.qid.as_str()).or_insert(t);
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !by_qid.contains_key(r.qid.as_str()))
        .map(|r| r.qid.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ExperimentError::MissingTraces(missing));
    }
    let wanted: HashSet<&str> = records.iter().map(|r| r.qid.as_str()).collect();
    let extra = by_qid.keys().filter(|q| !wanted.contains(*q)).count();
    if extra > 0 {
        log::warn!("ignoring {extra} traces whose qids are not in the dataset");
    }
    let ordered: Vec<RunTrace> = records.iter().map(|r| by_qid[r.qid.as_str()].clone()).collect();
    Ok(evaluate(&ordered, records, store, judge)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    /// Each value sets both the sub-query count and the hop budget.
    pub steps: Vec<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::AnchorChain, Variant::IterativeChainOnly],
            steps: DEFAULT_STEPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub steps: usize,
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_queries: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<MetricMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<Variant>,
    pub steps: Vec<usize>,
    pub cells: Vec<AblationCell>,
}

pub fn cell_dir(out_dir: &Path, variant: Variant, steps: usize) -> PathBuf {
    out_dir.join(format!("{variant}-steps{steps}"))
}

/// Shared inputs for running and scoring one configuration.
pub struct Workbench<'a> {
    pub store: Arc<CorpusStore>,
    pub retriever: Arc<Retriever>,
    pub prompts: PromptTemplates,
    pub backend: &'a dyn Backend,
    pub judge: &'a dyn Judge,
    pub records: &'a [QaRecord],
    pub batch: BatchOptions,
}

impl Workbench<'_> {
    /// Runs `cfg` into `dir/traces.jsonl` and scores it into `dir`.
    pub fn run_and_evaluate(&self, cfg: PipelineConfig, dir: &Path) -> Result<MetricReport, ExperimentError> {
        let pipeline = Pipeline::new(self.retriever.clone(), self.prompts.clone(), cfg)?;
        let trace_path = dir.join(TRACE_FILE);
        let summary = pipeline.run_batch(self.records, self.backend, &trace_path, self.batch)?;
        let report = evaluate_traces(&summary.traces, self.records, &self.store, self.judge)?;
        report.write_per_query(&dir.join(PER_QUERY_FILE))?;
        report.write_report(&dir.join(REPORT_FILE))?;
        Ok(report)
    }

    /// Runs every (variant, steps) cell. A failing cell is recorded as a
    /// hole and the grid continues.
    pub fn ablate(&self, base: &PipelineConfig, spec: &AblationSpec, out_dir: &Path) -> AblationTable {
        let mut cells = Vec::new();
        for &variant in &spec.variants {
            for &steps in &spec.steps {
                let dir = cell_dir(out_dir, variant, steps);
                let cfg = PipelineConfig {
                    variant,
                    ..base.clone()
                }
                .with_steps(steps);
                let (n_queries, means, error) = match self.run_and_evaluate(cfg, &dir) {
                    Ok(r) => (Some(r.n_queries), Some(r.aggregates), None),
                    Err(e) => {
                        log::error!("ablation cell {variant} steps={steps} failed: {e}");
                        (None, None, Some(e.to_string()))
                    }
                };
                cells.push(AblationCell {
                    variant,
                    steps,
                    dir,
                    n_queries,
                    means,
                    error,
                });
            }
        }
        AblationTable {
            variants: spec.variants.clone(),
            steps: spec.steps.clone(),
            cells,
        }
    }
}

const METRIC_NAMES: [&str; 4] = ["correct", "recall", "ndcg", "all_pass"];

fn metric(m: &MetricMeans, name: &str) -> f64 {
    match name {
        "correct" => m.correct,
        "recall" => m.recall,
        "ndcg" => m.ndcg,
        _ => m.all_pass,
    }
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, steps: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.steps == steps)
    }

    /// One variants-by-steps grid per metric. Failed cells show `--`.
    pub fn render_text(&self) -> String {
        let width = self.variants.iter().map(|v| v.as_str().len()).max().unwrap_or(7).max(7);
        let mut out = String::new();
        for name in METRIC_NAMES {
            let _ = write!(out, "{name:<width$}");
            for s in &self.steps {
                let _ = write!(out, "  {:>8}", format!("steps={s}"));
            }
            out.push('\n');
            for v in &self.variants {
                let _ = write!(out, "{:<width$}", v.as_str());
                for s in &self.steps {
                    let text = self
                        .cell(*v, *s)
                        .and_then(|c| c.means.as_ref())
                        .map_or_else(|| "--".to_string(), |m| format!("{:.4}", metric(m, name)));
                    let _ = write!(out, "  {text:>8}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(
                out,
                "failed: {} steps={}: {}",
                c.variant,
                c.steps,
                c.error.as_deref().unwrap_or("")
            );
        }
        out.trim_end().to_string() + "\n"
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), ExperimentError> {
        let io = |p: &Path, e: std::io::Error| ExperimentError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
        let text = out_dir.join("table.txt");
        fs::write(&text, self.render_text()).map_err(|e| io(&text, e))?;
        let json = out_dir.join("table.json");
        let mut bytes = serde_json::to_vec_pretty(self).expect("table serializes");
        bytes.push(b'\n');
        fs::write(&json, bytes).map_err(|e| io(&json, e))
    }
}

/// Plain-text rendering of a report file.
pub fn render_report(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "queries: {}", report.n_queries);
    let row = |out: &mut String, label: &str, n: usize, m: &MetricMeans| {
        let _ = writeln!(
            out,
            "{label:<10} {n:>6}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            m.correct, m.recall, m.ndcg, m.all_pass
        );
    };
    let _ = writeln!(
        out,
        "{:<10} {:>6}  {:>8}  {:>8}  {:>8}  {:>8}",
        "group", "n", "correct", "recall", "ndcg", "all_pass"
    );
    row(&mut out, "all", report.n_queries, &report.aggregates);
    for (len, g) in &report.by_required_length {
        row(&mut out, &format!("req={len}"), g.n_queries, &g.means);
    }
    if report.judge_unparsed > 0 {
        let _ = writeln!(out, "judge replies without a decision: {}", report.judge_unparsed);
    }
    out
}
