//! The two-stage control loop with its comparison variants. Batch execution lives in `batch`.

mod batch;
mod engine;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentDecision, BackendError, Decoding, PromptError, StepResponse, SubQueryPlan, TranscriptEntry};
use crate::retrieval::{EvidenceContext, RankedList, RetrievalConfig, RetrievalError};

pub use batch::{load_traces, BatchOptions, BatchSummary};
pub use engine::Pipeline;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Coverage anchoring followed by the controller-gated chain.
    AnchorChain,
    CoverageAnchorOnly,
    IterativeChainOnly,
    InterleavedIrcotStyle,
    CotNoRetrieval,
    Direct,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AnchorChain,
        Variant::CoverageAnchorOnly,
        Variant::IterativeChainOnly,
        Variant::InterleavedIrcotStyle,
        Variant::CotNoRetrieval,
        Variant::Direct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AnchorChain => "anchor_chain",
            Variant::CoverageAnchorOnly => "coverage_anchor_only",
            Variant::IterativeChainOnly => "iterative_chain_only",
            Variant::InterleavedIrcotStyle => "interleaved_ircot_style",
            Variant::CotNoRetrieval => "cot_no_retrieval",
            Variant::Direct => "direct",
        }
    }

    pub fn retrieves(self) -> bool {
        !matches!(self, Variant::CotNoRetrieval | Variant::Direct)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
            format!("unknown variant {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Maximum number of planner sub-queries.
    pub m: usize,
    /// Maximum number of chain hops.
    pub hop_budget: usize,
    pub retrieval: RetrievalConfig,
    pub context_char_cap: usize,
    /// Ask for the follow-up query in a separate formulator call instead of
    /// taking it from the controller's reply.
    pub separate_formulator: bool,
    pub model_id: String,
    pub controller_model_id: String,
    pub decoding: Decoding,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AnchorChain,
            m: 5,
            hop_budget: 5,
            retrieval: RetrievalConfig::default(),
            context_char_cap: 60_000,
            separate_formulator: false,
            model_id: "gpt-4o-mini".into(),
            controller_model_id: "gpt-4o-mini".into(),
            decoding: Decoding::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.m == 0 || self.hop_budget == 0 || self.context_char_cap == 0 {
            return Err(PipelineError::InvalidConfig(
                "m, hop_budget and context_char_cap must be positive".into(),
            ));
        }
        if self.decoding.temperature < 0.0 {
            return Err(PipelineError::InvalidConfig("temperature must be non-negative".into()));
        }
        self.retrieval.validate()?;
        Ok(())
    }

    /// Sets both the sub-query count and the hop budget.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.m = steps;
        self.hop_budget = steps;
        self
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("{role} call failed: {source}")]
    Backend {
        role: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("trace file {path}: {message}")]
    TraceIo { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EscStop,
    BudgetExhausted,
    ErrorFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub hop_index: usize,
    pub response: StepResponse,
    pub decision: AgentDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<RankedList>,
    pub context_size_after: usize,
}

/// Notable events during a run: fallbacks, retries, truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFlag {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_index: Option<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

pub mod flags {
    pub const PLANNER_RETRY: &str = "planner_retry";
    pub const PLANNER_FALLBACK: &str = "planner_fallback";
    pub const ESC_RETRY: &str = "esc_retry";
    pub const ESC_FALLBACK: &str = "esc_fallback";
    pub const FORMULATOR_RETRY: &str = "formulator_retry";
    pub const FORMULATOR_FALLBACK: &str = "formulator_fallback";
    pub const RERANK_FALLBACK: &str = "rerank_fallback";
    pub const CONTEXT_TRUNCATED: &str = "context_truncated";
}

/// Complete, replayable record of one question's execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub trace_version: u32,
    pub qid: String,
    pub question: String,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<SubQueryPlan>,
    /// One list per planner sub-query, in plan order.
    pub anchor_retrievals: Vec<RankedList>,
    pub anchor_entries: Vec<String>,
    /// Retrieval on the question itself that seeds the chain-only and
    /// interleaved variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_retrieval: Option<RankedList>,
    pub hops: Vec<HopRecord>,
    /// Final evidence context. Append-only, so the context a hop saw is a
    /// prefix of it; see [`RunTrace::context_size_at`].
    pub context: EvidenceContext,
    /// Context size when the first hop ran.
    pub loop_start_context: usize,
    pub final_answer: String,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<TraceFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub completion_transcript: Vec<TranscriptEntry>,
}

impl RunTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_line().as_bytes()))
    }

    /// Number of retrievals issued inside the chain loop.
    pub fn loop_retrievals(&self) -> usize {
        self.hops.iter().filter(|h| h.retrieved.is_some()).count()
    }

    pub fn count_flags(&self, kind: &str) -> usize {
        self.flags.iter().filter(|f| f.kind == kind).count()
    }

    /// Every retrieved chunk id in first-occurrence order.
    pub fn retrieved_chunks(&self) -> &[String] {
        &self.context.entries
    }

    /// Context size in effect when hop `hop_index` (1-based) ran.
    pub fn context_size_at(&self, hop_index: usize) -> usize {
        if hop_index <= 1 {
            self.loop_start_context
        } else {
            self.hops[hop_index - 2].context_size_after
        }
    }
}
