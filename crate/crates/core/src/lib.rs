//! Two-stage multi-hop retrieval and reasoning engine.
//!
//! A planner first fans a question out into sub-queries whose retrieved
//! passages form an anchored evidence context (coverage stage). A writer then
//! answers over that context hop by hop while a sufficiency controller decides
//! whether to stop or to retrieve more with a reformulated query (chain
//! stage). Baselines, ranking metrics and a synthetic benchmark with oracle
//! agents are included for evaluation.

pub mod agent;
pub mod corpus;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;

pub use agent::{
    Backend, BackendError, CompletionRequest, CompletionResult, PromptTemplates, RoleTag, ScriptedBackend,
};
pub use corpus::{Chunk, ChunkingConfig, CorpusStore, QaRecord, SourceDocument};
pub use pipeline::{Pipeline, PipelineConfig, RunTrace, StopReason, Variant};
pub use retrieval::{EvidenceContext, RankedList, RetrievalConfig, Retriever};
