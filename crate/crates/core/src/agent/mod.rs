//! Completion backends, prompt templates and structured-output parsing for
//! the planner, writer, sufficiency controller, query formulator and judge.
//!
//! The searcher role needs no model call: retrieved passages are rendered
//! verbatim by [`render_context`].

mod backend;
mod parse;
mod prompts;
mod remote;
mod scripted;

pub use backend::{
    Backend, BackendError, CachedBackend, CompletionRequest, CompletionResult, Decoding, RecordingBackend, RoleTag,
    TranscriptEntry, Usage,
};
pub use parse::{
    extract_first_object, parse_esc_action, parse_esc_output, parse_formulator_output, parse_judge_decision,
    parse_planner_output, parse_writer_output, Action, AgentDecision, ParseError, PlannedSearch, StepResponse,
    SubQueryPlan,
};
pub use prompts::{render_context, Passage, PromptError, PromptTemplates, RenderedContext, EMPTY_CONTEXT};
pub use remote::{RemoteBackend, RemoteConfig, API_KEY_ENV};
pub use scripted::{ReplayBackend, ScriptedBackend};
