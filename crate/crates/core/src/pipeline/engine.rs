use std::sync::Arc;

use crate::agent::{
    parse_esc_action, parse_esc_output, parse_formulator_output, parse_planner_output, parse_writer_output,
    render_context, Action, AgentDecision, Backend, BackendError, CompletionRequest, ParseError, Passage,
    PromptTemplates, RecordingBackend, RenderedContext, ReplayBackend, RoleTag, StepResponse, SubQueryPlan,
};
use crate::retrieval::{EvidenceContext, RankedList, RetrievalError, Retriever, Stage};

use super::{flags, HopRecord, PipelineConfig, PipelineError, RunTrace, StopReason, TraceFlag, Variant, TRACE_VERSION};

/// Marker that ends an interleaved reasoning chain.
pub const ANSWER_MARKER: &str = "so the answer is:";

pub struct Pipeline {
    retriever: Arc<Retriever>,
    prompts: PromptTemplates,
    config: PipelineConfig,
}

enum CallFailure {
    Backend(BackendError),
    Parse(ParseError),
}

impl std::fmt::Display for CallFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CallFailure::Backend(e) => write!(f, "backend: {e}"),
            CallFailure::Parse(e) => write!(f, "parse: {e}"),
        }
    }
}

/// Per-query mutable state. Only `run_query` constructs it.
struct Run<'a> {
    p: &'a Pipeline,
    backend: RecordingBackend<'a>,
    question: String,
    context: EvidenceContext,
    trace: RunTrace,
}

impl Pipeline {
    pub fn new(
        retriever: Arc<Retriever>,
        prompts: PromptTemplates,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            retriever,
            prompts,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn retriever(&self) -> &Arc<Retriever> {
        &self.retriever
    }

    pub fn prompts(&self) -> &PromptTemplates {
        &self.prompts
    }

    /// Runs one question. Never fails: errors end the run early and are
    /// recorded in the trace with `stop_reason = error_fallback`.
    pub fn run_query(&self, backend: &dyn Backend, qid: &str, question: &str) -> RunTrace {
        let mut run = Run {
            p: self,
            backend: RecordingBackend::new(backend),
            question: question.to_string(),
            context: EvidenceContext::new(),
            trace: RunTrace {
                trace_version: TRACE_VERSION,
                qid: qid.to_string(),
                question: question.to_string(),
                variant: self.config.variant,
                plan: None,
                anchor_retrievals: Vec::new(),
                anchor_entries: Vec::new(),
                initial_retrieval: None,
                hops: Vec::new(),
                context: EvidenceContext::new(),
                loop_start_context: 0,
                final_answer: String::new(),
                stop_reason: StopReason::BudgetExhausted,
                flags: Vec::new(),
                error: None,
                completion_transcript: Vec::new(),
            },
        };
        if let Err(e) = run.dispatch() {
            log::warn!("query {qid} aborted: {e}");
            run.trace.error = Some(e.to_string());
            run.trace.stop_reason = StopReason::ErrorFallback;
        }
        run.finish()
    }

    /// Re-executes a trace against its own recorded completions.
    pub fn replay(&self, trace: &RunTrace) -> RunTrace {
        let backend = ReplayBackend::new(&trace.completion_transcript);
        self.run_query(&backend, &trace.qid, &trace.question)
    }
}

impl<'a> Run<'a> {
    fn cfg(&self) -> &'a PipelineConfig {
        &self.p.config
    }

    fn finish(mut self) -> RunTrace {
        self.trace.final_answer = self
            .trace
            .hops
            .last()
            .map(|h| h.response.text.clone())
            .unwrap_or_default();
        self.trace.context = self.context;
        self.trace.completion_transcript = self.backend.into_transcript();
        self.trace
    }

    fn flag(&mut self, kind: &str, hop_index: Option<usize>, detail: impl Into<String>) {
        self.trace.flags.push(TraceFlag {
            kind: kind.to_string(),
            hop_index,
            detail: detail.into(),
        });
    }

    fn dispatch(&mut self) -> Result<(), PipelineError> {
        let question = self.question.clone();
        match self.cfg().variant {
            Variant::AnchorChain => {
                self.coverage_anchor()?;
                self.iterative_chain()
            }
            Variant::CoverageAnchorOnly => {
                self.coverage_anchor()?;
                self.single_pass(Variant::CoverageAnchorOnly)
            }
            Variant::IterativeChainOnly => {
                let list = self.retrieve(&question, 0)?;
                self.context.merge_dedup(&list, Stage::Hop, 0, &question);
                self.trace.initial_retrieval = Some(list);
                self.iterative_chain()
            }
            Variant::InterleavedIrcotStyle => {
                let list = self.retrieve(&question, 0)?;
                self.context.merge_dedup(&list, Stage::Hop, 0, &question);
                self.trace.initial_retrieval = Some(list);
                self.interleaved()
            }
            v @ (Variant::CotNoRetrieval | Variant::Direct) => self.single_pass(v),
        }
    }

    fn request(&self, role: RoleTag, template: &str, system: String, user: String) -> CompletionRequest {
        let model = match role {
            RoleTag::Esc | RoleTag::Formulator => &self.cfg().controller_model_id,
            _ => &self.cfg().model_id,
        };
        CompletionRequest::new(role, template, system, user, model, self.cfg().decoding)
    }

    /// One completion plus parse; a parse failure is re-asked once with a
    /// note appended to the user prompt.
    fn call_parsed<T>(
        &mut self,
        role: RoleTag,
        template: &str,
        (system, user): (String, String),
        retry_flag: &str,
        hop_index: Option<usize>,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<Result<T, CallFailure>, PipelineError> {
        let req = self.request(role, template, system.clone(), user.clone());
        let first = match self.backend.complete(&req) {
            Ok(r) => r,
            Err(e) => return Ok(Err(CallFailure::Backend(e))),
        };
        let err = match parse(&first.text) {
            Ok(v) => return Ok(Ok(v)),
            Err(e) => e,
        };
        self.flag(retry_flag, hop_index, err.to_string());
        let user = self.p.prompts.with_retry_note(&user, &err.to_string())?;
        let req = self.request(role, template, system, user);
        Ok(match self.backend.complete(&req) {
            Ok(r) => parse(&r.text).map_err(CallFailure::Parse),
            Err(e) => Err(CallFailure::Backend(e)),
        })
    }

    fn retrieve(&mut self, query: &str, hop_index: usize) -> Result<RankedList, PipelineError> {
        let retrieval = &self.cfg().retrieval;
        match self.p.retriever.retrieve(query, retrieval) {
            Ok(list) => Ok(list),
            Err(RetrievalError::Rerank { message, candidates }) => {
                self.flag(flags::RERANK_FALLBACK, Some(hop_index), message);
                let scored = candidates.entries.into_iter().map(|e| (e.chunk_id, e.score)).collect();
                Ok(RankedList::from_scores(query, scored, retrieval.final_k))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn render(&mut self, hop_index: usize) -> RenderedContext {
        let store = self.p.retriever.store();
        let passages: Vec<Passage> = self
            .context
            .entries
            .iter()
            .filter_map(|id| store.get_chunk(id).ok())
            .map(|c| Passage {
                chunk_id: c.chunk_id.clone(),
                title: c.title.clone(),
                text: c.text.clone(),
            })
            .collect();
        let rendered = render_context(&passages, self.cfg().context_char_cap);
        if rendered.truncated() {
            let detail = format!("{} of {} passages omitted", rendered.omitted, passages.len());
            self.flag(flags::CONTEXT_TRUNCATED, Some(hop_index), detail);
        }
        rendered
    }

    fn coverage_anchor(&mut self) -> Result<(), PipelineError> {
        let m = self.cfg().m;
        let prompts = self.p.prompts.render_planner(&self.question, m)?;
        let plan = match self.call_parsed(RoleTag::Planner, "planner", prompts, flags::PLANNER_RETRY, None, |t| {
            parse_planner_output(t, m)
        })? {
            Ok(plan) => plan,
            Err(failure) => {
                self.flag(flags::PLANNER_FALLBACK, None, failure.to_string());
                SubQueryPlan::fallback(&self.question)
            }
        };
        for query in plan.queries() {
            let list = self.retrieve(query, 0)?;
            self.context.merge_dedup(&list, Stage::Anchor, 0, query);
            self.trace.anchor_retrievals.push(list);
        }
        self.trace.anchor_entries = self.context.entries.clone();
        self.trace.plan = Some(plan);
        Ok(())
    }

    fn write(&mut self, hop_index: usize, context: &str) -> Result<StepResponse, PipelineError> {
        let prompts = self.p.prompts.render_writer(&self.question, context)?;
        let (system, user) = prompts;
        let req = self.request(RoleTag::Writer, "writer", system, user);
        let out = self
            .backend
            .complete(&req)
            .map_err(|source| PipelineError::Backend { role: "writer", source })?;
        Ok(parse_writer_output(&out.text, hop_index))
    }

    /// Controller decision for one hop, and whether it is a fallback.
    fn decide(
        &mut self,
        hop_index: usize,
        response: &str,
        context: &str,
    ) -> Result<(AgentDecision, bool), PipelineError> {
        let hop = Some(hop_index);
        if !self.cfg().separate_formulator {
            let prompts = self.p.prompts.render_esc(&self.question, response, context)?;
            return Ok(
                match self.call_parsed(RoleTag::Esc, "esc", prompts, flags::ESC_RETRY, hop, parse_esc_output)? {
                    Ok(d) => (d, false),
                    Err(failure) => {
                        self.flag(flags::ESC_FALLBACK, hop, failure.to_string());
                        (AgentDecision::stop(format!("controller fallback ({failure})")), true)
                    }
                },
            );
        }
        let prompts = self.p.prompts.render_esc_decide(&self.question, response, context)?;
        let (action, message) = match self.call_parsed(
            RoleTag::Esc,
            "esc_decide",
            prompts,
            flags::ESC_RETRY,
            hop,
            parse_esc_action,
        )? {
            Ok(v) => v,
            Err(failure) => {
                self.flag(flags::ESC_FALLBACK, hop, failure.to_string());
                return Ok((AgentDecision::stop(format!("controller fallback ({failure})")), true));
            }
        };
        if action == Action::Stop {
            return Ok((AgentDecision::stop(message), false));
        }
        let prompts = self
            .p
            .prompts
            .render_formulator(&self.question, response, &message, context)?;
        Ok(
            match self.call_parsed(
                RoleTag::Formulator,
                "formulator",
                prompts,
                flags::FORMULATOR_RETRY,
                hop,
                parse_formulator_output,
            )? {
                Ok(query) => (AgentDecision::proceed(query, message), false),
                Err(failure) => {
                    self.flag(flags::FORMULATOR_FALLBACK, hop, failure.to_string());
                    (AgentDecision::stop(format!("formulator fallback ({failure})")), true)
                }
            },
        )
    }

    fn iterative_chain(&mut self) -> Result<(), PipelineError> {
        let budget = self.cfg().hop_budget;
        self.trace.loop_start_context = self.context.len();
        self.trace.stop_reason = StopReason::BudgetExhausted;
        for t in 1..=budget {
            let rendered = self.render(t);
            let response = self.write(t, &rendered.text)?;
            let (decision, fallback) = self.decide(t, &response.text, &rendered.text)?;
            let retrieved = match (&decision.action, &decision.next_query) {
                (Action::Continue, Some(query)) => {
                    let list = self.retrieve(query, t)?;
                    self.context.merge_dedup(&list, Stage::Hop, t, query);
                    Some(list)
                }
                _ => None,
            };
            let stop = retrieved.is_none();
            self.trace.hops.push(HopRecord {
                hop_index: t,
                response,
                decision,
                retrieved,
                context_size_after: self.context.len(),
            });
            if stop {
                self.trace.stop_reason = if fallback {
                    StopReason::ErrorFallback
                } else {
                    StopReason::EscStop
                };
                break;
            }
        }
        Ok(())
    }

    /// One writer call with no controller.
    fn single_pass(&mut self, variant: Variant) -> Result<(), PipelineError> {
        self.trace.loop_start_context = self.context.len();
        let response = match variant {
            Variant::CoverageAnchorOnly => {
                let rendered = self.render(1);
                self.write(1, &rendered.text)?
            }
            _ => {
                let (template, (system, user)) = if variant == Variant::Direct {
                    ("direct", self.p.prompts.render_direct(&self.question)?)
                } else {
                    ("writer_cot", self.p.prompts.render_cot(&self.question)?)
                };
                let req = self.request(RoleTag::Writer, template, system, user);
                let out = self
                    .backend
                    .complete(&req)
                    .map_err(|source| PipelineError::Backend { role: "writer", source })?;
                parse_writer_output(&out.text, 1)
            }
        };
        self.trace.hops.push(HopRecord {
            hop_index: 1,
            response,
            decision: AgentDecision::stop("single pass"),
            retrieved: None,
            context_size_after: self.context.len(),
        });
        self.trace.stop_reason = StopReason::BudgetExhausted;
        Ok(())
    }

    /// Alternates one reasoning sentence with a retrieval on that sentence
    /// until the answer marker appears or the budget runs out.
    fn interleaved(&mut self) -> Result<(), PipelineError> {
        let budget = self.cfg().hop_budget;
        self.trace.loop_start_context = self.context.len();
        self.trace.stop_reason = StopReason::BudgetExhausted;
        let mut reasoning: Vec<String> = Vec::new();
        for t in 1..=budget {
            let rendered = self.render(t);
            let (system, user) = self
                .p
                .prompts
                .render_ircot(&self.question, &rendered.text, &reasoning.join("\n"))?;
            let req = self.request(RoleTag::Writer, "ircot", system, user);
            let out = self
                .backend
                .complete(&req)
                .map_err(|source| PipelineError::Backend { role: "writer", source })?;
            if let Some(answer) = answer_after_marker(&out.text) {
                self.trace.hops.push(HopRecord {
                    hop_index: t,
                    response: StepResponse {
                        text: answer,
                        hop_index: t,
                    },
                    decision: AgentDecision::stop("answer marker"),
                    retrieved: None,
                    context_size_after: self.context.len(),
                });
                self.trace.stop_reason = StopReason::EscStop;
                break;
            }
            let sentence = out
                .text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .unwrap_or("")
                .to_string();
            let query = if sentence.is_empty() {
                self.question.clone()
            } else {
                sentence.clone()
            };
            let list = self.retrieve(&query, t)?;
            self.context.merge_dedup(&list, Stage::Hop, t, &query);
            reasoning.push(sentence.clone());
            self.trace.hops.push(HopRecord {
                hop_index: t,
                response: StepResponse {
                    text: sentence,
                    hop_index: t,
                },
                decision: AgentDecision::proceed(query, "reasoning step"),
                retrieved: Some(list),
                context_size_after: self.context.len(),
            });
        }
        Ok(())
    }
}

/// Text following the answer marker on its line, matched case-insensitively.
pub fn answer_after_marker(text: &str) -> Option<String> {
    text.lines().find_map(|line| {
        let lower = line.to_lowercase();
        let at = lower.find(ANSWER_MARKER)?;
        // Lowercasing can shift byte offsets for non-ASCII text; fall back to
        // the whole line tail in that case.
        let tail = line.get(at + ANSWER_MARKER.len()..).unwrap_or(line);
        Some(tail.trim().trim_end_matches('.').trim().to_string())
    })
}
