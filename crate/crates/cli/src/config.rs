//! TOML run configuration, layered under command-line overrides.
//!
//! ```toml
//! [pipeline]
//! variant = "anchor_chain"
//! m = 5
//! hop_budget = 5
//!
//! [pipeline.retrieval]
//! final_k = 5
//!
//! [backend]
//! kind = "oracle"            # or "remote"
//! truth = "synth/truth.jsonl"
//! judge = "exact"            # or "oracle", "remote"
//!
//! [remote]
//! base_url = "https://api.openai.com/v1"
//!
//! [run]
//! parallelism = 4
//! ```
//!
//! The API key is read from the environment only and never appears here.

use std::fs;
use std::path::{Path, PathBuf};

use anchorchain_core::agent::RemoteConfig;
use anchorchain_core::{ChunkingConfig, PipelineConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic agents answering from a synthetic truth file.
    #[default]
    Oracle,
    /// OpenAI-compatible chat-completion endpoint.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Exact,
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    /// Lexical IDF-coverage scorer.
    #[default]
    Coverage,
    /// Relevance scores from the completion backend.
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub truth: Option<PathBuf>,
    /// Directory for the on-disk completion cache.
    pub cache_dir: Option<PathBuf>,
    pub judge: JudgeKind,
    pub judge_model_id: Option<String>,
    pub reranker: RerankerKind,
    /// Prompt asset root; the built-in set is used when absent.
    pub prompts_dir: Option<PathBuf>,
    pub prompts_version: String,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            truth: None,
            cache_dir: None,
            judge: JudgeKind::Exact,
            judge_model_id: None,
            reranker: RerankerKind::Coverage,
            prompts_dir: None,
            prompts_version: "v1".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub parallelism: usize,
    pub resume: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            parallelism: 1,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub chunking: ChunkingConfig,
    pub backend: BackendSettings,
    pub remote: RemoteConfig,
    pub run: RunSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| Failure::Usage(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.pipeline.validate().map_err(Failure::from)?;
        self.chunking.validate().map_err(Failure::from)?;
        if self.run.parallelism == 0 {
            return Err(Failure::Usage("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Variant and budget flags for a single run. Ablations set these per cell.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ShapeOverrides {
    /// Pipeline variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Sets both the sub-query count and the hop budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sub-query count; applied after --steps.
    #[arg(long)]
    pub m: Option<usize>,
    /// Hop budget; applied after --steps.
    #[arg(long)]
    pub hop_budget: Option<usize>,
}

impl ShapeOverrides {
    pub fn apply(&self, cfg: &mut FileConfig) {
        let p = &mut cfg.pipeline;
        if let Some(v) = self.variant {
            p.variant = v;
        }
        if let Some(n) = self.steps {
            *p = p.clone().with_steps(n);
        }
        if let Some(m) = self.m {
            p.m = m;
        }
        if let Some(h) = self.hop_budget {
            p.hop_budget = h;
        }
    }
}

/// Command-line values that override the config file when present.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub final_k: Option<usize>,
    #[arg(long)]
    pub candidate_k: Option<usize>,
    /// Model for every role.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Synthetic truth file for the oracle backend and judge.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub reranker: Option<RerankerKind>,
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Keep finished traces from an earlier run and execute only the rest.
    #[arg(long)]
    pub resume: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut FileConfig) {
        let p = &mut cfg.pipeline;
        if let Some(k) = self.final_k {
            p.retrieval.final_k = k;
        }
        if let Some(k) = self.candidate_k {
            p.retrieval.candidate_k = k;
        }
        if let Some(model) = &self.model {
            p.model_id = model.clone();
            p.controller_model_id = model.clone();
        }
        let b = &mut cfg.backend;
        if let Some(kind) = self.backend {
            b.kind = kind;
        }
        if let Some(t) = &self.truth {
            b.truth = Some(t.clone());
        }
        if let Some(d) = &self.cache_dir {
            b.cache_dir = Some(d.clone());
        }
        if let Some(r) = self.reranker {
            b.reranker = r;
        }
        if let Some(d) = &self.prompts_dir {
            b.prompts_dir = Some(d.clone());
        }
        if let Some(n) = self.parallelism {
            cfg.run.parallelism = n;
        }
        if self.resume {
            cfg.run.resume = true;
        }
    }
}
