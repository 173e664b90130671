//! Failure classes and their process exit codes.

use std::fmt;

use anchorchain_core::corpus::CorpusError;
use anchorchain_core::experiment::ExperimentError;
use anchorchain_core::metrics::MetricsError;
use anchorchain_core::pipeline::PipelineError;
use anchorchain_core::retrieval::RetrievalError;
use anchorchain_core::synthetic::SynthError;
use anchorchain_core::BackendError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Bad flags, config values or config file syntax.
    Usage(String),
    /// Unreadable or malformed inputs and artifacts.
    Data(String),
    /// Completion backend unavailable or failing.
    Backend(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Failure::Data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Backend(m) => write!(f, "backend error: {m}"),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            PipelineError::Backend { .. } => Failure::Backend(e.to_string()),
            PipelineError::Retrieval(r) => r.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Backend(_) => Failure::Backend(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Pipeline(p) => p.into(),
            ExperimentError::Metrics(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}
