use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Planner,
    Writer,
    Esc,
    Formulator,
    Judge,
    Reranker,
}

impl RoleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Planner => "planner",
            RoleTag::Writer => "writer",
            RoleTag::Esc => "esc",
            RoleTag::Formulator => "formulator",
            RoleTag::Judge => "judge",
            RoleTag::Reranker => "reranker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role_tag: RoleTag,
    /// Name of the prompt template that produced the prompts.
    pub template: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub model_id: String,
    pub decoding: Decoding,
}

impl CompletionRequest {
    pub fn new(
        role_tag: RoleTag,
        template: &str,
        system_prompt: String,
        user_prompt: String,
        model_id: &str,
        decoding: Decoding,
    ) -> Self {
        Self {
            role_tag,
            template: template.to_string(),
            system_prompt,
            user_prompt,
            model_id: model_id.to_string(),
            decoding,
        }
    }

    /// Lowercase hex SHA-256 of the canonical JSON encoding (fields in
    /// declaration order, no whitespace).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: f64,
}

impl CompletionResult {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
            latency_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("scripted backend has no response left for role {0}")]
    Exhausted(&'static str),
    #[error("replay diverged at call {index}: expected digest {expected}, got {got}")]
    ReplayMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("{0}")]
    Recorded(String),
    #[error("cache error: {0}")]
    Cache(String),
}

/// A completion backend. Implementations must tolerate concurrent callers.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    /// Identifier recorded in run manifests. Must not contain secrets.
    fn id(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }

    fn id(&self) -> String {
        (**self).id()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }

    fn id(&self) -> String {
        (**self).id()
    }
}

/// One completion call as seen by a run: the request digest plus either the
/// result or the error text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role_tag: RoleTag,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CompletionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wraps a backend and logs every call in order.
pub struct RecordingBackend<'a> {
    inner: &'a dyn Backend,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn into_transcript(self) -> Vec<TranscriptEntry> {
        self.log.into_inner().expect("transcript lock")
    }
}

impl Backend for RecordingBackend<'_> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let out = self.inner.complete(req);
        let entry = TranscriptEntry {
            role_tag: req.role_tag,
            digest: req.digest(),
            result: out.as_ref().ok().cloned(),
            error: out.as_ref().err().map(ToString::to_string),
        };
        self.log.lock().expect("transcript lock").push(entry);
        out
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

/// Response cache keyed by request digest, held in memory and optionally
/// mirrored to a directory of `<digest>.json` files.
pub struct CachedBackend<B> {
    inner: B,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CompletionResult>>,
    upstream_calls: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn in_memory(inner: B) -> Self {
        Self {
            inner,
            dir: None,
            memory: Mutex::new(HashMap::new()),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn on_disk(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::in_memory(inner)
        })
    }

    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    fn disk_get(&self, digest: &str) -> Option<CompletionResult> {
        let path = self.dir.as_ref()?.join(format!("{digest}.json"));
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn disk_put(&self, digest: &str, result: &CompletionResult) -> Result<(), BackendError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let tmp = dir.join(format!("{digest}.json.tmp"));
        let bytes = serde_json::to_vec(result).expect("result serializes");
        fs::write(&tmp, bytes).map_err(|e| BackendError::Cache(e.to_string()))?;
        fs::rename(&tmp, dir.join(format!("{digest}.json"))).map_err(|e| BackendError::Cache(e.to_string()))
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let digest = req.digest();
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&digest) {
            return Ok(hit.clone());
        }
        if let Some(hit) = self.disk_get(&digest) {
            self.memory.lock().expect("cache lock").insert(digest, hit.clone());
            return Ok(hit);
        }
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        let result = self.inner.complete(req)?;
        self.disk_put(&digest, &result)?;
        self.memory.lock().expect("cache lock").insert(digest, result.clone());
        Ok(result)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ScriptedBackend;

    fn req(user: &str) -> CompletionRequest {
        CompletionRequest::new(
            RoleTag::Planner,
            "planner",
            "sys".into(),
            user.into(),
            "m",
            Decoding::default(),
        )
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        assert_eq!(req("a").digest(), req("a").digest());
        assert_ne!(req("a").digest(), req("b").digest());
        assert_eq!(req("a").digest().len(), 64);
        assert!(req("a")
            .digest()
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn cache_hit_skips_upstream() {
        let scripted = ScriptedBackend::new();
        scripted.push(RoleTag::Planner, "first");
        scripted.push(RoleTag::Planner, "second");
        let cached = CachedBackend::in_memory(scripted);
        let a = cached.complete(&req("x")).unwrap();
        let b = cached.complete(&req("x")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "first");
        assert_eq!(cached.upstream_calls(), 1);
    }

    #[test]
    fn disk_cache_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = ScriptedBackend::new();
            s.push(RoleTag::Planner, "stored");
            let cached = CachedBackend::on_disk(s, dir.path()).unwrap();
            cached.complete(&req("x")).unwrap();
        }
        let cached = CachedBackend::on_disk(ScriptedBackend::new(), dir.path()).unwrap();
        assert_eq!(cached.complete(&req("x")).unwrap().text, "stored");
        assert_eq!(cached.upstream_calls(), 0);
    }

    #[test]
    fn recording_logs_errors_too() {
        let s = ScriptedBackend::new();
        s.push(RoleTag::Planner, "ok");
        let rec = RecordingBackend::new(&s);
        rec.complete(&req("1")).unwrap();
        assert!(rec.complete(&req("2")).is_err());
        let t = rec.into_transcript();
        assert_eq!(t.len(), 2);
        assert!(t[0].result.is_some());
        assert!(t[1].error.is_some());
    }
}
