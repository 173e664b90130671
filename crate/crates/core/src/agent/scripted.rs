use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::backend::{Backend, BackendError, CompletionRequest, CompletionResult, RoleTag, TranscriptEntry};

/// Returns pre-programmed responses, one queue per role. Single consumer:
/// feed one trace at a time.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queues: Mutex<HashMap<RoleTag, VecDeque<String>>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, role: RoleTag, text: impl Into<String>) -> &Self {
        self.queues
            .lock()
            .expect("script lock")
            .entry(role)
            .or_default()
            .push_back(text.into());
        self
    }

    pub fn with(self, role: RoleTag, texts: &[&str]) -> Self {
        for t in texts {
            self.push(role, *t);
        }
        self
    }

    pub fn remaining(&self, role: RoleTag) -> usize {
        self.queues
            .lock()
            .expect("script lock")
            .get(&role)
            .map_or(0, VecDeque::len)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.queues
            .lock()
            .expect("script lock")
            .get_mut(&req.role_tag)
            .and_then(VecDeque::pop_front)
            .map(CompletionResult::text)
            .ok_or(BackendError::Exhausted(req.role_tag.as_str()))
    }

    fn id(&self) -> String {
        "scripted".into()
    }
}

/// Replays a recorded transcript in order, checking that each request has
/// the recorded digest.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: Mutex<(usize, VecDeque<TranscriptEntry>)>,
}

impl ReplayBackend {
    pub fn new(transcript: &[TranscriptEntry]) -> Self {
        Self {
            entries: Mutex::new((0, transcript.iter().cloned().collect())),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("replay lock").1.len()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let mut guard = self.entries.lock().expect("replay lock");
        let (index, queue) = &mut *guard;
        let entry = queue
            .pop_front()
            .ok_or(BackendError::Exhausted(req.role_tag.as_str()))?;
        let got = req.digest();
        if entry.digest != got {
            return Err(BackendError::ReplayMismatch {
                index: *index,
                expected: entry.digest,
                got,
            });
        }
        *index += 1;
        match (entry.result, entry.error) {
            (Some(result), _) => Ok(result),
            (None, Some(err)) => Err(BackendError::Recorded(err)),
            (None, None) => Err(BackendError::Recorded("empty transcript entry".into())),
        }
    }

    fn id(&self) -> String {
        "replay".into()
    }
}
