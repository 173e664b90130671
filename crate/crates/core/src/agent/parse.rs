//! Parsers for model output. None of them panic; every failure is a
//! [`ParseError`].

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in output")]
    NoObject,
    #[error("output object lacks field {0:?}")]
    MissingField(&'static str),
    #[error("plan contains no usable searches")]
    EmptyPlan,
    #[error("unknown action {0:?}")]
    InvalidAction(String),
    #[error("CONTINUE decision without next_query")]
    ContinueWithoutQuery,
    #[error("empty query")]
    EmptyQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSearch {
    pub reason: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQueryPlan {
    pub searches: Vec<PlannedSearch>,
}

impl SubQueryPlan {
    /// The single-query plan used when planning fails.
    pub fn fallback(question: &str) -> Self {
        Self {
            searches: vec![PlannedSearch {
                reason: "fallback: original question".into(),
                query: question.to_string(),
            }],
        }
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.searches.iter().map(|s| s.query.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Continue,
    Stop,
}

/// Controller output. `next_query` is present exactly when `action` is `Continue`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_query: Option<String>,
    pub message: String,
}

impl AgentDecision {
    pub fn stop(message: impl Into<String>) -> Self {
        Self {
            action: Action::Stop,
            next_query: None,
            message: message.into(),
        }
    }

    pub fn proceed(next_query: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            action: Action::Continue,
            next_query: Some(next_query.into()),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResponse {
    pub text: String,
    pub hop_index: usize,
}

/// Byte range of the balanced `{...}` starting at `start`, honoring JSON
/// string quoting.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` span in `text` that parses as a JSON object.
/// Surrounding prose and code fences are ignored.
pub fn extract_first_object(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(off) = text[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
                return Some(map);
            }
        }
        from = start + 1;
    }
    None
}

fn get_ci<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key)
        .or_else(|| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
        .filter(|v| !v.is_null())
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    get_ci(obj, key).and_then(Value::as_str).map(str::trim)
}

/// Reads `{"searches": [{"reason", "query"}, ...]}` and keeps the first `m`
/// searches with a non-empty query.
pub fn parse_planner_output(text: &str, m: usize) -> Result<SubQueryPlan, ParseError> {
    let obj = extract_first_object(text).ok_or(ParseError::NoObject)?;
    let list = get_ci(&obj, "searches")
        .and_then(Value::as_array)
        .ok_or(ParseError::MissingField("searches"))?;
    let searches: Vec<PlannedSearch> = list
        .iter()
        .filter_map(|entry| match entry {
            Value::Object(e) => Some(PlannedSearch {
                reason: get_str(e, "reason").unwrap_or_default().to_string(),
                query: get_str(e, "query")?.to_string(),
            }),
            Value::String(q) => Some(PlannedSearch {
                reason: String::new(),
                query: q.trim().to_string(),
            }),
            _ => None,
        })
        .filter(|s| !s.query.is_empty())
        .take(m)
        .collect();
    if searches.is_empty() {
        return Err(ParseError::EmptyPlan);
    }
    Ok(SubQueryPlan { searches })
}

fn parse_action(obj: &Map<String, Value>) -> Result<Action, ParseError> {
    let raw = get_str(obj, "action").ok_or(ParseError::MissingField("action"))?;
    match raw.to_ascii_uppercase().as_str() {
        "CONTINUE" => Ok(Action::Continue),
        "STOP" => Ok(Action::Stop),
        _ => Err(ParseError::InvalidAction(raw.to_string())),
    }
}

/// Reads `{"action", "next_query"?, "message"?}`; action is case-insensitive.
pub fn parse_esc_output(text: &str) -> Result<AgentDecision, ParseError> {
    let obj = extract_first_object(text).ok_or(ParseError::NoObject)?;
    let action = parse_action(&obj)?;
    let message = get_str(&obj, "message").unwrap_or_default().to_string();
    match action {
        Action::Stop => Ok(AgentDecision::stop(message)),
        Action::Continue => {
            let q = get_str(&obj, "next_query")
                .filter(|q| !q.is_empty())
                .ok_or(ParseError::ContinueWithoutQuery)?;
            Ok(AgentDecision::proceed(q, message))
        }
    }
}

/// Controller output when the follow-up query comes from a separate
/// formulator call: only the action and message are read.
pub fn parse_esc_action(text: &str) -> Result<(Action, String), ParseError> {
    let obj = extract_first_object(text).ok_or(ParseError::NoObject)?;
    let action = parse_action(&obj)?;
    Ok((action, get_str(&obj, "message").unwrap_or_default().to_string()))
}

/// Reads `{"query"}` (or `next_query`); falls back to the first non-empty line.
pub fn parse_formulator_output(text: &str) -> Result<String, ParseError> {
    if let Some(obj) = extract_first_object(text) {
        return get_str(&obj, "query")
            .or_else(|| get_str(&obj, "next_query"))
            .filter(|q| !q.is_empty())
            .map(str::to_string)
            .ok_or(ParseError::EmptyQuery);
    }
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_string)
        .ok_or(ParseError::EmptyQuery)
}

/// Reads `{"answer"}`. Without a usable object the whole trimmed text is the answer.
pub fn parse_writer_output(text: &str, hop_index: usize) -> StepResponse {
    let answer = extract_first_object(text)
        .and_then(|obj| {
            get_ci(&obj, "answer").map(|v| match v {
                Value::String(s) => s.trim().to_string(),
                other => other.to_string(),
            })
        })
        .unwrap_or_else(|| text.trim().to_string());
    StepResponse {
        text: answer,
        hop_index,
    }
}

/// Finds the last `Decision:` line; `Some(true)` iff it contains "yes"
/// (case-insensitive), `None` when there is no such line.
pub fn parse_judge_decision(text: &str) -> Option<bool> {
    text.lines().rev().find_map(|line| {
        let l = line
            .trim()
            .trim_start_matches(['*', '#', '-', ' '])
            .to_ascii_lowercase();
        let rest = l.strip_prefix("decision")?;
        let rest = rest.trim_start_matches(['*', ' ']).strip_prefix(':')?;
        Some(rest.contains("yes"))
    })
}
