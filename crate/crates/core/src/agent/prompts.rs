use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const EMPTY_CONTEXT: &str = "(no passages retrieved)";

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../assets/prompts/v1/", $name, ".txt")))),*]
    };
}

const BUILTIN_V1: &[(&str, &str)] = builtin![
    "planner.system",
    "planner.user",
    "searcher.system",
    "writer.system",
    "writer.user",
    "writer_cot.system",
    "direct.system",
    "bare.user",
    "esc.system",
    "esc.user",
    "esc_decide.system",
    "formulator.system",
    "formulator.user",
    "ircot.system",
    "ircot.user",
    "judge.system",
    "judge.user",
    "judge.retry",
    "rerank.system",
    "rerank.user",
    "retry.note",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt template asset {0:?} is missing")]
    MissingAsset(String),
    #[error("cannot read prompt asset {path}: {message}")]
    Io { path: String, message: String },
}

/// One retrieved passage as shown to a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub chunk_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedContext {
    pub text: String,
    pub shown: usize,
    pub omitted: usize,
}

impl RenderedContext {
    pub fn truncated(&self) -> bool {
        self.omitted > 0
    }
}

/// Renders passages as numbered blocks headed `[n] <chunk_id> | <title>`.
///
/// Passages are emitted in order until the next block would push the total
/// past `char_cap`; the remainder is dropped and a note records how many.
pub fn render_context(passages: &[Passage], char_cap: usize) -> RenderedContext {
    if passages.is_empty() {
        return RenderedContext {
            text: EMPTY_CONTEXT.to_string(),
            shown: 0,
            omitted: 0,
        };
    }
    let mut text = String::new();
    let mut used = 0usize;
    let mut shown = 0usize;
    for (i, p) in passages.iter().enumerate() {
        let block = format!("[{}] {} | {}\n{}\n", i + 1, p.chunk_id, p.title, p.text);
        let sep = usize::from(shown > 0);
        let block_chars = block.chars().count() + sep;
        if used + block_chars > char_cap {
            break;
        }
        if shown > 0 {
            text.push('\n');
        }
        text.push_str(&block);
        used += block_chars;
        shown += 1;
    }
    let omitted = passages.len() - shown;
    if shown == 0 {
        text.push_str(EMPTY_CONTEXT);
        text.push('\n');
    }
    if omitted > 0 {
        text.push_str(&format!("\n({omitted} further passages omitted: context limit)\n"));
    }
    RenderedContext {
        text: text.trim_end_matches('\n').to_string(),
        shown,
        omitted,
    }
}

/// Substitutes `{name}` placeholders in one pass. Braces that do not enclose a
/// known name are copied through, so JSON examples in templates survive and
/// substituted values are never re-expanded.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn trim_asset(text: &str) -> String {
    text.trim_end_matches('\n').to_string()
}

/// Versioned prompt template set.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    version: String,
    assets: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            version: "v1".into(),
            assets: BUILTIN_V1.iter().map(|(k, v)| (k.to_string(), trim_asset(v))).collect(),
        }
    }

    /// Loads `<name>.txt` for every template name from `dir`.
    pub fn from_dir(dir: &Path, version: &str) -> Result<Self, PromptError> {
        let mut assets = BTreeMap::new();
        for (name, _) in BUILTIN_V1 {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                return Err(PromptError::MissingAsset(name.to_string()));
            }
            let text = fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            assets.insert(name.to_string(), trim_asset(&text));
        }
        Ok(Self {
            version: version.to_string(),
            assets,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn asset(&self, name: &str) -> Result<&str, PromptError> {
        self.assets
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::MissingAsset(name.to_string()))
    }

    fn pair(&self, system: &str, user: &str, values: &[(&str, &str)]) -> Result<(String, String), PromptError> {
        Ok((fill(self.asset(system)?, values), fill(self.asset(user)?, values)))
    }

    pub fn render_planner(&self, question: &str, m: usize) -> Result<(String, String), PromptError> {
        let m = m.to_string();
        self.pair("planner.system", "planner.user", &[("question", question), ("m", &m)])
    }

    pub fn render_writer(&self, question: &str, context: &str) -> Result<(String, String), PromptError> {
        self.pair(
            "writer.system",
            "writer.user",
            &[("question", question), ("context", context)],
        )
    }

    pub fn render_cot(&self, question: &str) -> Result<(String, String), PromptError> {
        self.pair("writer_cot.system", "bare.user", &[("question", question)])
    }

    pub fn render_direct(&self, question: &str) -> Result<(String, String), PromptError> {
        self.pair("direct.system", "bare.user", &[("question", question)])
    }

    pub fn render_esc(&self, question: &str, response: &str, context: &str) -> Result<(String, String), PromptError> {
        self.pair(
            "esc.system",
            "esc.user",
            &[("question", question), ("response", response), ("context", context)],
        )
    }

    /// Controller prompt for the split mode, where the follow-up query comes
    /// from a separate formulator call.
    pub fn render_esc_decide(
        &self,
        question: &str,
        response: &str,
        context: &str,
    ) -> Result<(String, String), PromptError> {
        self.pair(
            "esc_decide.system",
            "esc.user",
            &[("question", question), ("response", response), ("context", context)],
        )
    }

    pub fn render_formulator(
        &self,
        question: &str,
        response: &str,
        esc_message: &str,
        context: &str,
    ) -> Result<(String, String), PromptError> {
        self.pair(
            "formulator.system",
            "formulator.user",
            &[
                ("question", question),
                ("response", response),
                ("message", esc_message),
                ("context", context),
            ],
        )
    }

    pub fn render_ircot(
        &self,
        question: &str,
        context: &str,
        reasoning: &str,
    ) -> Result<(String, String), PromptError> {
        let reasoning = if reasoning.is_empty() { "(none yet)" } else { reasoning };
        self.pair(
            "ircot.system",
            "ircot.user",
            &[("question", question), ("context", context), ("reasoning", reasoning)],
        )
    }

    pub fn render_judge(&self, question: &str, predicted: &str, gold: &str) -> Result<(String, String), PromptError> {
        self.pair(
            "judge.system",
            "judge.user",
            &[("query", question), ("response", predicted), ("answer", gold)],
        )
    }

    /// Appends the re-ask note used when a reply could not be parsed.
    pub fn with_retry_note(&self, user_prompt: &str, error: &str) -> Result<String, PromptError> {
        Ok(format!(
            "{user_prompt}{}",
            fill(self.asset("retry.note")?, &[("error", error)])
        ))
    }

    /// Appends the re-ask note used when a judge reply lacks a decision line.
    pub fn with_judge_retry_note(&self, user_prompt: &str) -> Result<String, PromptError> {
        Ok(format!("{user_prompt}{}", self.asset("judge.retry")?))
    }

    pub fn render_rerank(&self, query: &str, passage: &str) -> Result<(String, String), PromptError> {
        self.pair(
            "rerank.system",
            "rerank.user",
            &[("query", query), ("passage", passage)],
        )
    }
}
