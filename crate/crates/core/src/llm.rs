//! Chat-completion contract with an HTTP client and a scripted playbook mock.

use std::fs;
use std::path::Path;
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{HttpEndpoint, HttpError};
use crate::render;
use crate::retrieval::KnowledgeItem;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm transport failure: {0}")]
    Transport(String),
    #[error("llm response malformed: {0}")]
    Response(String),
    #[error("playbook has no unconsumed entry matching message: {0:?}")]
    ScriptExhausted(String),
    #[error("playbook line {line}: {message}")]
    Playbook { line: usize, message: String },
    #[error("judge reply has no integer score: {0:?}")]
    JudgeFormat(String),
}

impl From<HttpError> for LlmError {
    fn from(e: HttpError) -> Self {
        if e.is_retryable() {
            LlmError::Transport(e.to_string())
        } else {
            LlmError::Response(e.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(c: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: c.into(),
        }
    }
    pub fn user(c: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: c.into(),
        }
    }
    pub fn assistant(c: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: c.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(rename = "stop")]
    pub stop_sequences: Vec<String>,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl ChatRequest {
    /// Deterministic request (temperature 0) with no stop sequences.
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            stop_sequences: Vec::new(),
            max_tokens: 2048,
            temperature: 0.0,
        }
    }

    pub fn last_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopSequence(String),
    Length,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub finish: FinishReason,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError>;
}

/// Cuts `text` just after the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> (String, Option<String>) {
    let hit = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|i| (i, s)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
    match hit {
        Some((i, s)) => (text[..i + s.len()].to_string(), Some(s.clone())),
        None => (text.to_string(), None),
    }
}

/// Which stop sequence a provider most likely removed: the only one requested,
/// or the `</tag>` whose `<tag>` is still open at the end of `text`.
fn stripped_stop<'a>(text: &str, stops: &'a [String]) -> Option<&'a String> {
    if let [only] = stops {
        return Some(only);
    }
    stops
        .iter()
        .filter_map(|s| {
            let name = s.strip_prefix("</")?.strip_suffix('>')?;
            let open = text.rfind(&format!("<{name}>"))?;
            match text.rfind(s.as_str()) {
                Some(close) if close > open => None,
                _ => Some((open, s)),
            }
        })
        .max_by_key(|(open, _)| *open)
        .map(|(_, s)| s)
}

/// JSON POST client: `{"messages", "stop", "max_tokens", "temperature"}` →
/// `{"text", "finish_reason"}`.
#[derive(Debug, Clone)]
pub struct HttpLlmClient {
    endpoint: HttpEndpoint,
}

impl HttpLlmClient {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        Self { endpoint }
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        let body = json!({
            "messages": req.messages,
            "stop": req.stop_sequences,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        let resp = self.endpoint.post_json(&body)?;
        let raw = resp
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Response("missing `text`".into()))?;
        let reason = resp.get("finish_reason").and_then(Value::as_str).unwrap_or("end");
        let (mut text, stop) = truncate_at_stop(raw, &req.stop_sequences);
        let finish = match (stop, reason) {
            (Some(s), _) => FinishReason::StopSequence(s),
            (None, "length") => FinishReason::Length,
            // Providers usually strip the matched stop sequence; put it back so
            // callers see the closing tag.
            (None, "stop") => match stripped_stop(&text, &req.stop_sequences) {
                Some(s) => {
                    text.push_str(s);
                    FinishReason::StopSequence(s.clone())
                }
                None => FinishReason::End,
            },
            _ => FinishReason::End,
        };
        Ok(Completion { text, finish })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaybookEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

/// Replays scripted replies. Each call consumes the first unconsumed entry
/// whose pattern matches the last user message. Max-token limits are ignored.
#[derive(Debug)]
pub struct ScriptedLlm {
    entries: Vec<(Regex, String)>,
    consumed: Mutex<Vec<bool>>,
}

impl ScriptedLlm {
    pub fn new(entries: Vec<PlaybookEntry>) -> Result<Self, LlmError> {
        let compiled = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                Regex::new(&e.pattern)
                    .map(|r| (r, e.reply))
                    .map_err(|err| LlmError::Playbook {
                        line: i + 1,
                        message: err.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = compiled.len();
        Ok(Self {
            entries: compiled,
            consumed: Mutex::new(vec![false; n]),
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| LlmError::Playbook {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| LlmError::Playbook {
            line: 0,
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        Self::from_jsonl(&text)
    }

    /// Entries replayed so far.
    pub fn consumed(&self) -> usize {
        self.consumed.lock().unwrap().iter().filter(|c| **c).count()
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.consumed()
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        let msg = req.last_user_message();
        let mut consumed = self.consumed.lock().unwrap();
        let idx = (0..self.entries.len())
            .find(|&i| !consumed[i] && self.entries[i].0.is_match(msg))
            .ok_or_else(|| LlmError::ScriptExhausted(msg.chars().take(200).collect()))?;
        consumed[idx] = true;
        let (text, stop) = truncate_at_stop(&self.entries[idx].1, &req.stop_sequences);
        Ok(Completion {
            text,
            finish: stop.map_or(FinishReason::End, FinishReason::StopSequence),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub rationale: String,
}

const JUDGE_INSTRUCTIONS: &str = "You judge retrieval quality for code generation. \
Rate how relevant the domain knowledge and the reference solution below are to the task. \
Answer with a single integer from 0 (irrelevant) to 100 (exactly what is needed).";

const JUDGE_REMINDER: &str = "Reply with only an integer between 0 and 100.";

static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+").unwrap());

pub fn judge_prompt(q: &str, knowledge: &[KnowledgeItem], case: &str) -> String {
    format!(
        "{JUDGE_INSTRUCTIONS}\n\n{}",
        render::sections(q, &render::knowledge_block(knowledge), &render::solution_block(case))
    )
}

/// First integer in the reply, clamped to `[0, 100]`.
pub fn parse_score(reply: &str) -> Option<(i64, bool)> {
    let m = INTEGER.find(reply)?;
    let v: i64 = m.as_str().parse().unwrap_or(if m.as_str().starts_with('-') {
        i64::MIN
    } else {
        i64::MAX
    });
    let clamped = v.clamp(0, 100);
    Some((clamped, clamped != v))
}

pub fn score_relevance(
    judge: &dyn LlmClient,
    q: &str,
    knowledge: &[KnowledgeItem],
    case: &str,
) -> Result<RewardScore, LlmError> {
    let mut messages = vec![Message::user(judge_prompt(q, knowledge, case))];
    for attempt in 0..2 {
        let mut req = ChatRequest::new(messages.clone());
        req.max_tokens = 16;
        let reply = judge.complete(&req)?.text;
        if let Some((v, clamped)) = parse_score(&reply) {
            let mut rationale = reply.trim().to_string();
            if clamped {
                tracing::warn!(reply = %reply, "judge score out of range, clamped");
                rationale.push_str(&format!(" [warning: score clamped to {v}]"));
            }
            return Ok(RewardScore {
                value: v as f64 / 100.0,
                rationale,
            });
        }
        if attempt == 1 {
            return Err(LlmError::JudgeFormat(reply));
        }
        messages.push(Message::assistant(reply));
        messages.push(Message::user(JUDGE_REMINDER));
    }
    unreachable!()
}
