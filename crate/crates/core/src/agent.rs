//! Tool-calling agent loop: generate until a search tag closes, run the tool,
//! splice its result, and resume until the answer block closes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatRequest, LlmClient, LlmError, Message};
use crate::protocol::{
    self, AgentAnswer, ProtocolError, SearchRequest, SeenResults, SegmentKind, StreamParser, Transcript,
};
use crate::render;
use crate::retrieval::{KnowledgeItem, RetrievalError, Retriever};

pub const DEFAULT_BUDGET: usize = 8;
pub const CONTINUE_PROMPT: &str = "Continue.";

pub const SYSTEM_PROMPT: &str = "You retrieve domain knowledge for a coding task before it is solved.
Reason inside <think>...</think>. To look up API knowledge write <search_kg>query</search_kg>; \
to look up solved example tasks write <search_case>query</search_case>. \
Each search is answered with <tool_result>...</tool_result>; you may search again with a refined query.
Finish with <answer>, listing the relevant knowledge ids after \"K:\" (one per line) \
and, after \"C:\", the most useful reference solution as a fenced code block, a case id, or none. Close with </answer>.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRef {
    pub id: String,
    pub task: String,
    pub code: String,
}

/// The two searches the model may call. Errors are reported back to the model.
pub trait AgentTools {
    fn search_kg(&self, query: &str) -> Result<Vec<KnowledgeItem>, String>;
    /// `knowledge` is everything knowledge searches returned so far; it drives re-ranking.
    fn search_case(&self, query: &str, knowledge: &[KnowledgeItem]) -> Result<Vec<CaseRef>, String>;
}

impl AgentTools for Retriever<'_> {
    fn search_kg(&self, query: &str) -> Result<Vec<KnowledgeItem>, String> {
        match Retriever::search_kg(self, query) {
            Ok((_, items)) => Ok(items),
            Err(e) if e.is_empty_result() => Ok(Vec::new()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn search_case(&self, query: &str, knowledge: &[KnowledgeItem]) -> Result<Vec<CaseRef>, String> {
        match self.search_cases(query, knowledge) {
            Ok(hits) => Ok(hits
                .into_iter()
                .filter_map(|h| self.store.get(&h.id))
                .map(|c| CaseRef {
                    id: c.id.clone(),
                    task: c.task.clone(),
                    code: c.code.clone(),
                })
                .collect()),
            Err(RetrievalError::NoCases) => Ok(Vec::new()),
            Err(e) if e.is_empty_result() => Ok(Vec::new()),
            Err(e) => Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Maximum tool calls per session.
    pub budget: usize,
    pub max_tokens: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub kind: SegmentKind,
    pub query: String,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub transcript: Transcript,
    pub answer: AgentAnswer,
    pub tool_calls: Vec<ToolCall>,
    pub llm_calls: usize,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{error}")]
    Protocol { error: ProtocolError, partial: Transcript },
    #[error("agent used its budget of {budget} tool calls without answering")]
    Timeout { budget: usize, partial: Transcript },
}

impl AgentError {
    pub fn partial_transcript(&self) -> Option<&Transcript> {
        match self {
            AgentError::Llm(_) => None,
            AgentError::Protocol { partial, .. } | AgentError::Timeout { partial, .. } => Some(partial),
        }
    }
}

fn partial(parser: &StreamParser) -> Transcript {
    Transcript {
        segments: parser.segments().to_vec(),
        tail: String::new(),
    }
}

/// Runs one sequential session. At most `budget` tool calls and `budget + 1`
/// model calls are made, so the loop always terminates.
pub fn run_agent(
    q: &str,
    tools: &dyn AgentTools,
    llm: &dyn LlmClient,
    cfg: &AgentConfig,
) -> Result<AgentRun, AgentError> {
    let mut messages = vec![Message::system(SYSTEM_PROMPT), Message::user(q)];
    let mut parser = StreamParser::new();
    let mut seen = SeenResults::default();
    let mut knowledge: Vec<KnowledgeItem> = Vec::new();
    let mut calls: Vec<ToolCall> = Vec::new();
    let mut llm_calls = 0;

    while !parser.is_complete() {
        if llm_calls > cfg.budget {
            return Err(AgentError::Timeout {
                budget: cfg.budget,
                partial: partial(&parser),
            });
        }
        let mut req = ChatRequest::new(messages.clone());
        req.stop_sequences = protocol::search_stop_sequences();
        req.max_tokens = cfg.max_tokens;
        let reply = llm.complete(&req)?;
        llm_calls += 1;
        parser.feed(&reply.text).map_err(|error| AgentError::Protocol {
            error,
            partial: partial(&parser),
        })?;
        messages.push(Message::assistant(reply.text));
        if parser.is_complete() {
            break;
        }
        let Some(request) = parser.pending() else {
            messages.push(Message::user(CONTINUE_PROMPT));
            continue;
        };
        if calls.len() == cfg.budget {
            return Err(AgentError::Timeout {
                budget: cfg.budget,
                partial: partial(&parser),
            });
        }
        let (body, failed) = dispatch(tools, &request, &mut knowledge, &mut seen);
        calls.push(ToolCall {
            kind: request.kind,
            query: request.query,
            failed,
        });
        let block = protocol::tool_result_block(&body);
        parser.feed(&block).map_err(|error| AgentError::Protocol {
            error,
            partial: partial(&parser),
        })?;
        messages.push(Message::user(block));
    }

    let transcript = parser.finish().map_err(|error| AgentError::Protocol {
        error,
        partial: Transcript::default(),
    })?;
    let answer_text = &transcript.answer().expect("complete transcript has an answer").text;
    let answer = protocol::parse_answer(answer_text, &seen).map_err(|error| AgentError::Protocol {
        error,
        partial: transcript.clone(),
    })?;
    Ok(AgentRun {
        transcript,
        answer,
        tool_calls: calls,
        llm_calls,
    })
}

fn dispatch(
    tools: &dyn AgentTools,
    req: &SearchRequest,
    knowledge: &mut Vec<KnowledgeItem>,
    seen: &mut SeenResults,
) -> (String, bool) {
    let result = match req.kind {
        SegmentKind::SearchKg => tools.search_kg(&req.query).map(|items| {
            let lines = render::knowledge_lines(&items);
            let body = render::bounded(&lines, render::TOOL_RESULT_LIMIT);
            for (item, line) in items.into_iter().zip(&lines) {
                if shown(&body, line) {
                    seen.knowledge.entry(item.id.clone()).or_insert_with(|| item.clone());
                }
                if !knowledge.iter().any(|k| k.id == item.id) {
                    knowledge.push(item);
                }
            }
            body
        }),
        _ => tools.search_case(&req.query, knowledge).map(|cases| {
            let lines = render::case_lines(cases.iter().map(|c| (c.id.as_str(), c.task.as_str())));
            let body = render::bounded(&lines, render::TOOL_RESULT_LIMIT);
            for (c, line) in cases.into_iter().zip(&lines) {
                if shown(&body, line) {
                    seen.cases.entry(c.id).or_insert(c.code);
                }
            }
            body
        }),
    };
    match result {
        Ok(body) => (body, false),
        Err(e) => {
            tracing::warn!(query = %req.query, error = %e, "tool call failed");
            (format!("error: {e}"), true)
        }
    }
}

/// Whether `line` survived truncation intact.
fn shown(body: &str, line: &str) -> bool {
    body.lines().any(|l| l == line)
}

/// Tool ids mentioned by tool results, for audits.
pub fn result_ids(transcript: &Transcript) -> BTreeMap<SegmentKind, Vec<String>> {
    let mut out: BTreeMap<SegmentKind, Vec<String>> = BTreeMap::new();
    let mut last_search = None;
    for s in &transcript.segments {
        match s.kind {
            k if k.is_search() => last_search = Some(k),
            SegmentKind::ToolResult => {
                if let Some(k) = last_search {
                    let ids = s
                        .text
                        .lines()
                        .filter_map(|l| l.split_once('\t'))
                        .map(|(id, _)| render::unescape_field(id));
                    out.entry(k).or_default().extend(ids);
                }
            }
            _ => {}
        }
    }
    out
}
