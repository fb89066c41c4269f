//! Tagged reasoning protocol: a streaming parser for `<think>`, `<search_kg>`,
//! `<search_case>`, `<tool_result>` and `<answer>` blocks, plus the answer grammar.
//!
//! Segments keep their raw bytes (including any whitespace that preceded them),
//! so concatenating them reproduces the input exactly.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render;
use crate::retrieval::KnowledgeItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    Think,
    SearchKg,
    SearchCase,
    ToolResult,
    Answer,
}

impl SegmentKind {
    pub fn tag_name(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::SearchKg => "search_kg",
            SegmentKind::SearchCase => "search_case",
            SegmentKind::ToolResult => "tool_result",
            SegmentKind::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.tag_name())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.tag_name())
    }

    pub fn is_search(self) -> bool {
        matches!(self, SegmentKind::SearchKg | SegmentKind::SearchCase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Open(SegmentKind),
    Close(SegmentKind),
}

const TAGS: [(&str, Tag); 10] = [
    ("<think>", Tag::Open(SegmentKind::Think)),
    ("</think>", Tag::Close(SegmentKind::Think)),
    ("<search_kg>", Tag::Open(SegmentKind::SearchKg)),
    ("</search_kg>", Tag::Close(SegmentKind::SearchKg)),
    ("<search_case>", Tag::Open(SegmentKind::SearchCase)),
    ("</search_case>", Tag::Close(SegmentKind::SearchCase)),
    ("<tool_result>", Tag::Open(SegmentKind::ToolResult)),
    ("</tool_result>", Tag::Close(SegmentKind::ToolResult)),
    ("<answer>", Tag::Open(SegmentKind::Answer)),
    ("</answer>", Tag::Close(SegmentKind::Answer)),
];

fn tag_len(tag: Tag) -> usize {
    TAGS.iter().find(|(_, t)| *t == tag).unwrap().0.len()
}

/// Stop sequences that pause generation at a tool call.
pub fn search_stop_sequences() -> Vec<String> {
    vec![SegmentKind::SearchKg.close_tag(), SegmentKind::SearchCase.close_tag()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub ordinal: usize,
    pub kind: SegmentKind,
    /// Content between the tags.
    pub text: String,
    /// Exact source bytes, including leading whitespace and the tags themselves.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {message}")]
pub struct ProtocolError {
    pub offset: usize,
    pub message: String,
}

fn perr(offset: usize, message: impl Into<String>) -> ProtocolError {
    ProtocolError {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub kind: SegmentKind,
    pub query: String,
}

enum Scan {
    Tag(usize, Tag),
    /// Input ends inside something that may still become a tag.
    Partial(usize),
    Nothing,
}

fn scan_tags(buf: &str, from: usize) -> Scan {
    let mut i = from;
    while let Some(rel) = buf[i..].find('<') {
        let at = i + rel;
        let rest = &buf[at..];
        if let Some((_, t)) = TAGS.iter().find(|(s, _)| rest.starts_with(s)) {
            return Scan::Tag(at, *t);
        }
        if TAGS.iter().any(|(s, _)| s.starts_with(rest)) {
            return Scan::Partial(at);
        }
        i = at + 1;
    }
    Scan::Nothing
}

/// Looks only for `close`; everything else is opaque content.
fn scan_close(buf: &str, from: usize, close: &str) -> Scan {
    if let Some(rel) = buf[from..].find(close) {
        return Scan::Tag(from + rel, Tag::Open(SegmentKind::Think));
    }
    for k in (1..close.len()).rev() {
        if buf.len() >= from + k && buf.ends_with(&close[..k]) {
            return Scan::Partial(buf.len() - k);
        }
    }
    Scan::Nothing
}

#[derive(Debug, Clone, Copy)]
enum State {
    Outside,
    /// `open` is the offset of the enclosing `<think>`; `fresh` means this piece
    /// starts with that tag rather than resuming after a tool result.
    Think {
        open: usize,
        content: usize,
        fresh: bool,
    },
    Search {
        kind: SegmentKind,
        open: usize,
        content: usize,
        think: Option<usize>,
    },
    ToolResult {
        open: usize,
        content: usize,
        think: Option<usize>,
    },
    Answer {
        open: usize,
        content: usize,
    },
    Done,
}

/// Incremental parser. Segments are committed only when their closing tag has
/// been seen, so any chunking of the same input yields the same result.
#[derive(Debug, Clone)]
pub struct StreamParser {
    buf: String,
    cursor: usize,
    seg_start: usize,
    state: State,
    segments: Vec<TranscriptSegment>,
    unresolved: bool,
    failed: Option<ProtocolError>,
}

impl Default for StreamParser {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamParser {
    pub fn new() -> Self {
        Self {
            buf: String::new(),
            cursor: 0,
            seg_start: 0,
            state: State::Outside,
            segments: Vec::new(),
            unresolved: false,
            failed: None,
        }
    }

    pub fn feed(&mut self, chunk: &str) -> Result<(), ProtocolError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        self.buf.push_str(chunk);
        let r = self.advance();
        if let Err(e) = &r {
            self.failed = Some(e.clone());
        }
        r
    }

    pub fn segments(&self) -> &[TranscriptSegment] {
        &self.segments
    }

    pub fn text(&self) -> &str {
        &self.buf
    }

    /// True once `</answer>` has been seen.
    pub fn is_complete(&self) -> bool {
        matches!(self.state, State::Done)
    }

    /// The search the model paused on, if its tool result has not been spliced yet.
    pub fn pending(&self) -> Option<SearchRequest> {
        if !self.unresolved {
            return None;
        }
        let last = self.segments.last()?;
        Some(SearchRequest {
            kind: last.kind,
            query: last.text.trim().to_string(),
        })
    }

    /// Ends the stream. Unclosed elements and dangling tag fragments are errors;
    /// an unanswered search is not (the transcript simply stopped at a tool call).
    pub fn finish(mut self) -> Result<Transcript, ProtocolError> {
        if let Some(e) = self.failed {
            return Err(e);
        }
        match self.state {
            State::Outside => {
                if let Some(off) = first_non_ws(&self.buf, self.cursor, self.buf.len()) {
                    return Err(perr(off, "text outside tags"));
                }
            }
            State::Done => {}
            State::Think { open, .. } => return Err(perr(open, "unclosed <think>")),
            State::Search { kind, open, .. } => return Err(perr(open, format!("unclosed {}", kind.open_tag()))),
            State::ToolResult { open, .. } => return Err(perr(open, "unclosed <tool_result>")),
            State::Answer { open, .. } => return Err(perr(open, "unclosed <answer>")),
        }
        let tail = self.buf.split_off(self.seg_start);
        Ok(Transcript {
            segments: self.segments,
            tail,
        })
    }

    fn emit(&mut self, kind: SegmentKind, content: usize, text_end: usize, raw_end: usize) {
        self.segments.push(TranscriptSegment {
            ordinal: self.segments.len(),
            kind,
            text: self.buf[content..text_end].to_string(),
            raw: self.buf[self.seg_start..raw_end].to_string(),
        });
        self.seg_start = raw_end;
        self.cursor = raw_end;
    }

    fn resume(&mut self, think: Option<usize>) {
        self.state = match think {
            Some(open) => State::Think {
                open,
                content: self.seg_start,
                fresh: false,
            },
            None => State::Outside,
        };
    }

    fn open_tag(&mut self, at: usize, tag: Tag, think: Option<usize>) -> Result<(), ProtocolError> {
        let kind = match tag {
            Tag::Close(k) => return Err(perr(at, format!("unexpected {}", k.close_tag()))),
            Tag::Open(k) => k,
        };
        if self.unresolved && kind != SegmentKind::ToolResult {
            let msg = if kind == SegmentKind::Answer {
                "<answer> before all searches are resolved"
            } else {
                "search is not followed by a tool result"
            };
            return Err(perr(at, msg));
        }
        let content = at + tag_len(tag);
        self.state = match kind {
            SegmentKind::Think => State::Think {
                open: at,
                content,
                fresh: true,
            },
            SegmentKind::SearchKg | SegmentKind::SearchCase => State::Search {
                kind,
                open: at,
                content,
                think,
            },
            SegmentKind::ToolResult => {
                if !self.unresolved {
                    return Err(perr(at, "tool result without a preceding search"));
                }
                State::ToolResult {
                    open: at,
                    content,
                    think,
                }
            }
            SegmentKind::Answer => State::Answer { open: at, content },
        };
        self.cursor = content;
        Ok(())
    }

    fn advance(&mut self) -> Result<(), ProtocolError> {
        loop {
            match self.state {
                State::Done => return Ok(()),
                State::Outside => {
                    let sc = scan_tags(&self.buf, self.cursor);
                    let limit = scan_limit(&sc, self.buf.len());
                    if let Some(off) = first_non_ws(&self.buf, self.cursor, limit) {
                        return Err(perr(off, "text outside tags"));
                    }
                    match sc {
                        Scan::Tag(at, tag) => self.open_tag(at, tag, None)?,
                        _ => {
                            self.cursor = limit;
                            return Ok(());
                        }
                    }
                }
                State::Think { open, content, fresh } => {
                    let sc = scan_tags(&self.buf, self.cursor);
                    let limit = scan_limit(&sc, self.buf.len());
                    if self.unresolved {
                        if let Some(off) = first_non_ws(&self.buf, self.cursor, limit) {
                            return Err(perr(off, "text between a search and its tool result"));
                        }
                    }
                    match sc {
                        Scan::Tag(at, Tag::Close(SegmentKind::Think)) => {
                            if self.unresolved {
                                return Err(perr(at, "search is not followed by a tool result"));
                            }
                            self.emit(
                                SegmentKind::Think,
                                content,
                                at,
                                at + tag_len(Tag::Close(SegmentKind::Think)),
                            );
                            self.state = State::Outside;
                        }
                        Scan::Tag(at, tag @ Tag::Open(k)) if k.is_search() || k == SegmentKind::ToolResult => {
                            if fresh || first_non_ws(&self.buf, content, at).is_some() {
                                self.emit(SegmentKind::Think, content, at, at);
                            }
                            self.open_tag(at, tag, Some(open))?;
                        }
                        Scan::Tag(_, _) => return Err(perr(open, "unclosed <think>")),
                        _ => {
                            self.cursor = limit;
                            return Ok(());
                        }
                    }
                }
                State::Search {
                    kind,
                    open,
                    content,
                    think,
                } => match scan_tags(&self.buf, self.cursor) {
                    Scan::Tag(at, Tag::Close(k)) if k == kind => {
                        self.emit(kind, content, at, at + tag_len(Tag::Close(k)));
                        self.unresolved = true;
                        self.resume(think);
                    }
                    Scan::Tag(..) => {
                        return Err(perr(open, format!("unclosed {}: tags do not nest", kind.open_tag())));
                    }
                    sc => {
                        self.cursor = scan_limit(&sc, self.buf.len());
                        return Ok(());
                    }
                },
                State::ToolResult { content, think, .. } => {
                    let close = SegmentKind::ToolResult.close_tag();
                    match scan_close(&self.buf, self.cursor, &close) {
                        Scan::Tag(at, _) => {
                            self.emit(SegmentKind::ToolResult, content, at, at + close.len());
                            self.unresolved = false;
                            self.resume(think);
                        }
                        sc => {
                            self.cursor = scan_limit(&sc, self.buf.len());
                            return Ok(());
                        }
                    }
                }
                State::Answer { content, .. } => {
                    let close = SegmentKind::Answer.close_tag();
                    match scan_close(&self.buf, self.cursor, &close) {
                        Scan::Tag(at, _) => {
                            self.emit(SegmentKind::Answer, content, at, at + close.len());
                            self.state = State::Done;
                        }
                        sc => {
                            self.cursor = scan_limit(&sc, self.buf.len());
                            return Ok(());
                        }
                    }
                }
            }
        }
    }
}

fn scan_limit(sc: &Scan, len: usize) -> usize {
    match sc {
        Scan::Tag(at, _) | Scan::Partial(at) => *at,
        Scan::Nothing => len,
    }
}

fn first_non_ws(buf: &str, from: usize, to: usize) -> Option<usize> {
    buf[from..to]
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(i, _)| from + i)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub segments: Vec<TranscriptSegment>,
    /// Bytes after the last segment (text after `</answer>`, trailing whitespace).
    pub tail: String,
}

impl Transcript {
    pub fn render(&self) -> String {
        let mut out: String = self.segments.iter().map(|s| s.raw.as_str()).collect();
        out.push_str(&self.tail);
        out
    }

    pub fn answer(&self) -> Option<&TranscriptSegment> {
        self.segments.iter().find(|s| s.kind == SegmentKind::Answer)
    }

    pub fn search_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind.is_search()).count()
    }

    /// One JSON object per segment.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.segments {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut segments = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            segments.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            segments,
            tail: String::new(),
        })
    }
}

/// Parses a whole transcript in one go.
pub fn parse_transcript(text: &str) -> Result<Transcript, ProtocolError> {
    let mut p = StreamParser::new();
    p.feed(text)?;
    p.finish()
}

/// Parses text that may still be growing: completed segments plus the pending search.
pub fn parse_stream(text: &str) -> Result<(Vec<TranscriptSegment>, Option<SearchRequest>), ProtocolError> {
    let mut p = StreamParser::new();
    p.feed(text)?;
    let pending = p.pending();
    Ok((p.segments, pending))
}

const TOOL_CLOSE_ESCAPED: &str = "<\\/tool_result>";

/// Wraps a rendered tool result for splicing into the transcript.
pub fn tool_result_block(body: &str) -> String {
    format!(
        "<tool_result>\n{}\n</tool_result>",
        body.replace("</tool_result>", TOOL_CLOSE_ESCAPED)
    )
}

pub fn serialize_knowledge(items: &[KnowledgeItem]) -> String {
    render::bounded(&render::knowledge_lines(items), render::TOOL_RESULT_LIMIT)
}

pub fn serialize_cases<'a>(cases: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    render::bounded(&render::case_lines(cases), render::TOOL_RESULT_LIMIT)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentAnswer {
    pub refined_knowledge: Vec<KnowledgeItem>,
    pub specialized_solution: String,
    /// Set when the solution section named a retrieved case instead of inlining code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_case: Option<String>,
}

/// What tool results have shown the model so far.
#[derive(Debug, Clone, Default)]
pub struct SeenResults {
    pub knowledge: BTreeMap<String, KnowledgeItem>,
    /// Case id to code.
    pub cases: BTreeMap<String, String>,
}

/// Grammar: a `K:` section listing knowledge ids (inline list or one per line),
/// then a `C:` section holding a fenced solution, a retrieved case id, or `none`.
/// Ids not present in earlier tool results are dropped.
pub fn parse_answer(text: &str, seen: &SeenResults) -> Result<AgentAnswer, ProtocolError> {
    let mut k_lines: Option<Vec<&str>> = None;
    let mut c_start: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_start();
        if c_start.is_none() {
            if let Some(rest) = body.strip_prefix("C:") {
                c_start = Some(offset + (line.len() - rest.len()));
                break;
            }
            if let Some(rest) = body.strip_prefix("K:") {
                k_lines.get_or_insert_with(Vec::new).push(rest);
            } else if let Some(lines) = k_lines.as_mut() {
                lines.push(line);
            }
        }
        offset += line.len();
    }
    if k_lines.is_none() && c_start.is_none() {
        return Err(perr(0, "answer has neither a K: nor a C: section"));
    }

    let mut refined: Vec<KnowledgeItem> = Vec::new();
    for id in k_lines.unwrap_or_default().into_iter().flat_map(knowledge_ids) {
        if refined.iter().any(|k| k.id == id) {
            continue;
        }
        match seen.knowledge.get(&id) {
            Some(item) => refined.push(item.clone()),
            None => tracing::warn!(id = %id, "dropping knowledge id not returned by any tool"),
        }
    }

    let c = c_start.map(|s| &text[s..]).unwrap_or("");
    let trimmed = c.trim();
    let (solution, case) = if trimmed.contains("```") {
        (render::first_fence(c).unwrap_or_default(), None)
    } else if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        (String::new(), None)
    } else if let Some(code) = seen.cases.get(trimmed) {
        (code.clone(), Some(trimmed.to_string()))
    } else {
        (trimmed.to_string(), None)
    };
    Ok(AgentAnswer {
        refined_knowledge: refined,
        specialized_solution: solution,
        solution_case: case,
    })
}

fn knowledge_ids(line: &str) -> Vec<String> {
    let line = line.trim();
    let line = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .unwrap_or(line);
    // Lines copied from a tool result keep only their id column.
    let line = line.split('\t').next().unwrap_or("");
    line.split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c| matches!(c, '[' | ']' | '"' | '\'' | '`')))
        .filter(|t| !t.is_empty())
        .map(render::unescape_field)
        .collect()
}
