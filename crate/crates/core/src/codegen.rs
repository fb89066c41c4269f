//! Final generation prompt and code extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatRequest, LlmClient, LlmError, Message};
use crate::protocol::AgentAnswer;
use crate::render;

pub const GENERATOR_PROMPT: &str = "Write a complete solution for the task. Use the domain knowledge and \
the reference solution where they help. Reply with the code in a single fenced block.";

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("generator returned an empty reply")]
    EmptyGeneration,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenPrompt {
    pub task: String,
    pub knowledge_block: String,
    pub case_block: String,
    pub rendered: String,
}

pub fn build_prompt(q: &str, answer: &AgentAnswer) -> GenPrompt {
    let knowledge_block = render::knowledge_block(&answer.refined_knowledge);
    let case_block = render::solution_block(&answer.specialized_solution);
    let rendered = render::sections(q, &knowledge_block, &case_block);
    GenPrompt {
        task: q.to_string(),
        knowledge_block,
        case_block,
        rendered,
    }
}

/// First fenced block, or the whole reply trimmed when there is none.
pub fn extract_code(reply: &str) -> Result<String, CodegenError> {
    if reply.trim().is_empty() {
        return Err(CodegenError::EmptyGeneration);
    }
    Ok(match render::first_fence(reply) {
        Some(code) => code,
        None => reply.trim().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub reply: String,
    pub code: String,
}

pub fn generate(llm: &dyn LlmClient, prompt: &GenPrompt, max_tokens: usize) -> Result<Generation, CodegenError> {
    let mut req = ChatRequest::new(vec![Message::system(GENERATOR_PROMPT), Message::user(&prompt.rendered)]);
    req.max_tokens = max_tokens;
    let reply = llm.complete(&req)?.text;
    let code = extract_code(&reply)?;
    Ok(Generation { reply, code })
}
