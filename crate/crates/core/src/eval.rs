//! pass@1 evaluation: agent, prompt, generation, splice, and a single test run per task.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, AgentConfig, AgentTools};
use crate::codegen::{self, GenPrompt};
use crate::llm::LlmClient;
use crate::pool;
use crate::protocol::Transcript;
use crate::runner::{Runner, RunnerError};

pub const DEFAULT_MARKER: &str = "[insert]";
pub const DEFAULT_GROUP: &str = "default";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation suite is empty; pass@1 is undefined")]
    EmptySuite,
    #[error("task file line {line}: {message}")]
    TaskFile { line: usize, message: String },
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("sandbox failure: {0}")]
    Environment(#[from] RunnerError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    pub description: String,
    /// Code the solution is spliced into.
    pub context: String,
    /// Runner template; exit status 0 means pass.
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl EvalTask {
    pub fn group(&self) -> &str {
        self.group.as_deref().unwrap_or(DEFAULT_GROUP)
    }
}

pub fn read_tasks<R: BufRead>(r: R) -> Result<Vec<EvalTask>, EvalError> {
    let mut out: Vec<EvalTask> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: EvalTask = serde_json::from_str(&line).map_err(|e| EvalError::TaskFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.iter().any(|o| o.id == t.id) {
            return Err(EvalError::DuplicateTask(t.id));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<EvalTask>, EvalError> {
    read_tasks(BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub group: String,
    pub passed: bool,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupScore {
    pub passed: usize,
    pub total: usize,
    pub pass_at_1: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub passed: usize,
    pub pass_at_1: String,
    pub groups: BTreeMap<String, GroupScore>,
    pub tasks: Vec<TaskResult>,
}

pub fn pass_rate(passed: usize, total: usize) -> Result<Ratio<i64>, EvalError> {
    if total == 0 {
        return Err(EvalError::EmptySuite);
    }
    Ok(Ratio::new(passed as i64, total as i64))
}

/// Exact rational rounded half-up to four decimals.
pub fn format_rate(r: Ratio<i64>) -> String {
    let scaled = (r * 10_000 * 2 + Ratio::from_integer(1)) / 2;
    let v = scaled.floor().to_integer();
    format!("{}.{:04}", v / 10_000, v % 10_000)
}

impl EvalReport {
    pub fn rate(&self) -> Ratio<i64> {
        Ratio::new(self.passed as i64, self.total as i64)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["task_id", "group", "passed", "wall_ms", "transcript", "error"])?;
        for t in &self.tasks {
            out.write_record([
                t.id.as_str(),
                &t.group,
                if t.passed { "true" } else { "false" },
                &t.wall_ms.to_string(),
                t.transcript.as_deref().unwrap_or(""),
                t.error.as_deref().unwrap_or(""),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.write_json(fs::File::create(dir.join("report.json"))?)?;
        self.write_csv(fs::File::create(dir.join("report.csv"))?)
    }
}

/// Builds the report; results are ordered by task id.
pub fn aggregate(mut results: Vec<TaskResult>) -> Result<EvalReport, EvalError> {
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let passed = results.iter().filter(|r| r.passed).count();
    let rate = pass_rate(passed, results.len())?;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &results {
        let e = counts.entry(r.group.clone()).or_default();
        e.0 += usize::from(r.passed);
        e.1 += 1;
    }
    let groups = counts
        .into_iter()
        .map(|(g, (p, t))| {
            let score = GroupScore {
                passed: p,
                total: t,
                pass_at_1: format_rate(Ratio::new(p as i64, t as i64)),
            };
            (g, score)
        })
        .collect();
    Ok(EvalReport {
        total: results.len(),
        passed,
        pass_at_1: format_rate(rate),
        groups,
        tasks: results,
    })
}

/// Replaces the first marker; without a marker the code is appended.
pub fn splice(context: &str, marker: &str, code: &str) -> String {
    if !marker.is_empty() && context.contains(marker) {
        context.replacen(marker, code, 1)
    } else if context.is_empty() {
        code.to_string()
    } else {
        format!("{}\n{code}\n", context.trim_end_matches('\n'))
    }
}

pub struct Pipeline<'a> {
    pub tools: &'a (dyn AgentTools + Sync),
    pub agent_llm: &'a dyn LlmClient,
    pub generator: &'a dyn LlmClient,
    pub agent: AgentConfig,
    /// Timeout and file name; the command comes from each task.
    pub runner: Runner,
    pub marker: String,
    /// Where transcripts, prompts and generated code are written.
    pub artifacts: Option<PathBuf>,
    /// When false, `wall_ms` is reported as 0 so reports are byte-stable.
    pub record_wall_time: bool,
    pub workers: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TaskArtifacts {
    pub transcript: Option<Transcript>,
    pub prompt: Option<GenPrompt>,
    pub code: Option<String>,
}

pub fn artifact_stem(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Pipeline<'_> {
    /// Everything before the test run. Failures here fail the task, not the suite.
    pub fn solve(&self, task: &EvalTask) -> (TaskArtifacts, Result<String, String>) {
        let mut art = TaskArtifacts::default();
        let run = match agent::run_agent(&task.description, self.tools, self.agent_llm, &self.agent) {
            Ok(r) => r,
            Err(e) => {
                art.transcript = e.partial_transcript().cloned();
                return (art, Err(format!("agent: {e}")));
            }
        };
        art.transcript = Some(run.transcript);
        let prompt = codegen::build_prompt(&task.description, &run.answer);
        let generated = codegen::generate(self.generator, &prompt, self.agent.max_tokens);
        art.prompt = Some(prompt);
        match generated {
            Ok(g) => {
                art.code = Some(g.code.clone());
                (art, Ok(g.code))
            }
            Err(e) => (art, Err(format!("generation: {e}"))),
        }
    }

    fn write_artifacts(&self, task: &EvalTask, art: &TaskArtifacts) -> io::Result<Option<String>> {
        let Some(dir) = &self.artifacts else {
            return Ok(None);
        };
        fs::create_dir_all(dir)?;
        let stem = artifact_stem(&task.id);
        if let Some(p) = &art.prompt {
            fs::write(dir.join(format!("{stem}.prompt.md")), &p.rendered)?;
        }
        if let Some(c) = &art.code {
            fs::write(dir.join(format!("{stem}.code")), c)?;
        }
        match &art.transcript {
            Some(t) => {
                let name = format!("{stem}.transcript.jsonl");
                let mut f = io::BufWriter::new(fs::File::create(dir.join(&name))?);
                t.write_jsonl(&mut f)?;
                f.flush()?;
                Ok(Some(name))
            }
            None => Ok(None),
        }
    }

    pub fn run_task(&self, task: &EvalTask) -> Result<TaskResult, EvalError> {
        let (art, solved) = self.solve(task);
        let transcript = self.write_artifacts(task, &art)?;
        let mut result = TaskResult {
            id: task.id.clone(),
            group: task.group().to_string(),
            passed: false,
            wall_ms: 0,
            transcript,
            error: None,
        };
        let code = match solved {
            Ok(c) => c,
            Err(e) => {
                result.error = Some(e);
                return Ok(result);
            }
        };
        let program = splice(&task.context, &self.marker, &code);
        let runner = Runner {
            command: task.test.clone(),
            ..self.runner.clone()
        };
        match runner.run_source(&program) {
            Ok(out) => {
                result.passed = out.passed();
                if self.record_wall_time {
                    result.wall_ms = out.wall_ms;
                }
                if !out.passed() {
                    result.error = Some(out.reason());
                }
            }
            Err(RunnerError::BadTemplate(t)) => result.error = Some(format!("bad test command `{t}`")),
            Err(e) => return Err(e.into()),
        }
        Ok(result)
    }
}

/// Runs every task once and aggregates pass@1 overall and per group.
pub fn evaluate(tasks: &[EvalTask], pipeline: &Pipeline<'_>) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let results = pool::map_bounded(tasks, pipeline.workers.max(1), |t| pipeline.run_task(t))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(id: &str, group: &str, passed: bool) -> TaskResult {
        TaskResult {
            id: id.into(),
            group: group.into(),
            passed,
            wall_ms: 0,
            transcript: None,
            error: None,
        }
    }

    #[test]
    fn two_of_three() {
        let r = aggregate(vec![res("a", "x", true), res("b", "x", false), res("c", "x", true)]).unwrap();
        assert_eq!(r.pass_at_1, "0.6667");
        assert_eq!(r.rate(), Ratio::new(2, 3));
    }

    #[test]
    fn empty_suite_is_an_error() {
        assert!(matches!(aggregate(vec![]), Err(EvalError::EmptySuite)));
    }

    #[test]
    fn group_breakdown() {
        let r = aggregate(vec![res("t2", "A", true), res("t1", "A", true), res("t3", "B", false)]).unwrap();
        assert_eq!(r.groups["A"].pass_at_1, "1.0000");
        assert_eq!(r.groups["B"].pass_at_1, "0.0000");
        let ids: Vec<_> = r.tasks.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["t1", "t2", "t3"]);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(format_rate(Ratio::new(1, 8)), "0.1250");
        assert_eq!(format_rate(Ratio::new(1, 3)), "0.3333");
        assert_eq!(format_rate(Ratio::new(2, 3)), "0.6667");
        assert_eq!(format_rate(Ratio::new(1, 20000)), "0.0001");
        assert_eq!(format_rate(Ratio::new(1, 1)), "1.0000");
    }

    #[test]
    fn splicing() {
        assert_eq!(splice("a\n[insert]\nb", "[insert]", "x"), "a\nx\nb");
        assert_eq!(splice("a", "[insert]", "x"), "a\nx\n");
        assert_eq!(splice("", "[insert]", "x"), "x");
    }

    #[test]
    fn task_file_parsing() {
        let text = r#"{"id":"t1","description":"d","context":"[insert]","test":"python3 {file}","group":"g"}
{"id":"t2","description":"d","context":"","test":"true"}"#;
        let tasks = read_tasks(text.as_bytes()).unwrap();
        assert_eq!(tasks[1].group(), DEFAULT_GROUP);
        let dup = format!("{}\n{}", text.lines().next().unwrap(), text.lines().next().unwrap());
        assert!(matches!(read_tasks(dup.as_bytes()), Err(EvalError::DuplicateTask(_))));
    }
}
