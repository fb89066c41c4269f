//! Subprocess execution of code under a wall-clock timeout.

use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::case::Case;
use crate::pool;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("runner command template is empty or unparsable: `{0}`")]
    BadTemplate(String),
    #[error("could not spawn `{program}`: {source}")]
    Spawn { program: String, source: io::Error },
    #[error("runner environment failure: {0}")]
    Environment(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    Failed { exit_code: Option<i32> },
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    #[serde(flatten)]
    pub status: RunStatus,
    pub wall_ms: u64,
    /// Last few hundred bytes of stderr.
    pub stderr_tail: String,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.status == RunStatus::Passed
    }

    pub fn reason(&self) -> String {
        match &self.status {
            RunStatus::Passed => "ok".into(),
            RunStatus::Failed { exit_code: Some(c) } => format!("exit status {c}"),
            RunStatus::Failed { exit_code: None } => "killed by signal".into(),
            RunStatus::TimedOut => "timeout".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Runner {
    /// Program and arguments; `{file}` is replaced by the path of the written source.
    pub command: String,
    pub timeout: Duration,
    pub workdir: Option<PathBuf>,
    pub file_name: String,
}

impl Default for Runner {
    fn default() -> Self {
        Self {
            command: "python3 {file}".into(),
            timeout: Duration::from_secs(30),
            workdir: None,
            file_name: "main.py".into(),
        }
    }
}

const STDERR_TAIL: usize = 400;

impl Runner {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
            ..Default::default()
        }
    }

    /// Writes `source` to a fresh temp directory and runs the command template on it.
    pub fn run_source(&self, source: &str) -> Result<RunOutcome, RunnerError> {
        let dir = tempfile::tempdir()?;
        let file = dir.path().join(&self.file_name);
        fs::write(&file, source)?;
        let argv = shlex::split(&self.command)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| RunnerError::BadTemplate(self.command.clone()))?;
        let file_str = file.to_string_lossy();
        let argv: Vec<String> = argv.iter().map(|a| a.replace("{file}", &file_str)).collect();

        let stdout = fs::File::create(dir.path().join(".stdout"))?;
        let stderr_path = dir.path().join(".stderr");
        let stderr = fs::File::create(&stderr_path)?;
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .current_dir(self.workdir.as_deref().unwrap_or(dir.path()));
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|source| RunnerError::Spawn {
            program: argv[0].clone(),
            source,
        })?;
        let status = match child.wait_timeout(self.timeout)? {
            Some(st) if st.success() => RunStatus::Passed,
            Some(st) => RunStatus::Failed { exit_code: st.code() },
            None => {
                kill_tree(&mut child);
                child.wait()?;
                RunStatus::TimedOut
            }
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        let err = fs::read(&stderr_path).unwrap_or_default();
        let tail = &err[err.len().saturating_sub(STDERR_TAIL)..];
        Ok(RunOutcome {
            status,
            wall_ms,
            stderr_tail: String::from_utf8_lossy(tail).into_owned(),
        })
    }
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        // The child leads its own process group, so this also reaches grandchildren.
        let pgid = child.id() as libc::pid_t;
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}

/// Runs the case and sets `validated` from the outcome.
pub fn validate_case(mut case: Case, runner: &Runner) -> Result<(Case, RunOutcome), RunnerError> {
    let outcome = runner.run_source(&case.code)?;
    case.validated = outcome.passed();
    Ok((case, outcome))
}

/// Validates in a bounded worker pool; output order matches input order.
/// The first environment failure aborts the batch.
pub fn validate_cases(
    cases: Vec<Case>,
    runner: &Runner,
    workers: usize,
) -> Result<Vec<(Case, RunOutcome)>, RunnerError> {
    pool::map_bounded(&cases, workers, |c| validate_case(c.clone(), runner))
        .into_iter()
        .collect()
}
