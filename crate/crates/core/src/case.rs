//! Code cases and their JSON-Lines file format.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::usage::extract_usage;

#[derive(Debug, Error)]
pub enum CaseFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("case `{0}` has an empty task description")]
    EmptyTask(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub task: String,
    pub code: String,
    #[serde(default)]
    pub packages: BTreeSet<String>,
    #[serde(default)]
    pub functions: BTreeSet<String>,
    #[serde(default)]
    pub validated: bool,
}

impl Case {
    /// New unvalidated case with usage extracted from `code`.
    pub fn new(id: impl Into<String>, task: impl Into<String>, code: impl Into<String>) -> Self {
        let mut c = Self {
            id: id.into(),
            task: task.into(),
            code: code.into(),
            packages: BTreeSet::new(),
            functions: BTreeSet::new(),
            validated: false,
        };
        c.extract_usage();
        c
    }

    pub fn extract_usage(&mut self) {
        let u = extract_usage(&self.code);
        self.packages = u.packages;
        self.functions = u.functions;
    }

    /// Package roots plus fully qualified functions.
    pub fn identifiers(&self) -> BTreeSet<&str> {
        self.packages
            .iter()
            .chain(self.functions.iter())
            .map(String::as_str)
            .collect()
    }
}

pub fn read_cases<R: Read>(reader: R) -> Result<Vec<Case>, CaseFileError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: Case = serde_json::from_str(&line).map_err(|e| CaseFileError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if case.task.trim().is_empty() {
            return Err(CaseFileError::EmptyTask(case.id));
        }
        out.push(case);
    }
    Ok(out)
}

pub fn write_cases<W: Write>(mut w: W, cases: &[Case]) -> io::Result<()> {
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<Case>, CaseFileError> {
    read_cases(fs::File::open(path)?)
}

pub fn save_cases(path: impl AsRef<Path>, cases: &[Case]) -> io::Result<()> {
    let mut buf = Vec::new();
    write_cases(&mut buf, cases)?;
    fs::write(path, buf)
}
