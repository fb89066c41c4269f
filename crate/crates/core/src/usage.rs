//! Package and call-site extraction from Python-style source text.
//!
//! This is a line-oriented scan, not a parser. String literals and comments
//! are blanked first, bracketed continuations are joined into logical lines,
//! then `import` / `from ... import` statements build an alias map that
//! dotted call targets are resolved through.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Usage {
    pub packages: BTreeSet<String>,
    pub functions: BTreeSet<String>,
}

static CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([A-Za-z_][A-Za-z0-9_]*(?:\s*\.\s*[A-Za-z_][A-Za-z0-9_]*)*)\s*\(").unwrap());
static DOTTED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*$").unwrap());
static IDENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap());

pub fn extract_usage(code: &str) -> Usage {
    let cleaned = blank_strings_and_comments(code);
    let statements = logical_statements(&cleaned);

    let mut aliases: BTreeMap<String, String> = BTreeMap::new();
    let mut usage = Usage::default();

    for stmt in &statements {
        let s = stmt.trim();
        if let Some(rest) = s.strip_prefix("import ") {
            for clause in rest.split(',') {
                let (module, alias) = split_alias(clause);
                if !DOTTED.is_match(&module) {
                    continue;
                }
                let root = module.split('.').next().unwrap().to_string();
                usage.packages.insert(root.clone());
                match alias {
                    Some(a) => aliases.insert(a, module),
                    None => aliases.insert(root.clone(), root),
                };
            }
        } else if let Some(rest) = s.strip_prefix("from ") {
            let Some((module, names)) = rest.split_once(" import ") else {
                continue;
            };
            let module = module.trim();
            if !DOTTED.is_match(module) {
                // relative imports have no package root
                continue;
            }
            let root = module.split('.').next().unwrap().to_string();
            usage.packages.insert(root);
            let names = names.trim().trim_start_matches('(').trim_end_matches(')');
            for clause in names.split(',') {
                let (name, alias) = split_alias(clause);
                if !IDENT.is_match(&name) {
                    continue;
                }
                let target = format!("{module}.{name}");
                aliases.insert(alias.unwrap_or(name), target);
            }
        }
    }

    for stmt in &statements {
        let s = stmt.trim();
        if s.starts_with("import ") || s.starts_with("from ") {
            continue;
        }
        for cap in CALL.captures_iter(s) {
            let m = cap.get(1).unwrap();
            let before = s[..m.start()].trim_end();
            if before.ends_with('.') || before.ends_with("def") || before.ends_with("class") {
                continue;
            }
            let dotted: String = m.as_str().chars().filter(|c| !c.is_whitespace()).collect();
            let (head, tail) = match dotted.split_once('.') {
                Some((h, t)) => (h, Some(t)),
                None => (dotted.as_str(), None),
            };
            if let Some(full) = aliases.get(head) {
                let resolved = match tail {
                    Some(t) => format!("{full}.{t}"),
                    None => full.clone(),
                };
                usage.functions.insert(resolved);
            }
        }
    }
    usage
}

fn split_alias(clause: &str) -> (String, Option<String>) {
    let clause = clause.trim();
    match clause.split_once(" as ") {
        Some((name, alias)) => (name.trim().to_string(), Some(alias.trim().to_string())),
        None => (clause.to_string(), None),
    }
}

/// Replaces string-literal bodies and comments with spaces, keeping newlines
/// so statement boundaries survive.
fn blank_strings_and_comments(code: &str) -> String {
    let chars: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '"' || c == '\'' {
            let triple = i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c;
            let quote_len = if triple { 3 } else { 1 };
            out.push('"');
            i += quote_len;
            while i < chars.len() {
                if chars[i] == '\\' {
                    i += 2;
                    out.push(' ');
                    continue;
                }
                if chars[i] == c && (!triple || (i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c)) {
                    i += quote_len;
                    break;
                }
                if chars[i] == '\n' {
                    if !triple {
                        break;
                    }
                    out.push('\n');
                } else {
                    out.push(' ');
                }
                i += 1;
            }
            out.push('"');
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

/// Splits into statements on newlines and `;`, joining lines inside open
/// brackets or after a trailing backslash.
fn logical_statements(code: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth: i32 = 0;
    for line in code.split('\n') {
        let (body, continued) = match line.trim_end().strip_suffix('\\') {
            Some(b) => (b, true),
            None => (line, false),
        };
        for ch in body.chars() {
            match ch {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth = (depth - 1).max(0),
                _ => {}
            }
            if ch == ';' && depth == 0 {
                out.push(std::mem::take(&mut cur));
            } else {
                cur.push(ch);
            }
        }
        if depth > 0 || continued {
            cur.push(' ');
        } else {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur);
    }
    out
}
