//! Line-oriented rendering shared by tool results, generation prompts, and the judge.

use crate::retrieval::KnowledgeItem;

pub const TOOL_RESULT_LIMIT: usize = 2000;
pub const TRUNCATION_MARKER: &str = "\n[... truncated]";
pub const NO_RESULTS: &str = "(no results)";
pub const NONE: &str = "(none)";

/// Backslash-escapes the characters that would break the tab/line layout.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// `id<TAB>name<TAB>description`, in the given order.
pub fn knowledge_lines(items: &[KnowledgeItem]) -> Vec<String> {
    items
        .iter()
        .map(|k| {
            format!(
                "{}\t{}\t{}",
                escape_field(&k.id),
                escape_field(&k.name),
                escape_field(&k.description)
            )
        })
        .collect()
}

/// `id<TAB>task`, in the given order.
pub fn case_lines<'a>(cases: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<String> {
    cases
        .into_iter()
        .map(|(id, task)| format!("{}\t{}", escape_field(id), escape_field(task)))
        .collect()
}

/// Joins lines, keeping at most `limit` characters of them. Whole lines are
/// kept where possible; the marker is appended whenever anything was dropped.
pub fn bounded(lines: &[String], limit: usize) -> String {
    if lines.is_empty() {
        return NO_RESULTS.to_string();
    }
    let full = lines.join("\n");
    if full.chars().count() <= limit {
        return full;
    }
    let mut out = String::new();
    let mut used = 0;
    for line in lines {
        let sep = usize::from(!out.is_empty());
        let len = line.chars().count();
        if used + sep + len > limit {
            break;
        }
        if sep == 1 {
            out.push('\n');
        }
        out.push_str(line);
        used += sep + len;
    }
    if out.is_empty() {
        out = lines[0].chars().take(limit).collect();
    }
    out.push_str(TRUNCATION_MARKER);
    out
}

pub fn knowledge_block(items: &[KnowledgeItem]) -> String {
    if items.is_empty() {
        NONE.to_string()
    } else {
        knowledge_lines(items).join("\n")
    }
}

pub fn solution_block(code: &str) -> String {
    if code.trim().is_empty() {
        NONE.to_string()
    } else {
        format!("```\n{}\n```", code.trim_end_matches('\n'))
    }
}

/// Body of the first fenced block; an unclosed fence runs to the end of `text`.
pub fn first_fence(text: &str) -> Option<String> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => return Some(String::new()),
    };
    if body.starts_with("```") {
        return Some(String::new());
    }
    let end = body.find("\n```").unwrap_or(body.len());
    Some(body[..end].to_string())
}

pub const TASK_HEADER: &str = "## Task";
pub const KNOWLEDGE_HEADER: &str = "## Domain Knowledge";
pub const SOLUTION_HEADER: &str = "## Reference Solution";

pub fn sections(task: &str, knowledge: &str, solution: &str) -> String {
    format!("{TASK_HEADER}\n{task}\n\n{KNOWLEDGE_HEADER}\n{knowledge}\n\n{SOLUTION_HEADER}\n{solution}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: &str, desc: &str) -> KnowledgeItem {
        KnowledgeItem {
            id: id.into(),
            name: id.into(),
            description: desc.into(),
            package: "p".into(),
            score: 0.5,
        }
    }

    #[test]
    fn empty_is_no_results() {
        assert_eq!(bounded(&[], TOOL_RESULT_LIMIT), "(no results)");
    }

    #[test]
    fn two_items_two_lines() {
        let s = bounded(
            &knowledge_lines(&[item("a", "first"), item("b", "second\tcol")]),
            TOOL_RESULT_LIMIT,
        );
        assert_eq!(s, "a\ta\tfirst\nb\tb\tsecond\\tcol");
    }

    #[test]
    fn oversized_output_is_bounded() {
        let items: Vec<_> = (0..30).map(|i| item(&format!("k{i}"), &"x".repeat(300))).collect();
        let s = bounded(&knowledge_lines(&items), TOOL_RESULT_LIMIT);
        assert!(s.ends_with(TRUNCATION_MARKER));
        assert!(s.chars().count() <= TOOL_RESULT_LIMIT + TRUNCATION_MARKER.chars().count());
        let single = bounded(&knowledge_lines(&[item("big", &"é".repeat(5000))]), TOOL_RESULT_LIMIT);
        assert_eq!(
            single.chars().count(),
            TOOL_RESULT_LIMIT + TRUNCATION_MARKER.chars().count()
        );
    }

    proptest! {
        #[test]
        fn escape_round_trips(s in "[a-z\\\\\t\n\r ]{0,40}") {
            let e = escape_field(&s);
            prop_assert!(!e.contains('\t') && !e.contains('\n'));
            prop_assert_eq!(unescape_field(&e), s);
        }

        #[test]
        fn bounded_never_exceeds_limit(lens in prop::collection::vec(0usize..500, 0..20), limit in 1usize..3000) {
            let lines: Vec<String> = lens.iter().map(|&n| "y".repeat(n)).collect();
            let s = bounded(&lines, limit);
            prop_assert!(s.chars().count() <= limit.max(NO_RESULTS.len()) + TRUNCATION_MARKER.chars().count());
        }
    }
}
