//! Text form of the memory used inside prompts, and the lenient reader for
//! model replies written in the same shape.
//!
//! The format is a YAML subset: four top-level keys in a fixed order, each
//! list rendered as a block sequence of double-quoted strings (`[]` when
//! empty) and the answer as one double-quoted scalar. Strings are quoted with
//! JSON escaping, which is also valid YAML.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Memory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKey {
    Questions,
    GatheredFacts,
    InferredFacts,
    Answer,
}

impl MemoryKey {
    pub const ALL: [MemoryKey; 4] = [
        MemoryKey::Questions,
        MemoryKey::GatheredFacts,
        MemoryKey::InferredFacts,
        MemoryKey::Answer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKey::Questions => "questions",
            MemoryKey::GatheredFacts => "gathered_facts",
            MemoryKey::InferredFacts => "inferred_facts",
            MemoryKey::Answer => "answer",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == key)
    }
}

impl fmt::Display for MemoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("none of the expected keys ({expected}) found in reply")]
pub struct ParseFailure {
    pub expected: String,
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn write_list<'a>(out: &mut String, key: MemoryKey, items: impl Iterator<Item = &'a str>) {
    let mut items = items.peekable();
    if items.peek().is_none() {
        let _ = writeln!(out, "{key}: []");
        return;
    }
    let _ = writeln!(out, "{key}:");
    for item in items {
        let _ = writeln!(out, "  - {}", quote(item));
    }
}

/// Renders the memory in its prompt/trace form. Byte-for-byte deterministic.
pub fn serialize_memory(memory: &Memory) -> String {
    let mut out = String::new();
    write_list(&mut out, MemoryKey::Questions, memory.questions.iter().map(|q| q.text.as_str()));
    write_list(&mut out, MemoryKey::GatheredFacts, memory.gathered.iter().map(|f| f.text.as_str()));
    write_list(&mut out, MemoryKey::InferredFacts, memory.inferred.iter().map(|f| f.text.as_str()));
    let _ = write!(out, "{}: {}", MemoryKey::Answer, quote(&memory.answer));
    out
}

/// Pulls the lists for `expected` keys out of a model reply.
///
/// Code-fence lines, comments and any prose before the first key are skipped.
/// Only the first occurrence of each key counts. A scalar value becomes a
/// one-element list; empty strings are dropped. Expected keys that never
/// appear map to empty lists. Fails only when no expected key appears at all.
pub fn parse_memory_delta(
    raw: &str,
    expected: &[MemoryKey],
) -> Result<BTreeMap<MemoryKey, Vec<String>>, ParseFailure> {
    let wanted: BTreeSet<MemoryKey> = expected.iter().copied().collect();
    let mut found: BTreeMap<MemoryKey, Vec<String>> = BTreeMap::new();
    let mut current: Option<MemoryKey> = None;

    for line in raw.lines() {
        let t = line.trim();
        if t.starts_with("```") || t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t == "-" || t.starts_with("- ") {
            if let Some(key) = current {
                let value = parse_scalar(t[1..].trim_start());
                if !value.is_empty() {
                    found.entry(key).or_default().push(value);
                }
            }
            continue;
        }
        current = None;
        let Some((name, rest)) = split_key(t) else {
            continue;
        };
        let Some(key) = MemoryKey::from_key(name) else {
            continue;
        };
        if !wanted.contains(&key) || found.contains_key(&key) {
            continue;
        }
        let values = found.entry(key).or_default();
        let rest = rest.trim();
        if rest.is_empty() {
            current = Some(key);
        } else if rest.starts_with('[') {
            values.extend(parse_flow_list(rest));
        } else {
            let value = parse_scalar(rest);
            if !value.is_empty() {
                values.push(value);
            }
        }
    }

    if found.is_empty() {
        return Err(ParseFailure {
            expected: expected
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        });
    }
    for key in wanted {
        found.entry(key).or_default();
    }
    Ok(found)
}

/// `identifier: rest`; the identifier is ASCII word characters.
fn split_key(line: &str) -> Option<(&str, &str)> {
    let colon = line.find(':')?;
    let name = &line[..colon];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name, &line[colon + 1..]))
}

/// Returns the byte length of a double-quoted string starting at `s[0]`,
/// including both quotes, if it is closed.
fn double_quoted_len(s: &str) -> Option<usize> {
    let mut escaped = false;
    for (i, ch) in s.char_indices().skip(1) {
        match ch {
            _ if escaped => escaped = false,
            '\\' => escaped = true,
            '"' => return Some(i + 1),
            _ => {}
        }
    }
    None
}

/// Parses a single-quoted string at `s[0]`; returns (value, consumed bytes).
fn single_quoted(s: &str) -> (String, usize) {
    let mut out = String::new();
    let mut chars = s.char_indices().skip(1).peekable();
    while let Some((i, ch)) = chars.next() {
        if ch == '\'' {
            if let Some(&(_, '\'')) = chars.peek() {
                chars.next();
                out.push('\'');
                continue;
            }
            return (out, i + 1);
        }
        out.push(ch);
    }
    (out, s.len())
}

fn parse_scalar(s: &str) -> String {
    let s = s.trim();
    if let Some(body) = s.strip_prefix('"') {
        return match double_quoted_len(s) {
            Some(len) => serde_json::from_str::<String>(&s[..len])
                .unwrap_or_else(|_| s[1..len - 1].to_string()),
            None => body.trim_end_matches('"').to_string(),
        };
    }
    if s.starts_with('\'') {
        return single_quoted(s).0;
    }
    let plain = match s.find(" #") {
        Some(i) => &s[..i],
        None => s,
    };
    plain.trim().to_string()
}

fn parse_flow_list(s: &str) -> Vec<String> {
    let inner = s.strip_prefix('[').unwrap_or(s);
    let mut items = Vec::new();
    let mut rest = inner;
    loop {
        rest = rest.trim_start();
        if rest.is_empty() || rest.starts_with(']') {
            break;
        }
        let (value, used) = if rest.starts_with('"') {
            let len = double_quoted_len(rest).unwrap_or(rest.len());
            (parse_scalar(&rest[..len]), len)
        } else if rest.starts_with('\'') {
            single_quoted(rest)
        } else {
            let end = rest.find([',', ']']).unwrap_or(rest.len());
            (rest[..end].trim().to_string(), end)
        };
        if !value.is_empty() {
            items.push(value);
        }
        rest = rest[used..].trim_start();
        match rest.strip_prefix(',') {
            Some(r) => rest = r,
            None => break,
        }
    }
    items
}
