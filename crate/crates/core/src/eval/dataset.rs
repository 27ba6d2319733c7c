//! JSON-lines QA datasets.
//!
//! One object per line: `id`, `context`, `input` or `question`, `answers`
//! (list or string) or `answer`, and optionally `options`. Other fields are
//! kept in `meta`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::chunking::Tokenizer;

use super::metrics::{normalize_answer, option_label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl QaExample {
    pub fn is_multiple_choice(&self) -> bool {
        self.options.is_some()
    }

    /// The question followed by labelled options, as sent to the model.
    pub fn prompt_query(&self) -> String {
        match &self.options {
            None => self.question.clone(),
            Some(opts) => {
                let mut q = format!("{}\n\nOptions:", self.question);
                for (i, o) in opts.iter().enumerate() {
                    q.push_str(&format!("\n{}) {}", option_label(i), o));
                }
                q
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// A loaded dataset and the rows passed over with `skip_bad`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedDataset {
    pub examples: Vec<QaExample>,
    /// `(line, message)` of each skipped row.
    pub skipped: Vec<(usize, String)>,
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(format!("field `{key}` must be a string, got {other}")),
    }
}

fn string_list(v: &Value, key: &str) -> Result<Vec<String>, String> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(format!("`{key}` entries must be strings, got {other}")),
            })
            .collect(),
        other => Err(format!("`{key}` must be a string or list, got {other}")),
    }
}

/// Parses one dataset row.
pub fn parse_example(line: &str) -> Result<QaExample, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let Value::Object(mut obj) = value else {
        return Err("row is not a JSON object".into());
    };
    let id = string_field(&obj, "id")?.ok_or("missing `id`")?;
    let context = string_field(&obj, "context")?.ok_or("missing `context`")?;
    let question = match string_field(&obj, "input")? {
        Some(q) => q,
        None => string_field(&obj, "question")?.ok_or("missing `input` or `question`")?,
    };
    let golds = match obj.get("answers").or_else(|| obj.get("answer")) {
        Some(v) => string_list(v, "answers")?,
        None => return Err("missing `answers`".into()),
    };
    let gold_answers: Vec<String> = golds.into_iter().filter(|g| !g.trim().is_empty()).collect();
    if gold_answers.is_empty() {
        return Err("no non-empty gold answer".into());
    }
    let options = match obj.get("options") {
        None | Some(Value::Null) => None,
        Some(v) => Some(string_list(v, "options")?),
    };
    if let Some(opts) = &options {
        let matching = opts
            .iter()
            .enumerate()
            .filter(|(i, o)| {
                gold_answers.iter().any(|g| {
                    normalize_answer(g) == normalize_answer(o) || g.trim() == option_label(*i).to_string()
                })
            })
            .count();
        if matching != 1 {
            return Err(format!("options must contain exactly one gold answer, found {matching}"));
        }
    }
    for key in ["id", "context", "input", "question", "answers", "answer", "options"] {
        obj.remove(key);
    }
    Ok(QaExample {
        id,
        context,
        question,
        gold_answers,
        options,
        meta: obj.into_iter().collect(),
    })
}

/// Reads a JSON-lines dataset. Blank lines are ignored. A malformed row
/// aborts the load unless `skip_bad`, in which case it is recorded and skipped.
pub fn load_dataset(path: &Path, skip_bad: bool) -> Result<LoadedDataset, DatasetError> {
    let shown = path.display().to_string();
    let io = |source| DatasetError::Io {
        path: shown.clone(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = LoadedDataset::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                let message = "invalid UTF-8".to_string();
                if skip_bad {
                    out.skipped.push((lineno, message));
                    continue;
                }
                return Err(DatasetError::Malformed {
                    path: shown.clone(),
                    line: lineno,
                    message,
                });
            }
            Err(e) => return Err(io(e)),
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_example(&line) {
            Ok(ex) => out.examples.push(ex),
            Err(message) if skip_bad => out.skipped.push((lineno, message)),
            Err(message) => {
                return Err(DatasetError::Malformed {
                    path: shown.clone(),
                    line: lineno,
                    message,
                })
            }
        }
    }
    Ok(out)
}

/// Keeps examples whose context has at least `min_tokens` tokens.
pub fn filter_min_context(examples: Vec<QaExample>, min_tokens: usize, tokenizer: &dyn Tokenizer) -> Vec<QaExample> {
    examples
        .into_iter()
        .filter(|e| tokenizer.count(&e.context) >= min_tokens)
        .collect()
}
