//! Pluggable tokenizers, registered by name.
//!
//! The default `rule` tokenizer is fully specified so that token budgets are
//! reproducible without any provider vocabulary:
//!
//! * whitespace (`char::is_whitespace`) separates tokens and is never part of one;
//! * a maximal run of alphanumeric characters (`char::is_alphanumeric`) is one token;
//! * every other character is a token on its own.
//!
//! So `"Don't stop."` is `Don`, `'`, `t`, `stop`, `.` (5 tokens).
//!
//! The `whitespace` tokenizer counts maximal runs of non-whitespace.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ChunkingError;

/// Name under which a tokenizer is registered.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizerId(pub String);

impl TokenizerId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for TokenizerId {
    fn default() -> Self {
        Self(RuleTokenizer::NAME.to_string())
    }
}

impl fmt::Display for TokenizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A deterministic text tokenizer.
///
/// Implementations must be local: the tokens of `text[a..b]`, where `a` and `b`
/// are token starts (or the text ends), are exactly the tokens of `text` lying
/// in that range. Segmentation relies on this to keep chunk counts exact.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Byte ranges of every token, in order.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// Default rule-based tokenizer (see module docs).
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleTokenizer;

impl RuleTokenizer {
    pub const NAME: &'static str = "rule";
}

impl Tokenizer for RuleTokenizer {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(start) = word_start.take() {
                spans.push(start..i);
            }
            if !ch.is_whitespace() {
                spans.push(i..i + ch.len_utf8());
            }
        }
        if let Some(start) = word_start {
            spans.push(start..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Splits on whitespace only.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceTokenizer;

impl WhitespaceTokenizer {
    pub const NAME: &'static str = "whitespace";
}

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            match (ch.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Name → tokenizer lookup.
pub struct TokenizerRegistry {
    entries: Vec<Arc<dyn Tokenizer>>,
}

impl TokenizerRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Replaces any tokenizer already registered under the same name.
    pub fn register(&mut self, tokenizer: Arc<dyn Tokenizer>) {
        self.entries.retain(|t| t.name() != tokenizer.name());
        self.entries.push(tokenizer);
    }

    pub fn get(&self, id: &TokenizerId) -> Result<Arc<dyn Tokenizer>, ChunkingError> {
        let wanted = match id.as_str() {
            "default" => RuleTokenizer::NAME,
            other => other,
        };
        self.entries
            .iter()
            .find(|t| t.name() == wanted)
            .cloned()
            .ok_or_else(|| ChunkingError::UnknownTokenizer(id.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|t| t.name()).collect()
    }
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut registry = Self::empty();
        registry.register(Arc::new(RuleTokenizer));
        registry.register(Arc::new(WhitespaceTokenizer));
        registry
    }
}

/// Looks up a tokenizer in the default registry.
pub fn tokenizer(id: &TokenizerId) -> Result<Arc<dyn Tokenizer>, ChunkingError> {
    TokenizerRegistry::default().get(id)
}

/// Counts tokens of `text` under the tokenizer registered as `id`.
pub fn count_tokens(text: &str, id: &TokenizerId) -> Result<usize, ChunkingError> {
    Ok(tokenizer(id)?.count(text))
}
