//! The centralized structured memory: open questions, gathered facts,
//! inferred facts and the final answer.
//!
//! Values are immutable snapshots; every update returns a new [`Memory`].

mod format;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::Tokenizer;

pub use format::{parse_memory_delta, serialize_memory, MemoryKey, ParseFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrigin {
    Planner,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub origin: QuestionOrigin,
    pub seq: u64,
}

/// `source_chunk` is `None` for facts that did not come from a chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub text: String,
    pub source_chunk: Option<usize>,
    pub seq: u64,
    pub tokens: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("memory budget must be positive (k = {k_fraction}, chunk size = {chunk_size})")]
    NonPositive { k_fraction: f64, chunk_size: usize },
    #[error("memory budget of {max_tokens} tokens exceeds the chunk size of {chunk_size}")]
    ExceedsChunk { max_tokens: usize, chunk_size: usize },
}

/// Cap on the total tokens of gathered facts, as a fraction of the chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub max_tokens: usize,
    pub k_fraction: f64,
}

impl MemoryBudget {
    /// `max_tokens = round(k * chunk_size)`.
    pub fn from_fraction(k_fraction: f64, chunk_size: usize) -> Result<Self, BudgetError> {
        let max_tokens = (k_fraction * chunk_size as f64).round();
        if max_tokens.is_nan() || max_tokens < 1.0 {
            return Err(BudgetError::NonPositive { k_fraction, chunk_size });
        }
        Self::checked(max_tokens as usize, k_fraction, chunk_size)
    }

    pub fn from_tokens(max_tokens: usize, chunk_size: usize) -> Result<Self, BudgetError> {
        if max_tokens == 0 || chunk_size == 0 {
            return Err(BudgetError::NonPositive {
                k_fraction: 0.0,
                chunk_size,
            });
        }
        Self::checked(max_tokens, max_tokens as f64 / chunk_size as f64, chunk_size)
    }

    fn checked(max_tokens: usize, k_fraction: f64, chunk_size: usize) -> Result<Self, BudgetError> {
        if max_tokens > chunk_size {
            return Err(BudgetError::ExceedsChunk {
                max_tokens,
                chunk_size,
            });
        }
        Ok(Self {
            max_tokens,
            k_fraction,
        })
    }
}

/// What a prune removed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneReport {
    pub evicted: Vec<Fact>,
    /// The newest fact alone was over budget, so nothing survived.
    pub oversized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Memory {
    pub questions: Vec<Question>,
    pub gathered: Vec<Fact>,
    pub inferred: Vec<Fact>,
    pub answer: String,
    next_seq: u64,
}

/// Trims and collapses internal whitespace; the dedup key for facts and questions.
pub fn normalize_entry(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Memory {
    /// A fresh memory holding `questions` (as planner questions) and nothing else.
    pub fn new<S: AsRef<str>>(questions: &[S]) -> Self {
        Self::default().with_questions(questions, QuestionOrigin::Planner)
    }

    pub fn gathered_tokens(&self) -> usize {
        self.gathered.iter().map(|f| f.tokens).sum()
    }

    pub fn inferred_tokens(&self) -> usize {
        self.inferred.iter().map(|f| f.tokens).sum()
    }

    pub fn question_texts(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.text.as_str()).collect()
    }

    pub fn gathered_texts(&self) -> Vec<&str> {
        self.gathered.iter().map(|f| f.text.as_str()).collect()
    }

    pub fn inferred_texts(&self) -> Vec<&str> {
        self.inferred.iter().map(|f| f.text.as_str()).collect()
    }

    fn take_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// Set union with the current gathered facts; new facts take fresh sequence numbers.
    pub fn append_gathered<S: AsRef<str>>(
        &self,
        facts: &[S],
        source_chunk: Option<usize>,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let mut next = self.clone();
        let mut gathered = std::mem::take(&mut next.gathered);
        union_into(&mut next, &mut gathered, facts, source_chunk, tokenizer);
        next.gathered = gathered;
        next
    }

    pub fn append_inferred<S: AsRef<str>>(&self, facts: &[S], tokenizer: &dyn Tokenizer) -> Self {
        let mut next = self.clone();
        let mut inferred = std::mem::take(&mut next.inferred);
        union_into(&mut next, &mut inferred, facts, None, tokenizer);
        next.inferred = inferred;
        next
    }

    /// Replaces the whole question list. Questions already present keep their
    /// origin and sequence number; the rest are tagged `origin`.
    pub fn replace_questions<S: AsRef<str>>(&self, questions: &[S], origin: QuestionOrigin) -> Self {
        let mut next = self.clone();
        next.questions.clear();
        next.with_questions_from(questions, origin, &self.questions)
    }

    fn with_questions<S: AsRef<str>>(self, questions: &[S], origin: QuestionOrigin) -> Self {
        self.with_questions_from(questions, origin, &[])
    }

    fn with_questions_from<S: AsRef<str>>(
        mut self,
        questions: &[S],
        origin: QuestionOrigin,
        previous: &[Question],
    ) -> Self {
        let mut seen = HashSet::new();
        for raw in questions {
            let text = normalize_entry(raw.as_ref());
            if text.is_empty() || !seen.insert(text.clone()) {
                continue;
            }
            let question = match previous.iter().find(|q| q.text == text) {
                Some(q) => q.clone(),
                None => Question {
                    text,
                    origin,
                    seq: self.take_seq(),
                },
            };
            self.questions.push(question);
        }
        self
    }

    /// Evicts gathered facts oldest-first until their total fits the budget.
    ///
    /// The survivors are the longest suffix (by insertion order) whose tokens
    /// fit, which is empty when the newest fact alone is over budget. That case
    /// is reported as `oversized`.
    pub fn prune(&self, budget: &MemoryBudget) -> (Self, PruneReport) {
        let mut total = 0usize;
        let mut keep_from = self.gathered.len();
        for (i, fact) in self.gathered.iter().enumerate().rev() {
            if total + fact.tokens > budget.max_tokens {
                break;
            }
            total += fact.tokens;
            keep_from = i;
        }
        let mut next = self.clone();
        let report = PruneReport {
            evicted: next.gathered.drain(..keep_from).collect(),
            oversized: next.gathered.is_empty() && !self.gathered.is_empty(),
        };
        (next, report)
    }

    /// Drops the oldest inferred facts beyond `cap` entries.
    pub fn cap_inferred(&self, cap: usize) -> Self {
        let mut next = self.clone();
        let excess = next.inferred.len().saturating_sub(cap);
        next.inferred.drain(..excess);
        next
    }

    pub fn with_answer(&self, answer: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.answer = answer.into();
        next
    }
}

fn union_into<S: AsRef<str>>(
    memory: &mut Memory,
    list: &mut Vec<Fact>,
    facts: &[S],
    source_chunk: Option<usize>,
    tokenizer: &dyn Tokenizer,
) {
    let mut seen: HashSet<String> = list.iter().map(|f| f.text.clone()).collect();
    for raw in facts {
        let text = normalize_entry(raw.as_ref());
        if text.is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        list.push(Fact {
            tokens: tokenizer.count(&text),
            text,
            source_chunk,
            seq: memory.take_seq(),
        });
    }
}
