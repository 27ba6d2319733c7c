#![allow(dead_code)]

use std::sync::Arc;

use coma_core::agents::PromptSet;
use coma_core::llm::{LlmClient, LlmRequest, RetryPolicy, Role, ScriptedBackend};
use coma_core::memory::MemoryBudget;
use coma_core::pipeline::RunConfig;

/// Text between `start` and `end` in `hay`.
pub fn between<'a>(hay: &'a str, start: &str, end: &str) -> &'a str {
    let from = hay.find(start).map(|i| i + start.len()).unwrap_or(0);
    let to = hay[from..].find(end).map(|i| from + i).unwrap_or(hay.len());
    &hay[from..to]
}

pub fn chunk_of(prompt: &str) -> &str {
    between(prompt, "CONTEXT_CHUNK: ", "\nCURRENT_MEMORY:")
}

pub fn yaml_list(key: &str, items: &[String]) -> String {
    if items.is_empty() {
        return format!("{key}: []");
    }
    let mut s = format!("{key}:");
    for i in items {
        s.push_str(&format!("\n  - {}", serde_json::to_string(i).unwrap()));
    }
    s
}

/// A well-behaved model: every sentence of a chunk containing `fact` becomes a
/// gathered fact, infer links the two newest gathered facts, refine drops the
/// first question, the manager answers "final answer".
pub fn tidy_reply(req: &LlmRequest) -> Option<String> {
    Some(match req.role {
        Role::Planner => yaml_list("questions", &["q one".into(), "q two".into(), "q three".into()]),
        Role::Extract => {
            let facts: Vec<String> = chunk_of(&req.user)
                .split_inclusive('.')
                .map(str::trim)
                .filter(|s| s.contains("fact"))
                .map(str::to_string)
                .collect();
            yaml_list("gathered_facts", &facts)
        }
        Role::Infer => {
            let n = req.user.matches("fact").count();
            yaml_list("inferred_facts", &[format!("inference over {n} mentions")])
        }
        Role::Refine => {
            let memory = between(&req.user, "CURRENT_MEMORY:\n", "\u{0}");
            let qs: Vec<String> = between(memory, "questions:", "gathered_facts:")
                .lines()
                .filter_map(|l| l.trim().strip_prefix("- "))
                .skip(1)
                .map(|q| serde_json::from_str(q).unwrap())
                .collect();
            yaml_list("questions", &qs)
        }
        Role::Manager => "answer: \"final answer\"".into(),
        Role::CoaWorker => format!("Summary of the Source Text and Previous Context:\n{}", chunk_summary(&req.user)),
        Role::TcDirect => "answer: \"direct\"".into(),
    })
}

fn chunk_summary(prompt: &str) -> String {
    let chunk = between(prompt, "SOURCE_TEXT:\n", "\n\nWrite an updated summary");
    chunk.split_whitespace().take(5).collect::<Vec<_>>().join(" ")
}

pub fn tidy_client() -> LlmClient {
    LlmClient::new(Arc::new(ScriptedBackend::from_fn(tidy_reply))).with_retry(RetryPolicy::none())
}

pub fn small_config(method: &str, chunk_size: usize, budget: usize) -> RunConfig {
    RunConfig {
        method: method.into(),
        chunk_size,
        budget: MemoryBudget::from_tokens(budget, chunk_size).unwrap(),
        tc_limit: chunk_size,
        summary_cap: chunk_size,
        ..RunConfig::default()
    }
}

/// `sentences` sentences of eight words; every third one carries a fact.
pub fn document(sentences: usize) -> String {
    (0..sentences)
        .map(|i| {
            if i % 3 == 0 {
                format!("Here fact number {i} is stated for the record.")
            } else {
                format!("Sentence {i} is filler with no useful content.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn prompts() -> PromptSet {
    PromptSet::builtin()
}
