//! Planner, worker phases (extract, infer, refine) and manager.
//!
//! Each driver renders its template, calls the model, records the exchange in
//! the trace and parses the reply. Unparseable replies are re-asked up to
//! `retry_max` times with [`REASK_LINE`] appended; after that each driver falls
//! back to a state that leaves memory as it was (see the individual methods).

mod prompts;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chunking::Chunk;
use crate::llm::{LlmClient, LlmError, LlmRequest, Role};
use crate::memory::{parse_memory_delta, serialize_memory, Memory, MemoryKey};
use crate::pipeline::RunConfig;
use crate::trace::{RunTrace, TraceEvent};

pub use prompts::{PromptError, PromptName, PromptSet, PromptTemplate};

pub const REASK_LINE: &str =
    "Your previous reply was not parseable; respond with the keys only.";

/// Default `{TASK_SPECIFIC_INST}` for free-form questions.
pub const TASK_INST_QA: &str = "Answer concisely.";
/// Default `{TASK_SPECIFIC_INST}` for multiple-choice questions.
pub const TASK_INST_MC: &str = "Answer with the text of exactly one of the provided options.";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Items an agent proposes for one memory field, with the reply they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentDelta {
    pub kind: MemoryKey,
    pub items: Vec<String>,
    pub raw: String,
}

struct Reply {
    parsed: Option<BTreeMap<MemoryKey, Vec<String>>>,
    raw: String,
}

/// Agent drivers bound to one client, prompt set and configuration.
pub struct Agents<'a> {
    pub client: &'a LlmClient,
    pub prompts: &'a PromptSet,
    pub config: &'a RunConfig,
}

impl<'a> Agents<'a> {
    pub fn new(client: &'a LlmClient, prompts: &'a PromptSet, config: &'a RunConfig) -> Self {
        Self {
            client,
            prompts,
            config,
        }
    }

    pub fn request(&self, role: Role, user: String) -> LlmRequest {
        LlmRequest {
            model: self.config.models.model_for(role).to_string(),
            system: String::new(),
            user,
            temperature: self.config.temperature,
            max_output_tokens: self.config.max_output_tokens,
            role,
        }
    }

    /// One call, no parsing. Used by the baselines.
    pub fn call_once(
        &self,
        trace: &mut RunTrace,
        role: Role,
        chunk: Option<usize>,
        prompt: String,
    ) -> Result<String, LlmError> {
        let request = self.request(role, prompt);
        let response = self.client.complete(&request)?;
        trace.record_exchange(&request, &response, chunk, 0);
        Ok(response.text)
    }

    fn ask(
        &self,
        trace: &mut RunTrace,
        role: Role,
        chunk: Option<usize>,
        prompt: &str,
        keys: &[MemoryKey],
        accept: impl Fn(&BTreeMap<MemoryKey, Vec<String>>) -> bool,
    ) -> Result<Reply, LlmError> {
        let mut raw = String::new();
        for attempt in 0..=self.config.retry_max {
            let user = if attempt == 0 {
                prompt.to_string()
            } else {
                format!("{prompt}\n\n{REASK_LINE}")
            };
            let request = self.request(role, user);
            let response = self.client.complete(&request)?;
            trace.record_exchange(&request, &response, chunk, attempt);
            raw = response.text;
            if let Ok(parsed) = parse_memory_delta(&raw, keys) {
                if accept(&parsed) {
                    return Ok(Reply {
                        parsed: Some(parsed),
                        raw,
                    });
                }
            }
        }
        Ok(Reply { parsed: None, raw })
    }

    fn record_delta(trace: &mut RunTrace, role: Role, chunk: Option<usize>, delta: &AgentDelta) {
        trace.push(TraceEvent::Delta {
            role,
            chunk,
            kind: delta.kind,
            items: delta.items.clone(),
        });
    }

    /// Sub-questions for `query`, capped at the configured question cap.
    /// Falls back to the query itself as the only question.
    pub fn plan(&self, trace: &mut RunTrace, query: &str) -> Result<Vec<String>, AgentError> {
        let prompt = self
            .prompts
            .get(PromptName::Planner)
            .render(&[("query", query)])?;
        let reply = self.ask(trace, Role::Planner, None, &prompt, &[MemoryKey::Questions], |_| true)?;
        let mut items = match reply.parsed {
            Some(mut p) => p.remove(&MemoryKey::Questions).unwrap_or_default(),
            None => {
                trace.warn(
                    Some(Role::Planner),
                    None,
                    "planner reply unparseable after retries; using the query as the only question",
                );
                vec![query.to_string()]
            }
        };
        items.truncate(self.config.question_cap);
        Self::record_delta(
            trace,
            Role::Planner,
            None,
            &AgentDelta {
                kind: MemoryKey::Questions,
                items: items.clone(),
                raw: reply.raw,
            },
        );
        Ok(items)
    }

    /// Candidate gathered facts from `chunk`. Empty on parse failure.
    pub fn extract(
        &self,
        trace: &mut RunTrace,
        chunk: &Chunk,
        memory: &Memory,
        query: &str,
    ) -> Result<AgentDelta, AgentError> {
        let memory_text = serialize_memory(memory);
        let prompt = self.prompts.get(PromptName::Extract).render(&[
            ("query", query),
            ("chunk", &chunk.text),
            ("memory", &memory_text),
        ])?;
        self.list_phase(trace, Role::Extract, Some(chunk.index), &prompt, MemoryKey::GatheredFacts)
    }

    /// New inferred claims over the gathered and inferred facts. Empty on parse failure.
    pub fn infer(
        &self,
        trace: &mut RunTrace,
        memory: &Memory,
        query: &str,
        chunk: Option<usize>,
    ) -> Result<AgentDelta, AgentError> {
        let memory_text = serialize_memory(memory);
        let prompt = self
            .prompts
            .get(PromptName::Infer)
            .render(&[("query", query), ("memory", &memory_text)])?;
        self.list_phase(trace, Role::Infer, chunk, &prompt, MemoryKey::InferredFacts)
    }

    fn list_phase(
        &self,
        trace: &mut RunTrace,
        role: Role,
        chunk: Option<usize>,
        prompt: &str,
        key: MemoryKey,
    ) -> Result<AgentDelta, AgentError> {
        let reply = self.ask(trace, role, chunk, prompt, &[key], |_| true)?;
        let items = match reply.parsed {
            Some(mut p) => p.remove(&key).unwrap_or_default(),
            None => {
                trace.warn(
                    Some(role),
                    chunk,
                    format!("{role} reply unparseable after retries; no {key} added"),
                );
                Vec::new()
            }
        };
        let delta = AgentDelta {
            kind: key,
            items,
            raw: reply.raw,
        };
        Self::record_delta(trace, role, chunk, &delta);
        Ok(delta)
    }

    /// The complete replacement question list, or `None` (keep the current
    /// questions) when the reply cannot be parsed.
    pub fn refine(
        &self,
        trace: &mut RunTrace,
        memory: &Memory,
        query: &str,
        chunk: Option<usize>,
    ) -> Result<Option<Vec<String>>, AgentError> {
        let memory_text = serialize_memory(memory);
        let prompt = self
            .prompts
            .get(PromptName::Refine)
            .render(&[("query", query), ("memory", &memory_text)])?;
        let reply = self.ask(trace, Role::Refine, chunk, &prompt, &[MemoryKey::Questions], |_| true)?;
        let Some(mut parsed) = reply.parsed else {
            trace.warn(
                Some(Role::Refine),
                chunk,
                "refine reply unparseable after retries; questions unchanged",
            );
            return Ok(None);
        };
        let mut items = parsed.remove(&MemoryKey::Questions).unwrap_or_default();
        items.truncate(self.config.question_cap);
        Self::record_delta(
            trace,
            Role::Refine,
            chunk,
            &AgentDelta {
                kind: MemoryKey::Questions,
                items: items.clone(),
                raw: reply.raw,
            },
        );
        Ok(Some(items))
    }

    /// The final answer from memory. If no reply yields a non-empty `answer`
    /// the raw text of the last reply is used.
    pub fn synthesize(
        &self,
        trace: &mut RunTrace,
        memory: &Memory,
        query: &str,
        task_inst: &str,
    ) -> Result<String, AgentError> {
        let memory_text = serialize_memory(memory);
        let prompt = self.prompts.get(PromptName::Manager).render(&[
            ("query", query),
            ("memory", &memory_text),
            ("TASK_SPECIFIC_INST", task_inst),
        ])?;
        let reply = self.ask(trace, Role::Manager, None, &prompt, &[MemoryKey::Answer], |p| {
            p.get(&MemoryKey::Answer).is_some_and(|a| !a.is_empty())
        })?;
        let answer = match reply.parsed {
            Some(p) => p[&MemoryKey::Answer].join(" "),
            None => {
                trace.warn(
                    Some(Role::Manager),
                    None,
                    "manager reply unparseable after retries; using raw reply as the answer",
                );
                reply.raw.trim().to_string()
            }
        };
        Self::record_delta(
            trace,
            Role::Manager,
            None,
            &AgentDelta {
                kind: MemoryKey::Answer,
                items: vec![answer.clone()],
                raw: reply.raw,
            },
        );
        Ok(answer)
    }
}

/// The `answer:` value of a reply if it has one, else the trimmed reply.
pub fn answer_from_reply(raw: &str) -> String {
    parse_memory_delta(raw, &[MemoryKey::Answer])
        .ok()
        .and_then(|mut p| p.remove(&MemoryKey::Answer))
        .filter(|a| !a.is_empty())
        .map(|a| a.join(" "))
        .unwrap_or_else(|| raw.trim().to_string())
}
