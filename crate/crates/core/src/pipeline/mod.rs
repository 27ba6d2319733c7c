//! The three methods behind one [`Method`] trait, selected by name from a
//! [`MethodRegistry`].
//!
//! | method | calls for `L` chunks |
//! |--------|----------------------|
//! | `coma` | `3L + 2`             |
//! | `coa`  | `L + 1`              |
//! | `tc`   | `1`                  |

mod config;

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::agents::{answer_from_reply, AgentError, Agents, PromptName, PromptSet};
use crate::chunking::{segment, tokenizer, truncate_head, truncate_middle, ChunkingError, Tokenizer};
use crate::llm::{LlmClient, LlmError, Role};
use crate::memory::{BudgetError, Memory, QuestionOrigin};
use crate::trace::{Phase, RunTrace, TraceEvent};

pub use config::{RoleModels, RunConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("document is empty")]
    EmptyDocument,
    #[error("query is empty")]
    EmptyQuery,
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Chunking(#[from] ChunkingError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

impl PipelineError {
    /// The model backend error underneath, if any.
    pub fn llm(&self) -> Option<&LlmError> {
        match self {
            PipelineError::Llm(e) | PipelineError::Agent(AgentError::Llm(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub answer: String,
    pub trace: RunTrace,
}

/// A failed run together with everything it recorded, ending in an error event.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: PipelineError,
    pub trace: RunTrace,
}

/// What a method needs besides the query and document.
#[derive(Clone, Copy)]
pub struct RunEnv<'a> {
    pub client: &'a LlmClient,
    pub prompts: &'a PromptSet,
    pub config: &'a RunConfig,
}

pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;

    /// Logical model calls (re-asks excluded) for a document of `chunks` chunks.
    fn expected_calls(&self, chunks: usize) -> u64;

    fn run(&self, query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure>;
}

pub struct Coma;
pub struct Coa;
pub struct Tc;

impl Method for Coma {
    fn name(&self) -> &'static str {
        "coma"
    }

    fn expected_calls(&self, chunks: usize) -> u64 {
        3 * chunks as u64 + 2
    }

    fn run(&self, query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
        execute(query, document, env, |trace, tok| coma_body(query, document, env, tok, trace))
    }
}

impl Method for Coa {
    fn name(&self) -> &'static str {
        "coa"
    }

    fn expected_calls(&self, chunks: usize) -> u64 {
        chunks as u64 + 1
    }

    fn run(&self, query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
        execute(query, document, env, |trace, tok| coa_body(query, document, env, tok, trace))
    }
}

impl Method for Tc {
    fn name(&self) -> &'static str {
        "tc"
    }

    fn expected_calls(&self, _chunks: usize) -> u64 {
        1
    }

    fn run(&self, query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
        execute(query, document, env, |trace, tok| tc_body(query, document, env, tok, trace))
    }
}

pub struct MethodRegistry {
    methods: Vec<Arc<dyn Method>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self { methods: Vec::new() }
    }

    /// Registers `method`, replacing any method of the same name.
    pub fn register(&mut self, method: Arc<dyn Method>) {
        self.methods.retain(|m| m.name() != method.name());
        self.methods.push(method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Method>, PipelineError> {
        self.methods
            .iter()
            .find(|m| m.name() == name)
            .cloned()
            .ok_or_else(|| PipelineError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.iter().map(|m| m.name()).collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Coma));
        r.register(Arc::new(Coa));
        r.register(Arc::new(Tc));
        r
    }
}

/// Expected logical calls of a built-in method, `None` for unknown names.
pub fn expected_calls(method: &str, chunks: usize) -> Option<u64> {
    MethodRegistry::default()
        .get(method)
        .ok()
        .map(|m| m.expected_calls(chunks))
}

/// Runs the method named by `env.config.method`.
pub fn run(query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
    match MethodRegistry::default().get(&env.config.method) {
        Ok(m) => m.run(query, document, env),
        Err(error) => Err(fail_early(env.config, error)),
    }
}

pub fn run_coma(query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
    Coma.run(query, document, env)
}

pub fn run_coa(query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
    Coa.run(query, document, env)
}

pub fn run_tc(query: &str, document: &str, env: &RunEnv<'_>) -> Result<RunOutput, RunFailure> {
    Tc.run(query, document, env)
}

fn fail_early(config: &RunConfig, error: PipelineError) -> RunFailure {
    let mut trace = RunTrace::new();
    trace.push(TraceEvent::Config { config: config.clone() });
    trace.push(TraceEvent::Error {
        message: error.to_string(),
    });
    RunFailure { error, trace }
}

fn execute<F>(query: &str, document: &str, env: &RunEnv<'_>, body: F) -> Result<RunOutput, RunFailure>
where
    F: FnOnce(&mut RunTrace, &dyn Tokenizer) -> Result<String, PipelineError>,
{
    let started = Instant::now();
    let checked = env
        .config
        .validate()
        .and_then(|_| {
            if query.trim().is_empty() {
                Err(PipelineError::EmptyQuery)
            } else if document.is_empty() {
                Err(PipelineError::EmptyDocument)
            } else {
                Ok(())
            }
        })
        .and_then(|_| Ok(tokenizer(&env.config.tokenizer)?));
    let tok = match checked {
        Ok(tok) => tok,
        Err(error) => return Err(fail_early(env.config, error)),
    };

    let mut trace = RunTrace::new();
    trace.push(TraceEvent::Config {
        config: env.config.clone(),
    });
    match body(&mut trace, &*tok) {
        Ok(answer) => {
            trace.push(TraceEvent::Final {
                answer: answer.clone(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
            Ok(RunOutput { answer, trace })
        }
        Err(error) => {
            trace.push(TraceEvent::Error {
                message: error.to_string(),
            });
            Err(RunFailure { error, trace })
        }
    }
}

fn coma_body(
    query: &str,
    document: &str,
    env: &RunEnv<'_>,
    tok: &dyn Tokenizer,
    trace: &mut RunTrace,
) -> Result<String, PipelineError> {
    let cfg = env.config;
    let chunks = segment(document, cfg.chunk_size, tok)?;
    trace.push(TraceEvent::RunStart {
        method: Coma.name().into(),
        query: query.into(),
        chunks: chunks.len(),
        document_tokens: tok.count(document),
    });
    let agents = Agents::new(env.client, env.prompts, cfg);

    let questions = agents.plan(trace, query)?;
    let mut memory = Memory::new(&questions);
    trace.snapshot(Phase::Plan, None, &memory);

    for chunk in &chunks {
        let at = Some(chunk.index);

        let delta = agents.extract(trace, chunk, &memory, query)?;
        let (pruned, report) = memory
            .append_gathered(&delta.items, at, tok)
            .prune(&cfg.budget);
        if !report.evicted.is_empty() || report.oversized {
            trace.push(TraceEvent::Prune {
                chunk: chunk.index,
                evicted: report.evicted.iter().map(|f| f.text.clone()).collect(),
                oversized: report.oversized,
            });
        }
        if report.oversized {
            trace.warn(
                Some(Role::Extract),
                at,
                format!(
                    "newest gathered fact alone is {} tokens, over the {} token budget; evicted",
                    report.evicted.last().map_or(0, |f| f.tokens),
                    cfg.budget.max_tokens
                ),
            );
        }
        memory = pruned;
        trace.snapshot(Phase::Extract, at, &memory);

        let delta = agents.infer(trace, &memory, query, at)?;
        memory = memory.append_inferred(&delta.items, tok);
        if let Some(cap) = cfg.inferred_cap {
            memory = memory.cap_inferred(cap);
        }
        trace.snapshot(Phase::Infer, at, &memory);

        if let Some(questions) = agents.refine(trace, &memory, query, at)? {
            memory = memory.replace_questions(&questions, QuestionOrigin::Refine);
        }
        trace.snapshot(Phase::Refine, at, &memory);
    }

    let answer = agents.synthesize(trace, &memory, query, &cfg.task_inst)?;
    memory = memory.with_answer(answer.clone());
    trace.snapshot(Phase::Synthesize, None, &memory);
    Ok(answer)
}

fn coa_body(
    query: &str,
    document: &str,
    env: &RunEnv<'_>,
    tok: &dyn Tokenizer,
    trace: &mut RunTrace,
) -> Result<String, PipelineError> {
    let cfg = env.config;
    let chunks = segment(document, cfg.chunk_size, tok)?;
    trace.push(TraceEvent::RunStart {
        method: Coa.name().into(),
        query: query.into(),
        chunks: chunks.len(),
        document_tokens: tok.count(document),
    });
    let agents = Agents::new(env.client, env.prompts, cfg);

    let mut summary = String::new();
    for chunk in &chunks {
        let prompt = env.prompts.get(PromptName::CoaWorker).render(&[
            ("query", query),
            ("summary", &summary),
            ("chunk", &chunk.text),
        ])?;
        let reply = agents.call_once(trace, Role::CoaWorker, Some(chunk.index), prompt)?;
        let (text, truncated) = truncate_head(reply.trim(), cfg.summary_cap, tok);
        if truncated {
            trace.warn(
                Some(Role::CoaWorker),
                Some(chunk.index),
                format!("summary cut to the {} token cap", cfg.summary_cap),
            );
        }
        trace.push(TraceEvent::Summary {
            chunk: chunk.index,
            tokens: tok.count(&text),
            truncated,
            text: text.clone(),
        });
        summary = text;
    }

    let prompt = env.prompts.get(PromptName::CoaManager).render(&[
        ("summary", &summary),
        ("query", query),
        ("TASK_SPECIFIC_INST", &cfg.task_inst),
    ])?;
    let reply = agents.call_once(trace, Role::Manager, None, prompt)?;
    Ok(answer_from_reply(&reply))
}

fn tc_body(
    query: &str,
    document: &str,
    env: &RunEnv<'_>,
    tok: &dyn Tokenizer,
    trace: &mut RunTrace,
) -> Result<String, PipelineError> {
    let cfg = env.config;
    let original_tokens = tok.count(document);
    trace.push(TraceEvent::RunStart {
        method: Tc.name().into(),
        query: query.into(),
        chunks: 1,
        document_tokens: original_tokens,
    });
    let kept = truncate_middle(document, cfg.tc_limit, tok)?;
    let kept_tokens = tok.count(&kept);
    if kept_tokens != original_tokens || kept != document {
        trace.push(TraceEvent::Truncation {
            original_tokens,
            kept_tokens,
        });
    }
    let agents = Agents::new(env.client, env.prompts, cfg);
    let prompt = env.prompts.get(PromptName::TcDirect).render(&[
        ("chunk", &kept),
        ("query", query),
        ("TASK_SPECIFIC_INST", &cfg.task_inst),
    ])?;
    let reply = agents.call_once(trace, Role::TcDirect, None, prompt)?;
    Ok(answer_from_reply(&reply))
}

impl From<crate::agents::PromptError> for PipelineError {
    fn from(e: crate::agents::PromptError) -> Self {
        PipelineError::Agent(AgentError::Prompt(e))
    }
}
