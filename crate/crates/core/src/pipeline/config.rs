use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::TASK_INST_QA;
use crate::chunking::{tokenizer, TokenizerId};
use crate::llm::Role;
use crate::memory::MemoryBudget;

use super::PipelineError;

/// Model id per role, with a fallback for roles not listed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleModels {
    pub default: String,
    #[serde(default)]
    pub overrides: BTreeMap<Role, String>,
}

impl RoleModels {
    pub fn uniform(model: impl Into<String>) -> Self {
        Self {
            default: model.into(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn model_for(&self, role: Role) -> &str {
        self.overrides.get(&role).unwrap_or(&self.default)
    }
}

impl Default for RoleModels {
    fn default() -> Self {
        Self::uniform("gpt-4.1")
    }
}

/// Everything that determines a run, echoed as the first trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: String,
    pub chunk_size: usize,
    pub budget: MemoryBudget,
    pub tc_limit: usize,
    pub models: RoleModels,
    pub tokenizer: TokenizerId,
    /// Re-asks after an unparseable reply.
    pub retry_max: u32,
    pub question_cap: usize,
    /// Oldest inferred facts beyond this many are dropped. Unbounded when unset.
    pub inferred_cap: Option<usize>,
    pub task_inst: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    /// Token cap on each rolling summary of the chain-of-agents baseline.
    pub summary_cap: usize,
    /// Directory of prompt files replacing the built-in ones.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: "coma".into(),
            chunk_size: 64_000,
            budget: MemoryBudget {
                max_tokens: 8_000,
                k_fraction: 0.125,
            },
            tc_limit: 128_000,
            models: RoleModels::default(),
            tokenizer: TokenizerId::default(),
            retry_max: 2,
            question_cap: 25,
            inferred_cap: None,
            task_inst: TASK_INST_QA.into(),
            temperature: 0.0,
            max_output_tokens: 8192,
            summary_cap: 8_000,
            prompt_dir: None,
        }
    }
}

impl RunConfig {
    /// Same configuration with a memory budget of `k * chunk_size` tokens.
    pub fn with_chunk_size(mut self, chunk_size: usize, k_fraction: f64) -> Result<Self, PipelineError> {
        self.chunk_size = chunk_size;
        self.budget = MemoryBudget::from_fraction(k_fraction, chunk_size)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive".into());
        }
        if self.budget.max_tokens == 0 {
            return bad("memory budget must be positive".into());
        }
        if self.budget.max_tokens > self.chunk_size {
            return bad(format!(
                "memory budget {} exceeds chunk_size {}",
                self.budget.max_tokens, self.chunk_size
            ));
        }
        if self.tc_limit == 0 {
            return bad("tc_limit must be positive".into());
        }
        if self.summary_cap == 0 {
            return bad("summary_cap must be positive".into());
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        tokenizer(&self.tokenizer)?;
        Ok(())
    }
}
