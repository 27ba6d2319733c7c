//! Prompt templates, one per role, shipped as data files.
//!
//! Placeholders are `{{name}}` for run data and `{NAME}` for the task
//! instruction slot. Rendering binds every placeholder in the template in one
//! pass, so braces inside substituted text are left alone.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptName {
    Planner,
    Extract,
    Infer,
    Refine,
    Manager,
    CoaWorker,
    CoaManager,
    TcDirect,
}

impl PromptName {
    pub const ALL: [PromptName; 8] = [
        PromptName::Planner,
        PromptName::Extract,
        PromptName::Infer,
        PromptName::Refine,
        PromptName::Manager,
        PromptName::CoaWorker,
        PromptName::CoaManager,
        PromptName::TcDirect,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptName::Planner => "planner.txt",
            PromptName::Extract => "extract.txt",
            PromptName::Infer => "infer.txt",
            PromptName::Refine => "refine.txt",
            PromptName::Manager => "manager.txt",
            PromptName::CoaWorker => "coa_worker.txt",
            PromptName::CoaManager => "coa_manager.txt",
            PromptName::TcDirect => "tc_direct.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptName::Planner => include_str!("../../prompts/planner.txt"),
            PromptName::Extract => include_str!("../../prompts/extract.txt"),
            PromptName::Infer => include_str!("../../prompts/infer.txt"),
            PromptName::Refine => include_str!("../../prompts/refine.txt"),
            PromptName::Manager => include_str!("../../prompts/manager.txt"),
            PromptName::CoaWorker => include_str!("../../prompts/reconstructed/coa_worker.txt"),
            PromptName::CoaManager => include_str!("../../prompts/reconstructed/coa_manager.txt"),
            PromptName::TcDirect => include_str!("../../prompts/reconstructed/tc_direct.txt"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template `{template:?}` has no binding for placeholder `{placeholder}`")]
    Unbound {
        template: PromptName,
        placeholder: String,
    },
    #[error("reading prompt override {path}: {message}")]
    Override { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: PromptName,
    pub body: String,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}|\{([A-Z_]+)\}").unwrap())
}

impl PromptTemplate {
    pub fn new(name: PromptName, body: impl Into<String>) -> Self {
        Self {
            name,
            body: body.into(),
        }
    }

    /// Placeholder names in order of appearance (`query`, `TASK_SPECIFIC_INST`, ...).
    pub fn placeholders(&self) -> Vec<&str> {
        placeholder_re()
            .captures_iter(&self.body)
            .map(|c| c.get(1).or_else(|| c.get(2)).unwrap().as_str())
            .collect()
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let mut last = 0;
        for caps in placeholder_re().captures_iter(&self.body) {
            let whole = caps.get(0).unwrap();
            let name = caps.get(1).or_else(|| caps.get(2)).unwrap().as_str();
            let value = bindings
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::Unbound {
                    template: self.name,
                    placeholder: name.to_string(),
                })?;
            out.push_str(&self.body[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// The full set of templates used by all methods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            templates: PromptName::ALL
                .iter()
                .map(|&n| PromptTemplate::new(n, n.builtin()))
                .collect(),
        }
    }

    /// Built-in templates with any `<name>.txt` found in `dir` taking their place.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for t in &mut set.templates {
            let path = dir.join(t.name.file_name());
            if path.exists() {
                t.body = std::fs::read_to_string(&path).map_err(|e| PromptError::Override {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: PromptName) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .expect("every prompt name has a template")
    }

    pub fn set(&mut self, template: PromptTemplate) {
        if let Some(slot) = self.templates.iter_mut().find(|t| t.name == template.name) {
            *slot = template;
        }
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}
