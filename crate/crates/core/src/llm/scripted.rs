use std::collections::{HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse, Role};
use crate::chunking::{RuleTokenizer, Tokenizer};

/// One line of a scripted reply file: a bare JSON string, or an object that
/// pins the reply to a role. A `repeat` reply is never used up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Tagged {
        #[serde(default)]
        role: Option<Role>,
        text: String,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        repeat: bool,
    },
}

#[derive(Default)]
struct Queue {
    items: VecDeque<(String, bool)>,
}

impl Queue {
    fn pop(&mut self) -> Option<String> {
        match self.items.front() {
            Some((text, true)) => Some(text.clone()),
            Some(_) => self.items.pop_front().map(|(t, _)| t),
            None => None,
        }
    }
}

type Responder = dyn Fn(&LlmRequest) -> Option<String> + Send + Sync;

enum Source {
    Queue {
        shared: Queue,
        by_role: HashMap<Role, Queue>,
    },
    Func(Box<Responder>),
}

/// Deterministic playback backend.
///
/// Replies come either from queues (a role-specific queue first, then the
/// shared one) or from a function of the request. Token counts use the rule
/// tokenizer and latency is always zero.
pub struct ScriptedBackend {
    source: Mutex<Source>,
}

impl ScriptedBackend {
    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_script(replies.into_iter().map(|s| ScriptedReply::Text(s.into())))
    }

    pub fn from_script(script: impl IntoIterator<Item = ScriptedReply>) -> Self {
        let mut shared = Queue::default();
        let mut by_role: HashMap<Role, Queue> = HashMap::new();
        for reply in script {
            match reply {
                ScriptedReply::Text(text) => shared.items.push_back((text, false)),
                ScriptedReply::Tagged { role: None, text, repeat } => shared.items.push_back((text, repeat)),
                ScriptedReply::Tagged {
                    role: Some(role),
                    text,
                    repeat,
                } => by_role.entry(role).or_default().items.push_back((text, repeat)),
            }
        }
        Self {
            source: Mutex::new(Source::Queue { shared, by_role }),
        }
    }

    /// Replies computed from each request; `None` means the script ran out.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&LlmRequest) -> Option<String> + Send + Sync + 'static,
    {
        Self {
            source: Mutex::new(Source::Func(Box::new(f))),
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        let file = std::fs::File::open(path)?;
        let mut script = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply: ScriptedReply = serde_json::from_str(&line).map_err(|e| {
                LlmError::Config(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            script.push(reply);
        }
        Ok(Self::from_script(script))
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let text = {
            let mut source = self.source.lock().unwrap();
            match &mut *source {
                Source::Queue { shared, by_role } => by_role
                    .get_mut(&request.role)
                    .and_then(Queue::pop)
                    .or_else(|| shared.pop()),
                Source::Func(f) => f(request),
            }
        }
        .ok_or(LlmError::ScriptExhausted(request.role))?;
        let tok = RuleTokenizer;
        Ok(LlmResponse {
            prompt_tokens: tok.count(&request.system) + tok.count(&request.user),
            completion_tokens: tok.count(&text),
            text,
            latency_ms: 0,
        })
    }
}
