//! OpenAI-compatible `/chat/completions` over blocking HTTP.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use url::Url;

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse};

pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const BASE_URL_ENV: &str = "LLM_BASE_URL";

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

pub struct HttpBackend {
    base: Url,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: &str, timeout: Duration) -> Result<Self, LlmError> {
        if api_key.trim().is_empty() {
            return Err(LlmError::Config(format!("missing credentials: {API_KEY_ENV} is empty")));
        }
        let mut base = Url::parse(base_url)
            .map_err(|e| LlmError::Config(format!("malformed base URL `{base_url}`: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") || base.cannot_be_a_base() {
            return Err(LlmError::Config(format!("malformed base URL `{base_url}`: not an http(s) URL")));
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Ok(Self {
            base,
            api_key: api_key.to_string(),
            agent,
        })
    }

    /// Base URL from the argument or `LLM_BASE_URL`; key from `LLM_API_KEY`.
    pub fn from_env(base_url: Option<&str>, timeout: Duration) -> Result<Self, LlmError> {
        let base = match base_url {
            Some(b) => b.to_string(),
            None => std::env::var(BASE_URL_ENV)
                .map_err(|_| LlmError::Config(format!("no base URL configured and {BASE_URL_ENV} unset")))?,
        };
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| LlmError::Config(format!("missing credentials: {API_KEY_ENV} unset")))?;
        Self::new(&base, &key, timeout)
    }

    fn endpoint(&self, path: &str) -> String {
        self.base.join(path).expect("relative path joins").to_string()
    }

    /// Lists models; succeeds if the endpoint answers with 2xx.
    pub fn check(&self) -> Result<(), LlmError> {
        let resp = self
            .agent
            .get(&self.endpoint("models"))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .call()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(LlmError::Provider {
                status,
                message: "capability check failed".into(),
            })
        }
    }
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(ChatMessage {
                role: "system",
                content: &request.system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: &request.user,
        });
        let body = ChatBody {
            model: &request.model,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };

        let started = Instant::now();
        let mut resp = self
            .agent
            .post(&self.endpoint("chat/completions"))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Provider {
                status,
                message: text.chars().take(500).collect(),
            });
        }
        let reply: ChatReply =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let content = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("no message content in first choice".into()))?;
        let usage = reply.usage.unwrap_or_default();
        Ok(LlmResponse {
            text: content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
