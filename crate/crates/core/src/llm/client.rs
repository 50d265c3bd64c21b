use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCapabilities {
    pub model_name: String,
    pub max_tokens: usize,
}

/// A chat-completion endpoint. One call is one attempt; retries live in the caller.
pub trait ChatClient: Sync {
    fn capabilities(&self) -> &ClientCapabilities;
    fn send(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Deterministic client for tests: canned responses selected by prompt content.
#[derive(Debug)]
pub struct MockClient {
    capabilities: ClientCapabilities,
    responses: Vec<(String, String)>,
    default_response: String,
    failures: Mutex<Vec<(String, usize)>>,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(model_name: impl Into<String>) -> Self {
        MockClient {
            capabilities: ClientCapabilities {
                model_name: model_name.into(),
                max_tokens: 1024,
            },
            responses: Vec::new(),
            default_response: String::new(),
            failures: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Answers `response` to any prompt containing `needle`; first match wins.
    pub fn respond(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.responses.push((needle.into(), response.into()));
        self
    }

    pub fn default_response(mut self, response: impl Into<String>) -> Self {
        self.default_response = response.into();
        self
    }

    /// Fails the first `times` calls whose prompt contains `needle`.
    pub fn fail(self, needle: impl Into<String>, times: usize) -> Self {
        self.failures.lock().expect("mock lock").push((needle.into(), times));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for MockClient {
    fn capabilities(&self) -> &ClientCapabilities {
        &self.capabilities
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = messages.last().map_or("", |m| m.content.as_str());
        {
            let mut failures = self.failures.lock().expect("mock lock");
            if let Some((_, left)) = failures
                .iter_mut()
                .find(|(n, left)| *left > 0 && prompt.contains(n.as_str()))
            {
                *left -= 1;
                return Err(Error::Client("injected failure".into()));
            }
        }
        Ok(self
            .responses
            .iter()
            .find(|(needle, _)| prompt.contains(needle.as_str()))
            .map_or_else(|| self.default_response.clone(), |(_, r)| r.clone()))
    }
}

/// Settings for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub timeout: Duration,
}

pub struct HttpChatClient {
    config: HttpClientConfig,
    capabilities: ClientCapabilities,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(config: HttpClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(HttpChatClient {
            capabilities: ClientCapabilities {
                model_name: config.model.clone(),
                max_tokens: config.max_tokens,
            },
            config,
            http,
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatClient for HttpChatClient {
    fn capabilities(&self) -> &ClientCapabilities {
        &self.capabilities
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
        });
        let mut request = self.http.post(&url).json(&body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Client(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Error::Client(format!(
                "{status}: {}",
                text.chars().take(200).collect::<String>()
            )));
        }
        let parsed: CompletionResponse = response.json().map_err(|e| Error::Client(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Client("response has no choices".into()))
    }
}
