//! OpenAI-compatible chat backend over HTTP.
//!
//! Talks to any endpoint exposing `POST {base}/chat/completions` with the
//! usual request and response shapes. Auth is a bearer token; retry
//! policy lives in the gateway, not here.

use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

use super::{BackendError, ChatBackend, ChatRequest};

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpBackend {
    /// `base_url` up to and including the API version, e.g.
    /// `https://api.example.com/v1`.
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let mut message = text.trim().to_string();
            message.truncate(200);
            return Err(BackendError::Http {
                status: status.as_u16(),
                message,
            });
        }
        let parsed: Completion = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("empty choices array".into()))
    }
}
