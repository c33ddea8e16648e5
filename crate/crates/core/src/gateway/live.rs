//! Live client for an OpenAI-compatible chat-completions endpoint.
//!
//! The base URL and API key come from configuration (`SWARM_API_KEY` in the
//! environment). Usage is whatever the backend reports; there is no local
//! tokenizer. Streaming, tool calls, and multimodal content are out of scope.

use std::sync::Arc;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, InFlight, Role, TokenUsage};
use crate::time::Clock;

/// Environment variable holding the API key for live mode.
pub const API_KEY_ENV: &str = "SWARM_API_KEY";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL up to but excluding `/chat/completions`, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub request_timeout: std::time::Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            request_timeout: std::time::Duration::from_secs(300),
        }
    }

    /// Read the API key from `SWARM_API_KEY`.
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, GatewayError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::Config {
            line: 0,
            message: format!("{API_KEY_ENV} not set (required for live mode)"),
        })?;
        Ok(Self::new(base_url, api_key, model))
    }
}

pub struct LiveBackend {
    http: reqwest::Client,
    config: LiveConfig,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let http = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Config {
                line: 0,
                message: format!("http client: {e}"),
            })?;
        Ok(LiveBackend { http, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    usage: WireUsage,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[async_trait]
impl ChatBackend for LiveBackend {
    async fn dispatch(
        &self,
        request: &ChatRequest,
        _clock: Arc<dyn Clock>,
    ) -> Result<InFlight, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": request
                .messages
                .iter()
                .map(|m| json!({"role": role_str(m.role), "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "user": request.tag,
        });
        let pending = self
            .http
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send();
        Ok(InFlight {
            prompt_tokens_at_dispatch: None,
            reply: Box::pin(async move {
                let response = pending
                    .await
                    .map_err(|e| GatewayError::Transport(e.to_string()))?;
                let status = response.status();
                if status.as_u16() == 429 || status.is_server_error() {
                    return Err(GatewayError::Transport(format!("status {status}")));
                }
                if !status.is_success() {
                    let body = response.text().await.unwrap_or_default();
                    let body: String = body.chars().take(300).collect();
                    return Err(GatewayError::Protocol(format!("status {status}: {body}")));
                }
                let reply: WireReply = response
                    .json()
                    .await
                    .map_err(|e| GatewayError::Protocol(format!("malformed backend reply: {e}")))?;
                let content = reply
                    .choices
                    .first()
                    .and_then(|c| c.message.content.clone())
                    .ok_or_else(|| GatewayError::Protocol("reply has no choices".into()))?;
                Ok(BackendReply {
                    content,
                    usage: TokenUsage {
                        prompt_tokens: reply.usage.prompt_tokens,
                        completion_tokens: reply.usage.completion_tokens,
                    },
                })
            }),
        })
    }

    fn name(&self) -> &'static str {
        "live"
    }
}
