//! Uniform access to chat-completion backends.
//!
//! Two backends exist: a deterministic scripted mock for tests and replay
//! ([`mock::ScriptedBackend`]) and a live client speaking an OpenAI-compatible
//! wire protocol ([`live::LiveBackend`]). Every call charges the cost ledger
//! of the calling team: prompt tokens at the instant a request is physically
//! sent, completion tokens at the instant the reply arrives. A call cancelled
//! mid-flight keeps its dispatch charge.

pub mod live;
pub mod mock;

use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cancel::CancelToken;
use crate::domain::TeamId;
use crate::ledger::CostLedger;
use crate::time::Clock;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// Transient transport failure; retried with exponential backoff.
    #[error("transport: {0}")]
    Transport(String),
    /// Malformed or out-of-contract backend behavior; never retried.
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("configuration: line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("call cancelled")]
    Cancelled,
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat-completion request. `tag` identifies the calling actor (for script
/// routing and audit); it is sent as the `user` field on the live wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: String,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, tag: impl Into<String>) -> Self {
        ChatRequest {
            messages,
            temperature: 1.0,
            max_output_tokens: 2048,
            tag: tag.into(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !matches!(self.messages[0].role, Role::System | Role::User) {
            return Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    pub usage: TokenUsage,
    pub latency: Duration,
}

/// Raw reply from a backend before the gateway stamps latency.
pub struct BackendReply {
    pub content: String,
    pub usage: TokenUsage,
}

type ReplyFuture = Pin<Box<dyn Future<Output = Result<BackendReply, GatewayError>> + Send>>;

/// A physically-sent request whose reply is still pending.
///
/// `prompt_tokens_at_dispatch` is populated when the backend knows the prompt
/// charge up front (the scripted mock); the live backend only learns usage
/// from the reply.
pub struct InFlight {
    pub prompt_tokens_at_dispatch: Option<u64>,
    pub reply: ReplyFuture,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Resolve and physically send one request.
    async fn dispatch(
        &self,
        request: &ChatRequest,
        clock: Arc<dyn Clock>,
    ) -> Result<InFlight, GatewayError>;

    fn name(&self) -> &'static str {
        "backend"
    }
}

/// Everything a model call needs to be attributed and interruptible.
#[derive(Clone)]
pub struct CallContext {
    pub team: TeamId,
    pub clock: Arc<dyn Clock>,
    pub ledger: Arc<CostLedger>,
    pub cancel: CancelToken,
}

impl CallContext {
    pub fn for_team(&self, team: TeamId) -> CallContext {
        CallContext {
            team,
            ..self.clone()
        }
    }
}

/// Retry schedule for transient transport failures: up to `max_retries`
/// re-sends with exponential backoff (1s, 2s, 4s by default).
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_backoff: Duration::from_secs(1),
        }
    }
}

/// Backend-agnostic call layer: retries, cancellation, and ledger events.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Issue one chat completion.
    ///
    /// Ledger contract: one dispatch event per physical send (abandoned
    /// retries included), one completion event per received reply. The mock
    /// knows prompt tokens at dispatch; the live backend reports usage with
    /// the reply, so its dispatch event is written retroactively at the send
    /// instant once the reply (or failure: zero tokens) is known.
    pub async fn complete(
        &self,
        ctx: &CallContext,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let mut attempt: u32 = 0;
        loop {
            if ctx.cancel.is_cancelled() {
                return Err(GatewayError::Cancelled);
            }
            let sent_at = ctx.clock.now();
            let InFlight {
                prompt_tokens_at_dispatch: known,
                reply,
            } = self.backend.dispatch(request, ctx.clock.clone()).await?;
            if let Some(prompt_tokens) = known {
                ctx.ledger.record_dispatch(ctx.team, sent_at, prompt_tokens);
            }
            let outcome = tokio::select! {
                biased;
                _ = ctx.cancel.cancelled() => {
                    if known.is_none() {
                        ctx.ledger.record_dispatch(ctx.team, sent_at, 0);
                    }
                    return Err(GatewayError::Cancelled);
                }
                r = reply => r,
            };
            match outcome {
                Ok(reply) => {
                    if reply.usage.prompt_tokens == 0 {
                        return Err(GatewayError::Protocol(
                            "backend reported zero prompt tokens".into(),
                        ));
                    }
                    if known.is_none() {
                        ctx.ledger
                            .record_dispatch(ctx.team, sent_at, reply.usage.prompt_tokens);
                    }
                    let received_at = ctx.clock.now();
                    ctx.ledger
                        .record_completion(ctx.team, received_at, reply.usage.completion_tokens);
                    return Ok(ChatResponse {
                        content: reply.content,
                        usage: reply.usage,
                        latency: received_at.saturating_since(sent_at),
                    });
                }
                Err(err) => {
                    if known.is_none() {
                        // Physical send happened; charge what we know (nothing).
                        ctx.ledger.record_dispatch(ctx.team, sent_at, 0);
                    }
                    if err.is_retryable() && attempt < self.retry.max_retries {
                        let backoff = self.retry.base_backoff * 2u32.pow(attempt);
                        attempt += 1;
                        tokio::select! {
                            biased;
                            _ = ctx.cancel.cancelled() => return Err(GatewayError::Cancelled),
                            _ = ctx.clock.sleep(backoff) => {}
                        }
                        continue;
                    }
                    return Err(err);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{ScriptEntry, ScriptedBackend};
    use super::*;
    use crate::ledger::{PriceTable, UsageKind};
    use crate::time::{run_virtual, Instant, VirtualClock};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn entry(tag: &str, content: &str, prompt: u64, completion: u64, latency_ms: u64) -> ScriptEntry {
        ScriptEntry {
            tag: tag.into(),
            match_substring: None,
            content: content.into(),
            prompt_tokens: prompt,
            completion_tokens: completion,
            latency_ms,
        }
    }

    fn test_ctx(clock: &VirtualClock) -> CallContext {
        CallContext {
            team: TeamId(1),
            clock: Arc::new(clock.clone()),
            ledger: Arc::new(CostLedger::new()),
            cancel: CancelToken::new(),
        }
    }

    fn user_request(content: &str, tag: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user(content)], tag)
    }

    #[test]
    fn request_validation() {
        let empty = ChatRequest::new(vec![], "t");
        assert!(matches!(
            empty.validate(),
            Err(GatewayError::InvalidRequest(_))
        ));
        let bad_first = ChatRequest::new(vec![ChatMessage::assistant("hi")], "t");
        assert!(bad_first.validate().is_err());
        assert!(user_request("ok", "t").validate().is_ok());
    }

    #[test]
    fn mock_reply_arrives_after_scripted_latency() {
        let clock = VirtualClock::new();
        let backend = ScriptedBackend::from_entries(vec![entry("orchestrator", "PLAN: go", 100, 10, 3500)]);
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let resp = run_virtual(&clock, async move {
            gateway.complete(&c, &user_request("please devise", "orchestrator")).await
        })
        .unwrap()
        .unwrap();
        assert_eq!(resp.content, "PLAN: go");
        assert_eq!(resp.latency, Duration::from_millis(3500));
        assert_eq!(clock.now(), Instant::from_millis(3500));
    }

    #[test]
    fn token_conservation_between_ledger_and_usage() {
        let clock = VirtualClock::new();
        let backend = ScriptedBackend::from_entries(vec![entry("a", "x", 123, 45, 10)]);
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let resp = run_virtual(&clock, async move { gateway.complete(&c, &user_request("q", "a")).await })
            .unwrap()
            .unwrap();
        let events = ctx.ledger.snapshot();
        assert_eq!(events.len(), 2);
        let (mut prompt, mut completion) = (0, 0);
        for e in events {
            match e.kind {
                UsageKind::Dispatch { prompt_tokens } => prompt += prompt_tokens,
                UsageKind::Completion { completion_tokens } => completion += completion_tokens,
            }
        }
        assert_eq!(prompt, resp.usage.prompt_tokens);
        assert_eq!(completion, resp.usage.completion_tokens);
    }

    #[test]
    fn script_exhausted_is_a_protocol_error() {
        let clock = VirtualClock::new();
        let backend = ScriptedBackend::from_entries(vec![]);
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let err = run_virtual(&clock, async move { gateway.complete(&c, &user_request("q", "a")).await })
            .unwrap()
            .unwrap_err();
        match err {
            GatewayError::Protocol(msg) => assert!(msg.contains("script exhausted"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cancellation_mid_call_keeps_dispatch_charge() {
        let clock = VirtualClock::new();
        let backend = ScriptedBackend::from_entries(vec![entry("a", "late", 500, 50, 10_000)]);
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let cancel = ctx.cancel.clone();
        let clk = clock.clone();
        let err = run_virtual(&clock, async move {
            let request = user_request("q", "a");
            let call = gateway.complete(&c, &request);
            let canceller = async {
                clk.sleep(Duration::from_secs(2)).await;
                cancel.cancel();
            };
            let (res, ()) = futures::join!(call, canceller);
            res
        })
        .unwrap()
        .unwrap_err();
        assert!(matches!(err, GatewayError::Cancelled));
        // Prompt charged at dispatch instant 0; no completion event.
        let events = ctx.ledger.snapshot();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].instant, Instant::ZERO);
        assert!(matches!(events[0].kind, UsageKind::Dispatch { prompt_tokens: 500 }));
        // The cancelled call returned at the cancel instant, not the reply's.
        assert_eq!(clock.now(), Instant::from_secs(2));
    }

    /// Backend that fails with a retryable transport error a fixed number of
    /// times before delegating to a scripted reply.
    struct Flaky {
        failures: AtomicU32,
        inner: ScriptedBackend,
    }

    #[async_trait]
    impl ChatBackend for Flaky {
        async fn dispatch(
            &self,
            request: &ChatRequest,
            clock: Arc<dyn Clock>,
        ) -> Result<InFlight, GatewayError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Ok(InFlight {
                    prompt_tokens_at_dispatch: None,
                    reply: Box::pin(async { Err(GatewayError::Transport("connection reset".into())) }),
                });
            }
            self.inner.dispatch(request, clock).await
        }
    }

    #[test]
    fn retries_back_off_and_record_each_physical_send() {
        let clock = VirtualClock::new();
        let backend = Flaky {
            failures: AtomicU32::new(2),
            inner: ScriptedBackend::from_entries(vec![entry("a", "finally", 100, 5, 500)]),
        };
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let resp = run_virtual(&clock, async move { gateway.complete(&c, &user_request("q", "a")).await })
            .unwrap()
            .unwrap();
        assert_eq!(resp.content, "finally");
        // Sends at t=0 (fail), t=1s (fail), t=3s (ok after 1s+2s backoff).
        let dispatches: Vec<_> = ctx
            .ledger
            .snapshot()
            .into_iter()
            .filter(|e| matches!(e.kind, UsageKind::Dispatch { .. }))
            .collect();
        assert_eq!(dispatches.len(), 3);
        assert_eq!(dispatches[0].instant, Instant::ZERO);
        assert_eq!(dispatches[1].instant, Instant::from_secs(1));
        assert_eq!(dispatches[2].instant, Instant::from_secs(3));
        assert_eq!(clock.now(), Instant::from_millis(3500));
    }

    #[test]
    fn retries_are_bounded() {
        let clock = VirtualClock::new();
        let backend = Flaky {
            failures: AtomicU32::new(10),
            inner: ScriptedBackend::from_entries(vec![]),
        };
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        let err = run_virtual(&clock, async move { gateway.complete(&c, &user_request("q", "a")).await })
            .unwrap()
            .unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)));
        // Initial send plus three retries.
        assert_eq!(ctx.ledger.len(), 4);
    }

    #[test]
    fn one_million_prompt_tokens_cost_two_dollars_fifty() {
        let clock = VirtualClock::new();
        let backend = ScriptedBackend::from_entries(vec![entry("a", "", 1_000_000, 0, 0)]);
        let gateway = Gateway::new(Arc::new(backend));
        let ctx = test_ctx(&clock);
        let c = ctx.clone();
        run_virtual(&clock, async move { gateway.complete(&c, &user_request("q", "a")).await })
            .unwrap()
            .unwrap();
        let cost = ctx.ledger.total_cost(&PriceTable::default());
        assert_eq!(cost.as_micros(), 2_500_000);
    }

    #[test]
    fn mock_determinism_identical_scripts_identical_ledgers() {
        let run = || {
            let clock = VirtualClock::new();
            let backend = ScriptedBackend::from_entries(vec![
                entry("a", "one", 10, 1, 100),
                entry("a", "two", 20, 2, 200),
            ]);
            let gateway = Gateway::new(Arc::new(backend));
            let ctx = test_ctx(&clock);
            let c = ctx.clone();
            let contents = run_virtual(&clock, async move {
                let r1 = gateway.complete(&c, &user_request("q1", "a")).await.unwrap();
                let r2 = gateway.complete(&c, &user_request("q2", "a")).await.unwrap();
                (r1.content, r2.content)
            })
            .unwrap();
            (contents, serde_json::to_string(&ctx.ledger.snapshot()).unwrap())
        };
        assert_eq!(run(), run());
    }
}
