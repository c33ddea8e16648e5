//! Deterministic scripted backend for tests and replay.
//!
//! A script is a line-delimited JSON file of [`ScriptEntry`] records. Entries
//! are consumed FIFO per tag; an entry with `match_substring` only applies to
//! requests whose last message contains that substring, and is skipped over
//! for requests that do not match.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, InFlight, TokenUsage};
use crate::time::Clock;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_substring: Option<String>,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Immutable parsed script, shareable so each run can start from a pristine
/// copy of the queues.
#[derive(Debug, Clone, Default)]
pub struct Script {
    entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        Script { entries }
    }

    /// Load a line-delimited script file. Blank lines are skipped; a decode
    /// failure reports the 1-based line number.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| GatewayError::Config {
            line: 0,
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|e| GatewayError::Config {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if entry.prompt_tokens == 0 {
                return Err(GatewayError::Config {
                    line: idx + 1,
                    message: "prompt_tokens must be >= 1".into(),
                });
            }
            entries.push(entry);
        }
        Ok(Script { entries })
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }
}

/// Backend handle replaying a [`Script`]. Consumption is serialized per tag
/// behind one lock, so concurrent callers see a strict FIFO order.
pub struct ScriptedBackend {
    queues: Mutex<BTreeMap<String, VecDeque<ScriptEntry>>>,
}

impl ScriptedBackend {
    pub fn new(script: &Script) -> Self {
        let mut queues: BTreeMap<String, VecDeque<ScriptEntry>> = BTreeMap::new();
        for entry in script.entries() {
            queues.entry(entry.tag.clone()).or_default().push_back(entry.clone());
        }
        ScriptedBackend {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        Self::new(&Script::from_entries(entries))
    }

    /// Load a script file into a fresh backend handle.
    pub fn load_script(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::new(&Script::load(path)?))
    }

    /// Entries still queued for a tag (test helper).
    pub fn remaining(&self, tag: &str) -> usize {
        self.queues
            .lock()
            .expect("script lock")
            .get(tag)
            .map(|q| q.len())
            .unwrap_or(0)
    }

    fn take_entry(&self, request: &ChatRequest) -> Result<ScriptEntry, GatewayError> {
        let mut queues = self.queues.lock().expect("script lock");
        let queue = queues.get_mut(&request.tag);
        let Some(queue) = queue.filter(|q| !q.is_empty()) else {
            return Err(GatewayError::Protocol(format!(
                "script exhausted for tag `{}`",
                request.tag
            )));
        };
        let last = request.last_content();
        let position = queue.iter().position(|e| {
            e.match_substring
                .as_deref()
                .map_or(true, |needle| last.contains(needle))
        });
        match position {
            Some(i) => Ok(queue.remove(i).expect("indexed entry")),
            None => Err(GatewayError::Protocol(format!(
                "no script entry for tag `{}` matches the request",
                request.tag
            ))),
        }
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn dispatch(
        &self,
        request: &ChatRequest,
        clock: Arc<dyn Clock>,
    ) -> Result<InFlight, GatewayError> {
        let entry = self.take_entry(request)?;
        let latency = std::time::Duration::from_millis(entry.latency_ms);
        Ok(InFlight {
            prompt_tokens_at_dispatch: Some(entry.prompt_tokens),
            reply: Box::pin(async move {
                clock.sleep(latency).await;
                Ok(BackendReply {
                    content: entry.content,
                    usage: TokenUsage {
                        prompt_tokens: entry.prompt_tokens,
                        completion_tokens: entry.completion_tokens,
                    },
                })
            }),
        })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn req(tag: &str, content: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user(content)], tag)
    }

    fn entry(tag: &str, content: &str) -> ScriptEntry {
        ScriptEntry {
            tag: tag.into(),
            match_substring: None,
            content: content.into(),
            prompt_tokens: 1,
            completion_tokens: 1,
            latency_ms: 0,
        }
    }

    #[test]
    fn entries_replay_fifo_per_tag() {
        let backend = ScriptedBackend::from_entries(vec![
            entry("orchestrator", "first"),
            entry("coder", "other"),
            entry("orchestrator", "second"),
        ]);
        let a = backend.take_entry(&req("orchestrator", "x")).unwrap();
        let b = backend.take_entry(&req("orchestrator", "y")).unwrap();
        assert_eq!((a.content.as_str(), b.content.as_str()), ("first", "second"));
        assert_eq!(backend.remaining("orchestrator"), 0);
        assert_eq!(backend.remaining("coder"), 1);
    }

    #[test]
    fn match_substring_selects_past_non_matching_entries() {
        let mut gated = entry("t", "matched");
        gated.match_substring = Some("devise".into());
        let backend = ScriptedBackend::from_entries(vec![gated, entry("t", "plain")]);
        // Non-matching request takes the first entry it can use.
        let got = backend.take_entry(&req("t", "hello")).unwrap();
        assert_eq!(got.content, "plain");
        // Matching request consumes the gated entry.
        let got = backend.take_entry(&req("t", "please devise a plan")).unwrap();
        assert_eq!(got.content, "matched");
    }

    #[test]
    fn empty_script_is_valid_but_exhausted() {
        let script = Script::parse("").unwrap();
        let backend = ScriptedBackend::new(&script);
        let err = backend.take_entry(&req("any", "x")).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(m) if m.contains("script exhausted")));
    }

    #[test]
    fn decode_failure_reports_line_number() {
        let text = "{\"tag\":\"a\",\"content\":\"x\",\"prompt_tokens\":1,\"completion_tokens\":0}\nnot json\n";
        let err = Script::parse(text).unwrap_err();
        assert!(matches!(err, GatewayError::Config { line: 2, .. }));
    }

    #[test]
    fn zero_prompt_tokens_rejected_at_load() {
        let text = "{\"tag\":\"a\",\"content\":\"x\",\"prompt_tokens\":0,\"completion_tokens\":0}\n";
        let err = Script::parse(text).unwrap_err();
        assert!(matches!(err, GatewayError::Config { line: 1, .. }));
    }
}
