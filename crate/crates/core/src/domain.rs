//! Shared vocabulary types used by every other module.
//!
//! All types are immutable values after construction and carry no behavior
//! beyond validation, so they are safe to copy between concurrent contexts.
//! Instants live on a run-local timeline starting at zero (see
//! [`crate::time::Instant`]); wall-clock dates never appear here.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Instant;

/// Identifier of a solver team within one race. Racing teams are numbered
/// from 1; id 0 is reserved for the aggregation judge in ledger events.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TeamId(pub u32);

impl std::fmt::Display for TeamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Agent roles available inside a team.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Orchestrator,
    Coder,
    ComputerTerminal,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Orchestrator => "orchestrator",
            AgentRole::Coder => "coder",
            AgentRole::ComputerTerminal => "computer_terminal",
        }
    }

    /// One-line capability description used in planning prompts.
    pub fn description(self) -> &'static str {
        match self {
            AgentRole::Orchestrator => {
                "orchestrator: coordinates the team, delegates steps, and decides when the task is complete"
            }
            AgentRole::Coder => "coder: writes code to gather or compute intermediate results",
            AgentRole::ComputerTerminal => {
                "computer_terminal: executes commands and scripts in a sandboxed working directory"
            }
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("task `{task}`: empty {field}")]
    EmptyField { task: String, field: String },
    #[error("task `{task}`: invalid level {level} (expected 1-3)")]
    InvalidLevel { task: String, level: i64 },
    #[error("duplicate task id `{0}` in task set")]
    DuplicateTaskId(String),
    #[error("plan: {0}")]
    InvalidPlan(String),
    #[error("transcript: {0}")]
    InvalidTranscript(String),
    #[error("team outcome: {0}")]
    InvalidOutcome(String),
}

// ---------------------------------------------------------------------------
// Task
// ---------------------------------------------------------------------------

/// A benchmark question with optional attachments and ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Task {
    pub id: String,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Task {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        Task {
            id: id.into(),
            question: question.into(),
            level: None,
            files: Vec::new(),
            answer: None,
        }
    }

    pub fn with_level(mut self, level: u8) -> Self {
        self.level = Some(level);
        self
    }

    pub fn with_answer(mut self, answer: impl Into<String>) -> Self {
        self.answer = Some(answer.into());
        self
    }
}

/// Decoded task record before validation. Field aliases let GAIA-style
/// JSONL (`task_id`, `Question`, `Level`, `Final answer`, `file_name`) load
/// without preprocessing.
#[derive(Debug, Clone, Deserialize)]
pub struct RawTask {
    #[serde(alias = "task_id")]
    pub id: String,
    #[serde(alias = "Question")]
    pub question: String,
    #[serde(default, alias = "Level")]
    pub level: Option<LevelField>,
    #[serde(default, alias = "Final answer")]
    pub answer: Option<String>,
    #[serde(default, alias = "file_name")]
    pub files: Option<FilesField>,
}

/// Level encoded as either a number or a numeric string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LevelField {
    Number(i64),
    Text(String),
}

/// Attachment list encoded as either one path or an array of paths.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum FilesField {
    One(String),
    Many(Vec<String>),
}

/// Validate a decoded task record into a [`Task`].
pub fn validate_task(raw: RawTask) -> Result<Task, DomainError> {
    if raw.id.trim().is_empty() {
        return Err(DomainError::EmptyField {
            task: raw.id,
            field: "id".into(),
        });
    }
    if raw.question.trim().is_empty() {
        return Err(DomainError::EmptyField {
            task: raw.id,
            field: "question".into(),
        });
    }
    let level = match raw.level {
        None => None,
        Some(LevelField::Number(n)) => Some(n),
        Some(LevelField::Text(s)) => {
            let trimmed = s.trim().to_string();
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.parse::<i64>().map_err(|_| DomainError::InvalidLevel {
                    task: raw.id.clone(),
                    level: -1,
                })?)
            }
        }
    };
    let level = match level {
        None => None,
        Some(n) if (1..=3).contains(&n) => Some(n as u8),
        Some(n) => {
            return Err(DomainError::InvalidLevel {
                task: raw.id,
                level: n,
            })
        }
    };
    let files = match raw.files {
        None => Vec::new(),
        Some(FilesField::One(p)) => {
            if p.trim().is_empty() {
                Vec::new()
            } else {
                vec![p]
            }
        }
        Some(FilesField::Many(v)) => v.into_iter().filter(|p| !p.trim().is_empty()).collect(),
    };
    let answer = raw.answer.filter(|a| !a.trim().is_empty());
    Ok(Task {
        id: raw.id,
        question: raw.question,
        level,
        files,
        answer,
    })
}

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

/// How a plan was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    Repeated,
    Diverse,
    Replanned,
}

/// An ordered list of advisory step descriptions. Plans are high-level
/// thoughts for a team, never a contract: no module may reject an outcome
/// for deviating from its plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<String>,
    pub strategy: PlanStrategy,
    pub generation_index: u32,
    pub parent_failure_count: u32,
}

impl Plan {
    pub fn new(
        steps: Vec<String>,
        strategy: PlanStrategy,
        generation_index: u32,
        parent_failure_count: u32,
    ) -> Result<Self, DomainError> {
        if steps.is_empty() {
            return Err(DomainError::InvalidPlan("no steps".into()));
        }
        if generation_index == 0 {
            return Err(DomainError::InvalidPlan("generation_index must be >= 1".into()));
        }
        let replanned = strategy == PlanStrategy::Replanned;
        if replanned != (parent_failure_count > 0) {
            return Err(DomainError::InvalidPlan(
                "parent_failure_count > 0 iff strategy = replanned".into(),
            ));
        }
        Ok(Plan {
            steps,
            strategy,
            generation_index,
            parent_failure_count,
        })
    }

    /// Render the steps back as bullet lines.
    pub fn bullets_text(&self) -> String {
        self.steps
            .iter()
            .map(|s| format!("- {s}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

/// Kind of a transcript entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Plan,
    Message,
    ModelRequest,
    ModelResponse,
    Action,
    Observation,
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub instant: Instant,
    pub actor: String,
    pub kind: EntryKind,
    pub payload: String,
}

/// Ordered log of everything a team did. Entry instants are non-decreasing
/// and every model response is preceded by an open model request from the
/// same actor; `push` enforces both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TranscriptParts", into = "TranscriptParts")]
pub struct Transcript {
    team_id: TeamId,
    entries: Vec<TranscriptEntry>,
    #[allow(dead_code)]
    open_requests: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptParts {
    team_id: TeamId,
    entries: Vec<TranscriptEntry>,
}

impl From<Transcript> for TranscriptParts {
    fn from(t: Transcript) -> Self {
        TranscriptParts {
            team_id: t.team_id,
            entries: t.entries,
        }
    }
}

impl TryFrom<TranscriptParts> for Transcript {
    type Error = DomainError;
    fn try_from(parts: TranscriptParts) -> Result<Self, DomainError> {
        let mut t = Transcript::new(parts.team_id);
        for entry in parts.entries {
            t.push(entry)?;
        }
        Ok(t)
    }
}

impl Transcript {
    pub fn new(team_id: TeamId) -> Self {
        Transcript {
            team_id,
            entries: Vec::new(),
            open_requests: HashMap::new(),
        }
    }

    pub fn team_id(&self) -> TeamId {
        self.team_id
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn push(&mut self, entry: TranscriptEntry) -> Result<(), DomainError> {
        if let Some(last) = self.entries.last() {
            if entry.instant < last.instant {
                return Err(DomainError::InvalidTranscript(format!(
                    "entry instant {} precedes {}",
                    entry.instant, last.instant
                )));
            }
        }
        match entry.kind {
            EntryKind::ModelRequest => {
                *self.open_requests.entry(entry.actor.clone()).or_insert(0) += 1;
            }
            EntryKind::ModelResponse => {
                let open = self.open_requests.entry(entry.actor.clone()).or_insert(0);
                if *open == 0 {
                    return Err(DomainError::InvalidTranscript(format!(
                        "model_response from `{}` without a matching model_request",
                        entry.actor
                    )));
                }
                *open -= 1;
            }
            _ => {}
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Append entries of `other` after ours, shifting nothing: instants are
    /// assumed to already be on the same run timeline.
    pub fn extend_from(&mut self, other: &Transcript) -> Result<(), DomainError> {
        for entry in other.entries() {
            self.push(entry.clone())?;
        }
        Ok(())
    }

    /// Plain-text rendering, one line per entry, used for replan excerpts and
    /// judge prompts.
    pub fn render_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "[{:.3}s] {} {}: {}",
                    e.instant.as_secs_f64(),
                    e.actor,
                    kind_str(e.kind),
                    e.payload
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn kind_str(kind: EntryKind) -> &'static str {
    match kind {
        EntryKind::Plan => "plan",
        EntryKind::Message => "message",
        EntryKind::ModelRequest => "model_request",
        EntryKind::ModelResponse => "model_response",
        EntryKind::Action => "action",
        EntryKind::Observation => "observation",
        EntryKind::Verdict => "verdict",
    }
}

// ---------------------------------------------------------------------------
// TeamOutcome
// ---------------------------------------------------------------------------

/// Result of one team working a task: success flag, answer, and full log,
/// plus timing and step counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamOutcome {
    pub team_id: TeamId,
    pub success: bool,
    pub answer: Option<String>,
    pub transcript: Transcript,
    pub started_at: Instant,
    pub finished_at: Instant,
    pub steps_taken: u32,
    pub attempts: u32,
    /// True when the team stopped because its cancel token fired.
    pub cancelled: bool,
}

impl TeamOutcome {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        team_id: TeamId,
        answer: Option<String>,
        transcript: Transcript,
        started_at: Instant,
        finished_at: Instant,
        steps_taken: u32,
        attempts: u32,
        cancelled: bool,
    ) -> Result<Self, DomainError> {
        if finished_at < started_at {
            return Err(DomainError::InvalidOutcome(format!(
                "finished_at {finished_at} precedes started_at {started_at}"
            )));
        }
        if attempts == 0 {
            return Err(DomainError::InvalidOutcome("attempts must be >= 1".into()));
        }
        Ok(TeamOutcome {
            team_id,
            success: answer.is_some(),
            answer,
            transcript,
            started_at,
            finished_at,
            steps_taken,
            attempts,
            cancelled,
        })
    }

    /// User-perceived latency of this team.
    pub fn latency(&self) -> Instant {
        Instant::from_nanos(self.finished_at.saturating_since(self.started_at).as_nanos() as u64)
    }
}

// ---------------------------------------------------------------------------
// FailureRecord
// ---------------------------------------------------------------------------

/// A failed (plan, transcript) pair stored in the global failure memory and
/// consulted during replanning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub plan: Plan,
    pub transcript: Transcript,
    pub team_id: TeamId,
    pub recorded_at: Instant,
}
