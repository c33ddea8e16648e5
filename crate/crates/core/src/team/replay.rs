//! Trace-replay executor for deterministic simulation.
//!
//! A trace records one team's historical run of one task: when each step
//! finished, the tokens each step used, and the final outcome. Replaying
//! under a virtual clock reproduces the team's timing exactly; each step
//! deposits its usage at its step instant, giving a piecewise-constant
//! cumulative cost for cost-at-cutoff queries.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TeamExecutor, TeamRunEnv};
use crate::domain::{EntryKind, Plan, Task, TeamId, TeamOutcome, Transcript, TranscriptEntry};
use crate::gateway::TokenUsage;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace file {path}: {error}")]
    Io { path: String, error: String },
    #[error("trace file line {line}: {message}")]
    Decode { line: usize, message: String },
    #[error("trace file line {line}: duplicate key ({task_id}, team {team_id}, rep {rep})")]
    Duplicate {
        line: usize,
        task_id: String,
        team_id: u32,
        rep: u32,
    },
    #[error("trace file line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("missing trace for task `{task_id}`, team {team_id}, rep {rep}")]
    Missing {
        task_id: String,
        team_id: u32,
        rep: u32,
    },
}

/// Wire record: one line of a trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTrace {
    pub task_id: String,
    pub team_id: u32,
    pub rep: u32,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub step_ms: Vec<u64>,
    pub prompt_tokens: Vec<u64>,
    pub completion_tokens: Vec<u64>,
}

/// Validated trace for one (task, team, repetition).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayTrace {
    pub task_id: String,
    pub team_id: TeamId,
    pub rep: u32,
    pub success: bool,
    pub answer: Option<String>,
    /// Step completion offsets from team start, strictly increasing.
    pub step_offsets: Vec<Duration>,
    pub usage_per_step: Vec<TokenUsage>,
}

impl ReplayTrace {
    pub fn total_latency(&self) -> Duration {
        self.step_offsets.last().copied().unwrap_or(Duration::ZERO)
    }

    fn from_raw(raw: RawTrace, line: usize) -> Result<Self, TraceError> {
        let n = raw.step_ms.len();
        if raw.prompt_tokens.len() != n || raw.completion_tokens.len() != n {
            return Err(TraceError::Invalid {
                line,
                message: "step_ms, prompt_tokens, completion_tokens must have equal length".into(),
            });
        }
        if !raw.step_ms.windows(2).all(|w| w[0] < w[1]) {
            return Err(TraceError::Invalid {
                line,
                message: "step instants must be strictly increasing".into(),
            });
        }
        if raw.success != raw.answer.is_some() {
            return Err(TraceError::Invalid {
                line,
                message: "answer must be present iff success".into(),
            });
        }
        Ok(ReplayTrace {
            task_id: raw.task_id,
            team_id: TeamId(raw.team_id),
            rep: raw.rep,
            success: raw.success,
            answer: raw.answer,
            step_offsets: raw.step_ms.iter().map(|&ms| Duration::from_millis(ms)).collect(),
            usage_per_step: raw
                .prompt_tokens
                .iter()
                .zip(raw.completion_tokens.iter())
                .map(|(&p, &c)| TokenUsage {
                    prompt_tokens: p,
                    completion_tokens: c,
                })
                .collect(),
        })
    }
}

/// Traces indexed by (task_id, team_id, repetition).
#[derive(Debug, Default, Clone)]
pub struct TraceSet {
    map: BTreeMap<(String, u32, u32), ReplayTrace>,
}

impl TraceSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load a line-delimited trace file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            error: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut set = TraceSet::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawTrace = serde_json::from_str(line).map_err(|e| TraceError::Decode {
                line: idx + 1,
                message: e.to_string(),
            })?;
            let trace = ReplayTrace::from_raw(raw, idx + 1)?;
            set.insert_at(trace, idx + 1)?;
        }
        Ok(set)
    }

    fn insert_at(&mut self, trace: ReplayTrace, line: usize) -> Result<(), TraceError> {
        let key = (trace.task_id.clone(), trace.team_id.0, trace.rep);
        if self.map.contains_key(&key) {
            return Err(TraceError::Duplicate {
                line,
                task_id: key.0,
                team_id: key.1,
                rep: key.2,
            });
        }
        self.map.insert(key, trace);
        Ok(())
    }

    /// Insert a programmatically built trace (fixture generation).
    pub fn insert(&mut self, trace: ReplayTrace) -> Result<(), TraceError> {
        self.insert_at(trace, 0)
    }

    pub fn get(&self, task_id: &str, team: TeamId, rep: u32) -> Option<&ReplayTrace> {
        self.map.get(&(task_id.to_string(), team.0, rep))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayTrace> {
        self.map.values()
    }

    /// Every trace's total latency in seconds; the empirical pool for order
    /// statistics.
    pub fn latency_pool_secs(&self) -> Vec<f64> {
        self.map.values().map(|t| t.total_latency().as_secs_f64()).collect()
    }

    /// Check that every (team, rep) cell needed by a race exists.
    pub fn check_coverage(&self, task_id: &str, n_teams: u32, rep: u32) -> Result<(), TraceError> {
        for team in 1..=n_teams {
            if self.get(task_id, TeamId(team), rep).is_none() {
                return Err(TraceError::Missing {
                    task_id: task_id.to_string(),
                    team_id: team,
                    rep,
                });
            }
        }
        Ok(())
    }

    /// Serialize back to the line-delimited wire format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for trace in self.map.values() {
            let raw = RawTrace {
                task_id: trace.task_id.clone(),
                team_id: trace.team_id.0,
                rep: trace.rep,
                success: trace.success,
                answer: trace.answer.clone(),
                step_ms: trace.step_offsets.iter().map(|d| d.as_millis() as u64).collect(),
                prompt_tokens: trace.usage_per_step.iter().map(|u| u.prompt_tokens).collect(),
                completion_tokens: trace
                    .usage_per_step
                    .iter()
                    .map(|u| u.completion_tokens)
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Executor replaying recorded traces for one repetition index.
pub struct ReplayExecutor {
    traces: Arc<TraceSet>,
    rep: u32,
}

impl ReplayExecutor {
    pub fn new(traces: Arc<TraceSet>, rep: u32) -> Self {
        ReplayExecutor { traces, rep }
    }
}

#[async_trait]
impl TeamExecutor for ReplayExecutor {
    async fn run_team(&self, task: &Task, plan: &Plan, env: &TeamRunEnv) -> TeamOutcome {
        let started = env.clock.now();
        let mut transcript = Transcript::new(env.team);
        let _ = transcript.push(TranscriptEntry {
            instant: started,
            actor: "orchestrator".into(),
            kind: EntryKind::Plan,
            payload: plan.bullets_text(),
        });
        let Some(trace) = self.traces.get(&task.id, env.team, self.rep) else {
            let _ = transcript.push(TranscriptEntry {
                instant: started,
                actor: "orchestrator".into(),
                kind: EntryKind::Observation,
                payload: format!("missing trace for task `{}` rep {}", task.id, self.rep),
            });
            return TeamOutcome::new(env.team, None, transcript, started, started, 0, 1, false)
                .expect("outcome is valid");
        };
        let trace = trace.clone();
        for (idx, (offset, usage)) in trace
            .step_offsets
            .iter()
            .zip(trace.usage_per_step.iter())
            .enumerate()
        {
            let boundary = started + *offset;
            tokio::select! {
                biased;
                _ = env.cancel.cancelled() => {
                    let at = env.clock.now();
                    let _ = transcript.push(TranscriptEntry {
                        instant: at,
                        actor: "orchestrator".into(),
                        kind: EntryKind::Observation,
                        payload: "cancelled".into(),
                    });
                    return TeamOutcome::new(
                        env.team, None, transcript, started, at, idx as u32, 1, true,
                    )
                    .expect("outcome is valid");
                }
                _ = env.clock.sleep_until(boundary) => {}
            }
            env.ledger.record_dispatch(env.team, boundary, usage.prompt_tokens);
            env.ledger.record_completion(env.team, boundary, usage.completion_tokens);
            let _ = transcript.push(TranscriptEntry {
                instant: boundary,
                actor: "orchestrator".into(),
                kind: EntryKind::Action,
                payload: format!("step {}", idx + 1),
            });
        }
        let finished = started + trace.total_latency();
        if let Some(answer) = &trace.answer {
            let _ = transcript.push(TranscriptEntry {
                instant: finished,
                actor: "orchestrator".into(),
                kind: EntryKind::Verdict,
                payload: format!("FINAL ANSWER: {answer}"),
            });
        }
        TeamOutcome::new(
            env.team,
            trace.answer.clone(),
            transcript,
            started,
            finished,
            trace.step_offsets.len() as u32,
            1,
            false,
        )
        .expect("outcome is valid")
    }
}

/// Build a synthetic trace with evenly spaced steps, one step per
/// `step_interval`, ending exactly at `total`.
pub fn uniform_trace(
    task_id: &str,
    team: TeamId,
    rep: u32,
    total: Duration,
    step_interval: Duration,
    prompt_tokens_per_step: u64,
    completion_tokens_per_step: u64,
    answer: Option<&str>,
) -> ReplayTrace {
    assert!(step_interval > Duration::ZERO && total.as_millis() % step_interval.as_millis() == 0);
    let steps = (total.as_millis() / step_interval.as_millis()) as u64;
    let step_offsets: Vec<Duration> = (1..=steps).map(|i| step_interval * i as u32).collect();
    let usage_per_step = vec![
        TokenUsage {
            prompt_tokens: prompt_tokens_per_step,
            completion_tokens: completion_tokens_per_step,
        };
        steps as usize
    ];
    ReplayTrace {
        task_id: task_id.to_string(),
        team_id: team,
        rep,
        success: answer.is_some(),
        answer: answer.map(String::from),
        step_offsets,
        usage_per_step,
    }
}
