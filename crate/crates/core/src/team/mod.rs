//! The team-executor contract and the recovery loop shared by executors.
//!
//! A team takes a task and an advisory plan and produces a [`TeamOutcome`];
//! failures never escape as errors, they fold into the outcome. Two
//! executors exist: [`ledger_loop::LedgerLoopExecutor`], a live
//! orchestrator/coder/terminal loop, and [`replay::ReplayExecutor`], which
//! replays recorded traces for deterministic simulation.

pub mod ledger_loop;
pub mod replay;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::cancel::CancelToken;
use crate::domain::{AgentRole, FailureRecord, Plan, Task, TeamId, TeamOutcome, Transcript};
use crate::ledger::CostLedger;
use crate::time::{Clock, Instant};

#[derive(Debug, Error)]
pub enum TeamError {
    #[error("team config: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(#[from] replay::TraceError),
}

/// Static shape of a team: step and attempt budgets, stall detection window,
/// and the agent roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamConfig {
    pub max_steps: u32,
    pub max_attempts: u32,
    pub stall_window: u32,
    pub agents: Vec<AgentRole>,
}

impl Default for TeamConfig {
    fn default() -> Self {
        TeamConfig {
            max_steps: 30,
            max_attempts: 3,
            stall_window: 3,
            agents: vec![
                AgentRole::Orchestrator,
                AgentRole::Coder,
                AgentRole::ComputerTerminal,
            ],
        }
    }
}

impl TeamConfig {
    pub fn validate(&self) -> Result<(), TeamError> {
        if !self.agents.contains(&AgentRole::Orchestrator) {
            return Err(TeamError::Config("orchestrator must always be present".into()));
        }
        if self.max_attempts == 0 {
            return Err(TeamError::Config("max_attempts must be >= 1".into()));
        }
        if self.stall_window < 2 {
            return Err(TeamError::Config("stall_window must be >= 2".into()));
        }
        if self.max_steps < self.stall_window {
            return Err(TeamError::Config("max_steps must be >= stall_window".into()));
        }
        Ok(())
    }
}

/// Messages a team sends to its supervisor.
#[derive(Debug)]
pub enum TeamMsg {
    Progress {
        team: TeamId,
        instant: Instant,
        note: String,
    },
    Failure {
        record: FailureRecord,
    },
    /// Ask the supervisor for a replacement plan after a failed attempt.
    /// `None` means replanning was unavailable or failed.
    ReplanRequest {
        team: TeamId,
        prior_plans: Vec<Plan>,
        reply: oneshot::Sender<Option<Plan>>,
    },
}

/// Sender half handed to each team.
#[derive(Clone)]
pub struct SupervisorHandle {
    tx: mpsc::Sender<TeamMsg>,
}

impl SupervisorHandle {
    pub fn new(tx: mpsc::Sender<TeamMsg>) -> Self {
        SupervisorHandle { tx }
    }

    pub async fn report_progress(&self, team: TeamId, instant: Instant, note: impl Into<String>) {
        let _ = self
            .tx
            .send(TeamMsg::Progress {
                team,
                instant,
                note: note.into(),
            })
            .await;
    }

    pub async fn report_failure(&self, record: FailureRecord) {
        let _ = self.tx.send(TeamMsg::Failure { record }).await;
    }

    pub async fn request_replan(&self, team: TeamId, prior_plans: Vec<Plan>) -> Option<Plan> {
        let (reply_tx, reply_rx) = oneshot::channel();
        self.tx
            .send(TeamMsg::ReplanRequest {
                team,
                prior_plans,
                reply: reply_tx,
            })
            .await
            .ok()?;
        reply_rx.await.ok().flatten()
    }
}

/// Everything one team run needs: identity, clock, ledger, cancellation, a
/// line to the supervisor, and the team shape.
#[derive(Clone)]
pub struct TeamRunEnv {
    pub team: TeamId,
    pub clock: Arc<dyn Clock>,
    pub ledger: Arc<CostLedger>,
    pub cancel: CancelToken,
    pub supervisor: SupervisorHandle,
    pub config: TeamConfig,
}

/// The uniform team contract: run one attempt at the task with the given
/// plan. Implementations fold every failure into the outcome; if the cancel
/// token fires they return a cancelled outcome within one step boundary, and
/// all model usage stays on the ledger regardless.
#[async_trait]
pub trait TeamExecutor: Send + Sync {
    async fn run_team(&self, task: &Task, plan: &Plan, env: &TeamRunEnv) -> TeamOutcome;

    /// Whether failed attempts should feed the replan/retry loop. Replay
    /// traces already embody whatever attempts happened, so they opt out.
    fn supports_recovery(&self) -> bool {
        false
    }
}

fn fallback_outcome(team: TeamId, at: Instant, cancelled: bool) -> TeamOutcome {
    TeamOutcome::new(team, None, Transcript::new(team), at, at, 0, 1, cancelled)
        .expect("fallback outcome is valid")
}

/// Run attempts until an answer, cancellation, or the attempt budget runs
/// out. Every failed attempt is recorded into the global failure memory; a
/// replacement plan is requested for all but the last. Transcripts of all
/// attempts concatenate into the final outcome.
pub async fn attempt_with_recovery(
    executor: &dyn TeamExecutor,
    task: &Task,
    initial_plan: &Plan,
    env: &TeamRunEnv,
) -> TeamOutcome {
    let started = env.clock.now();
    let mut plan = initial_plan.clone();
    let mut plans_so_far = vec![plan.clone()];
    let mut merged = Transcript::new(env.team);
    let mut steps_total: u32 = 0;
    let mut attempts: u32 = 0;
    loop {
        attempts += 1;
        let outcome = executor.run_team(task, &plan, env).await;
        steps_total += outcome.steps_taken;
        if merged.extend_from(&outcome.transcript).is_err() {
            // Attempt transcripts share one timeline; a merge failure means a
            // clock bug, not a team failure. Keep the raw attempt transcript.
            merged = outcome.transcript.clone();
        }
        if outcome.answer.is_some() || outcome.cancelled {
            return TeamOutcome::new(
                env.team,
                outcome.answer.clone(),
                merged,
                started,
                outcome.finished_at,
                steps_total,
                attempts,
                outcome.cancelled,
            )
            .unwrap_or_else(|_| fallback_outcome(env.team, env.clock.now(), outcome.cancelled));
        }
        // Failed attempt: always feed the global memory.
        env.supervisor
            .report_failure(FailureRecord {
                plan: plan.clone(),
                transcript: outcome.transcript.clone(),
                team_id: env.team,
                recorded_at: env.clock.now(),
            })
            .await;
        if attempts >= env.config.max_attempts || env.cancel.is_cancelled() {
            return TeamOutcome::new(
                env.team,
                None,
                merged,
                started,
                outcome.finished_at,
                steps_total,
                attempts,
                env.cancel.is_cancelled(),
            )
            .unwrap_or_else(|_| fallback_outcome(env.team, env.clock.now(), false));
        }
        match env.supervisor.request_replan(env.team, plans_so_far.clone()).await {
            Some(new_plan) => {
                plans_so_far.push(new_plan.clone());
                plan = new_plan;
            }
            None => {
                let cancelled = env.cancel.is_cancelled();
                return TeamOutcome::new(
                    env.team,
                    None,
                    merged,
                    started,
                    env.clock.now(),
                    steps_total,
                    attempts,
                    cancelled,
                )
                .unwrap_or_else(|_| fallback_outcome(env.team, env.clock.now(), cancelled));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PlanStrategy;
    use crate::time::{run_virtual, VirtualClock};
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Executor whose attempts fail until the given attempt number answers.
    struct FlakyTeam {
        answer_on_attempt: u32,
        calls: AtomicU32,
    }

    #[async_trait]
    impl TeamExecutor for FlakyTeam {
        async fn run_team(&self, _task: &Task, _plan: &Plan, env: &TeamRunEnv) -> TeamOutcome {
            let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            let now = env.clock.now();
            let answer = (call >= self.answer_on_attempt).then(|| "42".to_string());
            TeamOutcome::new(env.team, answer, Transcript::new(env.team), now, now, 1, 1, false)
                .unwrap()
        }

        fn supports_recovery(&self) -> bool {
            true
        }
    }

    fn env(clock: &VirtualClock, tx: mpsc::Sender<TeamMsg>) -> TeamRunEnv {
        TeamRunEnv {
            team: TeamId(1),
            clock: Arc::new(clock.clone()),
            ledger: Arc::new(CostLedger::new()),
            cancel: CancelToken::new(),
            supervisor: SupervisorHandle::new(tx),
            config: TeamConfig::default(),
        }
    }

    fn plan() -> Plan {
        Plan::new(vec!["try".into()], PlanStrategy::Repeated, 1, 0).unwrap()
    }

    /// Minimal supervisor: records failures and serves fixed replans.
    async fn serve_replans(
        mut rx: mpsc::Receiver<TeamMsg>,
        memory: Arc<std::sync::Mutex<Vec<FailureRecord>>>,
    ) {
        while let Some(msg) = rx.recv().await {
            match msg {
                TeamMsg::Failure { record } => memory.lock().unwrap().push(record),
                TeamMsg::ReplanRequest { prior_plans, reply, .. } => {
                    let next = Plan::new(
                        vec!["retry differently".into()],
                        PlanStrategy::Replanned,
                        prior_plans.last().map(|p| p.generation_index + 1).unwrap_or(1),
                        1,
                    )
                    .unwrap();
                    let _ = reply.send(Some(next));
                }
                TeamMsg::Progress { .. } => {}
            }
        }
    }

    fn run_recovery(answer_on_attempt: u32) -> (TeamOutcome, usize) {
        let clock = VirtualClock::new();
        let (tx, rx) = mpsc::channel(16);
        let memory = Arc::new(std::sync::Mutex::new(Vec::new()));
        let env = env(&clock, tx);
        let executor = FlakyTeam {
            answer_on_attempt,
            calls: AtomicU32::new(0),
        };
        let task = Task::new("t", "q?");
        let p = plan();
        let mem = memory.clone();
        let outcome = run_virtual(&clock, async move {
            let supervisor = serve_replans(rx, mem);
            let team = attempt_with_recovery(&executor, &task, &p, &env);
            tokio::select! {
                outcome = team => outcome,
                _ = supervisor => unreachable!("supervisor outlives the team"),
            }
        })
        .unwrap();
        let grown = memory.lock().unwrap().len();
        (outcome, grown)
    }

    #[test]
    fn second_attempt_succeeds_and_memory_grows_once() {
        let (outcome, memory) = run_recovery(2);
        assert!(outcome.success);
        assert_eq!(outcome.attempts, 2);
        assert_eq!(memory, 1);
    }

    #[test]
    fn all_attempts_fail_memory_grows_each_time() {
        let (outcome, memory) = run_recovery(99);
        assert!(!outcome.success);
        assert_eq!(outcome.attempts, 3);
        assert_eq!(memory, 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TeamConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.max_steps = 2;
        assert!(cfg.validate().is_err());
        cfg = TeamConfig {
            agents: vec![AgentRole::Coder],
            ..TeamConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
