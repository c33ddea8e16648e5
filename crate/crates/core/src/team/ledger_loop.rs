//! Live team executor: an orchestrator model drives coder and terminal
//! agents step by step until it emits a final answer, stalls, or runs out of
//! steps.
//!
//! Each step is one orchestrator call deciding the next agent and
//! instruction, followed by at most one agent action. Stall detection fires
//! when the last `stall_window` (agent, instruction) decisions are identical
//! or no novel observation appeared across `stall_window` steps.

use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use super::{TeamExecutor, TeamRunEnv};
use crate::aggregate::extract_final_answer;
use crate::domain::{
    AgentRole, EntryKind, Plan, Task, TeamOutcome, Transcript, TranscriptEntry,
};
use crate::gateway::{CallContext, ChatMessage, ChatRequest, Gateway, GatewayError};

const ORCHESTRATOR_SYSTEM: &str = "You are the orchestrator of a small team working on the user's request.\n\
On each turn reply in exactly one of these two forms.\n\
To delegate a step:\n\
AGENT: <agent name>\n\
INSTRUCTION: <what that agent should do next>\n\
When the task is complete:\n\
FINAL ANSWER: <the answer>\n\
Express the final answer in the format the request asks for: a number, as few words as possible, or a comma-separated list of values. Do not add units, explanations, or abbreviations unless asked.";

const CODER_SYSTEM: &str = "You write code to carry out the instruction you are given. \
Reply with a single fenced code block and nothing else.";

const OBSERVATION_LIMIT: usize = 4_000;

/// Sandbox policy for the terminal agent. Disabled by default; when enabled,
/// only commands whose program name is on the allow-list run, inside
/// `workdir`.
#[derive(Debug, Clone)]
pub struct TerminalPolicy {
    pub enabled: bool,
    pub allow_list: Vec<String>,
    pub workdir: PathBuf,
}

impl Default for TerminalPolicy {
    fn default() -> Self {
        TerminalPolicy {
            enabled: false,
            allow_list: Vec::new(),
            workdir: PathBuf::from("."),
        }
    }
}

impl TerminalPolicy {
    /// Execute a command line under the policy. Failure text is an
    /// observation, never an error.
    pub fn execute(&self, command_line: &str) -> String {
        if !self.enabled {
            return "terminal disabled".to_string();
        }
        let mut parts = command_line.split_whitespace();
        let Some(program) = parts.next() else {
            return "empty command".to_string();
        };
        if !self.allow_list.iter().any(|allowed| allowed == program) {
            return format!("command `{program}` not on the allow-list");
        }
        let args: Vec<&str> = parts.collect();
        // Commands are short-lived; a blocking wait keeps the loop simple.
        match std::process::Command::new(program)
            .args(&args)
            .current_dir(&self.workdir)
            .output()
        {
            Ok(output) => {
                let mut text = String::from_utf8_lossy(&output.stdout).to_string();
                let stderr = String::from_utf8_lossy(&output.stderr);
                if !stderr.trim().is_empty() {
                    text.push_str("\n[stderr]\n");
                    text.push_str(&stderr);
                }
                if !output.status.success() {
                    text.push_str(&format!("\n[exit status: {}]", output.status));
                }
                truncate_tail(&text, OBSERVATION_LIMIT)
            }
            Err(e) => format!("failed to run `{program}`: {e}"),
        }
    }
}

fn truncate_tail(text: &str, limit: usize) -> String {
    let total = text.chars().count();
    if total <= limit {
        return text.to_string();
    }
    text.chars().skip(total - limit).collect()
}

/// Result of one ledger-loop step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Continue,
    FinalAnswer(String),
    Stalled,
}

fn digest(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mutable state of one attempt: conversation history, transcript, and the
/// stall-detection windows.
pub struct LedgerLoopState {
    transcript: Transcript,
    history: Vec<ChatMessage>,
    recent_decisions: VecDeque<String>,
    seen_observations: HashSet<String>,
    steps_since_novel: u32,
    steps_taken: u32,
}

impl LedgerLoopState {
    pub fn new(task: &Task, plan: &Plan, env: &TeamRunEnv) -> Self {
        let now = env.clock.now();
        let mut transcript = Transcript::new(env.team);
        let _ = transcript.push(TranscriptEntry {
            instant: now,
            actor: "orchestrator".into(),
            kind: EntryKind::Plan,
            payload: plan.bullets_text(),
        });
        let opening = format!(
            "Request: {}\n\nAdvisory plan:\n{}",
            task.question,
            plan.bullets_text()
        );
        let _ = transcript.push(TranscriptEntry {
            instant: now,
            actor: "user".into(),
            kind: EntryKind::Message,
            payload: opening.clone(),
        });
        LedgerLoopState {
            transcript,
            history: vec![ChatMessage::system(ORCHESTRATOR_SYSTEM), ChatMessage::user(opening)],
            recent_decisions: VecDeque::new(),
            seen_observations: HashSet::new(),
            steps_since_novel: 0,
            steps_taken: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps_taken
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    fn log(&mut self, env: &TeamRunEnv, actor: &str, kind: EntryKind, payload: String) {
        let _ = self.transcript.push(TranscriptEntry {
            instant: env.clock.now(),
            actor: actor.into(),
            kind,
            payload,
        });
    }

    /// One step: orchestrator decision, then at most one agent action.
    pub async fn step(
        &mut self,
        env: &TeamRunEnv,
        gateway: &Gateway,
        terminal: &TerminalPolicy,
    ) -> Result<StepResult, GatewayError> {
        self.steps_taken += 1;
        let ctx = CallContext {
            team: env.team,
            clock: env.clock.clone(),
            ledger: env.ledger.clone(),
            cancel: env.cancel.clone(),
        };
        let request = ChatRequest::new(
            self.history.clone(),
            format!("team{}:orchestrator", env.team.0),
        );
        self.log(
            env,
            "orchestrator",
            EntryKind::ModelRequest,
            request.last_content().to_string(),
        );
        let reply = gateway.complete(&ctx, &request).await?;
        self.log(env, "orchestrator", EntryKind::ModelResponse, reply.content.clone());
        self.history.push(ChatMessage::assistant(reply.content.clone()));

        if let Some(answer) = extract_final_answer(&reply.content) {
            if !answer.is_empty() {
                self.log(env, "orchestrator", EntryKind::Verdict, format!("FINAL ANSWER: {answer}"));
                return Ok(StepResult::FinalAnswer(answer));
            }
        }

        let decision = parse_decision(&reply.content);
        let agent_name = decision
            .as_ref()
            .map(|(agent, _)| agent.clone())
            .unwrap_or_else(|| "unparsed".to_string());
        let decision_digest = match &decision {
            Some((agent, instruction)) => digest(&[agent, instruction]),
            None => digest(&["unparsed", &reply.content]),
        };
        // Decision-loop stall: identical (agent, instruction) digests across
        // the whole window.
        self.recent_decisions.push_back(decision_digest);
        if self.recent_decisions.len() > env.config.stall_window as usize {
            self.recent_decisions.pop_front();
        }
        if self.recent_decisions.len() == env.config.stall_window as usize {
            let first = &self.recent_decisions[0];
            if self.recent_decisions.iter().all(|d| d == first) {
                self.log(env, "orchestrator", EntryKind::Observation, "stalled: repeated decisions".into());
                return Ok(StepResult::Stalled);
            }
        }

        let observation = match decision {
            None => "could not parse orchestrator decision".to_string(),
            Some((agent, instruction)) => {
                self.log(env, "orchestrator", EntryKind::Action, format!("{agent}: {instruction}"));
                self.run_agent(env, gateway, terminal, &agent, &instruction).await?
            }
        };
        self.log(env, agent_name, EntryKind::Observation, observation.clone());
        // Observation-novelty stall: no new observation hash for a window.
        if self.seen_observations.insert(digest(&[&observation])) {
            self.steps_since_novel = 0;
        } else {
            self.steps_since_novel += 1;
            if self.steps_since_novel >= env.config.stall_window {
                self.log(env, "orchestrator", EntryKind::Observation, "stalled: no novel observations".into());
                return Ok(StepResult::Stalled);
            }
        }
        self.history.push(ChatMessage::user(format!(
            "Observation from {agent_name}:\n{observation}"
        )));
        Ok(StepResult::Continue)
    }

    async fn run_agent(
        &mut self,
        env: &TeamRunEnv,
        gateway: &Gateway,
        terminal: &TerminalPolicy,
        agent: &str,
        instruction: &str,
    ) -> Result<String, GatewayError> {
        let role = env
            .config
            .agents
            .iter()
            .find(|r| r.as_str() == agent)
            .copied();
        match role {
            Some(AgentRole::Coder) => {
                let ctx = CallContext {
                    team: env.team,
                    clock: env.clock.clone(),
                    ledger: env.ledger.clone(),
                    cancel: env.cancel.clone(),
                };
                let request = ChatRequest::new(
                    vec![ChatMessage::system(CODER_SYSTEM), ChatMessage::user(instruction)],
                    format!("team{}:coder", env.team.0),
                );
                self.log(env, "coder", EntryKind::ModelRequest, instruction.to_string());
                let reply = gateway.complete(&ctx, &request).await?;
                self.log(env, "coder", EntryKind::ModelResponse, reply.content.clone());
                Ok(reply.content)
            }
            Some(AgentRole::ComputerTerminal) => Ok(terminal.execute(instruction)),
            Some(AgentRole::Orchestrator) | None => {
                Ok(format!("agent `{agent}` is not available to this team"))
            }
        }
    }
}

/// Parse an `AGENT:`/`INSTRUCTION:` decision. The instruction runs from its
/// marker to the end of the reply.
fn parse_decision(reply: &str) -> Option<(String, String)> {
    let agent_line = reply
        .lines()
        .find_map(|l| l.trim().strip_prefix("AGENT:"))?
        .trim()
        .to_string();
    let idx = reply.find("INSTRUCTION:")?;
    let instruction = reply[idx + "INSTRUCTION:".len()..].trim().to_string();
    if agent_line.is_empty() || instruction.is_empty() {
        return None;
    }
    Some((agent_line, instruction))
}

/// Live executor configuration: a gateway plus the terminal sandbox policy.
pub struct LedgerLoopExecutor {
    gateway: Arc<Gateway>,
    terminal: TerminalPolicy,
}

impl LedgerLoopExecutor {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        LedgerLoopExecutor {
            gateway,
            terminal: TerminalPolicy::default(),
        }
    }

    pub fn with_terminal(mut self, terminal: TerminalPolicy) -> Self {
        self.terminal = terminal;
        self
    }
}

#[async_trait]
impl TeamExecutor for LedgerLoopExecutor {
    async fn run_team(&self, task: &Task, plan: &Plan, env: &TeamRunEnv) -> TeamOutcome {
        let started = env.clock.now();
        let mut state = LedgerLoopState::new(task, plan, env);
        let mut answer: Option<String> = None;
        let mut cancelled = false;
        for step in 1..=env.config.max_steps {
            if env.cancel.is_cancelled() {
                cancelled = true;
                break;
            }
            match state.step(env, &self.gateway, &self.terminal).await {
                Ok(StepResult::Continue) => {
                    env.supervisor
                        .report_progress(env.team, env.clock.now(), format!("step {step}"))
                        .await;
                }
                Ok(StepResult::FinalAnswer(a)) => {
                    answer = Some(a);
                    break;
                }
                Ok(StepResult::Stalled) => break,
                Err(GatewayError::Cancelled) => {
                    cancelled = true;
                    break;
                }
                Err(err) => {
                    // Backend trouble is evidence, not a crash.
                    state.log(env, "orchestrator", EntryKind::Observation, format!("backend error: {err}"));
                    break;
                }
            }
        }
        let steps = state.steps_taken();
        let finished = env.clock.now();
        TeamOutcome::new(
            env.team,
            answer,
            state.into_transcript(),
            started,
            finished,
            steps,
            1,
            cancelled,
        )
        .expect("ledger loop outcome is valid")
    }

    fn supports_recovery(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cancel::CancelToken;
    use crate::domain::{PlanStrategy, TeamId};
    use crate::gateway::mock::{ScriptEntry, ScriptedBackend};
    use crate::ledger::CostLedger;
    use crate::team::{SupervisorHandle, TeamConfig, TeamMsg};
    use crate::time::{run_virtual, VirtualClock};
    use tokio::sync::mpsc;

    fn entry(tag: &str, content: &str) -> ScriptEntry {
        ScriptEntry {
            tag: tag.into(),
            match_substring: None,
            content: content.into(),
            prompt_tokens: 100,
            completion_tokens: 20,
            latency_ms: 1_000,
        }
    }

    fn env(clock: &VirtualClock) -> (TeamRunEnv, mpsc::Receiver<TeamMsg>) {
        let (tx, rx) = mpsc::channel(64);
        (
            TeamRunEnv {
                team: TeamId(1),
                clock: Arc::new(clock.clone()),
                ledger: Arc::new(CostLedger::new()),
                cancel: CancelToken::new(),
                supervisor: SupervisorHandle::new(tx),
                config: TeamConfig::default(),
            },
            rx,
        )
    }

    fn plan() -> Plan {
        Plan::new(vec!["figure it out".into()], PlanStrategy::Repeated, 1, 0).unwrap()
    }

    fn run(entries: Vec<ScriptEntry>) -> (TeamOutcome, usize) {
        let clock = VirtualClock::new();
        let (env, _rx) = env(&clock);
        let executor = LedgerLoopExecutor::new(Arc::new(Gateway::new(Arc::new(
            ScriptedBackend::from_entries(entries),
        ))));
        let task = Task::new("t", "How many studio albums?");
        let p = plan();
        let ledger = env.ledger.clone();
        let outcome =
            run_virtual(&clock, async { executor.run_team(&task, &p, &env).await }).unwrap();
        (outcome, ledger.len())
    }

    #[test]
    fn immediate_final_answer_takes_one_step() {
        let (outcome, events) = run(vec![entry("team1:orchestrator", "FINAL ANSWER: 3")]);
        assert!(outcome.success);
        assert_eq!(outcome.answer.as_deref(), Some("3"));
        assert_eq!(outcome.steps_taken, 1);
        // One orchestrator call: exactly one dispatch+completion pair.
        assert_eq!(events, 2);
    }

    #[test]
    fn terminal_step_appends_exactly_one_event_pair() {
        let (outcome, events) = run(vec![
            entry(
                "team1:orchestrator",
                "AGENT: computer_terminal\nINSTRUCTION: ls",
            ),
            entry("team1:orchestrator", "FINAL ANSWER: done"),
        ]);
        assert!(outcome.success);
        assert_eq!(outcome.steps_taken, 2);
        // Two orchestrator calls, no model-backed agent call (terminal is
        // disabled by default and costs no tokens).
        assert_eq!(events, 4);
        let rendered = outcome.transcript.render_text();
        assert!(rendered.contains("terminal disabled"));
    }

    #[test]
    fn coder_step_appends_two_event_pairs() {
        let (outcome, events) = run(vec![
            entry("team1:orchestrator", "AGENT: coder\nINSTRUCTION: compute it"),
            entry("team1:coder", "```python\nprint(3)\n```"),
            entry("team1:orchestrator", "FINAL ANSWER: 3"),
        ]);
        assert!(outcome.success);
        assert_eq!(events, 6);
    }

    #[test]
    fn three_identical_decisions_stall() {
        let decision = "AGENT: coder\nINSTRUCTION: retry same code";
        let (outcome, _) = run(vec![
            entry("team1:orchestrator", decision),
            entry("team1:coder", "attempt A"),
            entry("team1:orchestrator", decision),
            entry("team1:coder", "attempt B"),
            entry("team1:orchestrator", decision),
        ]);
        assert!(!outcome.success);
        assert_eq!(outcome.steps_taken, 3);
        assert!(outcome.transcript.render_text().contains("stalled: repeated decisions"));
    }

    #[test]
    fn no_novel_observation_stalls() {
        // Distinct instructions but the coder output never changes.
        let (outcome, _) = run(vec![
            entry("team1:orchestrator", "AGENT: coder\nINSTRUCTION: try path a"),
            entry("team1:coder", "same result"),
            entry("team1:orchestrator", "AGENT: coder\nINSTRUCTION: try path b"),
            entry("team1:coder", "same result"),
            entry("team1:orchestrator", "AGENT: coder\nINSTRUCTION: try path c"),
            entry("team1:coder", "same result"),
            entry("team1:orchestrator", "AGENT: coder\nINSTRUCTION: try path d"),
            entry("team1:coder", "same result"),
        ]);
        assert!(!outcome.success);
        assert!(outcome
            .transcript
            .render_text()
            .contains("stalled: no novel observations"));
    }

    #[test]
    fn backend_error_folds_into_failed_outcome() {
        // Script runs dry after the first decision's agent call.
        let (outcome, _) = run(vec![entry(
            "team1:orchestrator",
            "AGENT: coder\nINSTRUCTION: work",
        )]);
        assert!(!outcome.success);
        assert!(outcome.transcript.render_text().contains("backend error"));
    }

    #[test]
    fn unparseable_decision_continues_as_observation() {
        let (outcome, _) = run(vec![
            entry("team1:orchestrator", "let me think about this..."),
            entry("team1:orchestrator", "FINAL ANSWER: 7"),
        ]);
        assert!(outcome.success);
        assert!(outcome
            .transcript
            .render_text()
            .contains("could not parse orchestrator decision"));
    }

    #[test]
    fn terminal_allow_list_gates_commands() {
        let disabled = TerminalPolicy::default();
        assert_eq!(disabled.execute("echo hi"), "terminal disabled");
        let enabled = TerminalPolicy {
            enabled: true,
            allow_list: vec!["echo".into()],
            workdir: PathBuf::from("."),
        };
        assert!(enabled.execute("echo hi").contains("hi"));
        assert!(enabled.execute("rm -rf /").contains("not on the allow-list"));
    }

    #[test]
    fn parse_decision_shapes() {
        assert_eq!(
            parse_decision("AGENT: coder\nINSTRUCTION: do the thing"),
            Some(("coder".into(), "do the thing".into()))
        );
        assert!(parse_decision("no markers").is_none());
        assert!(parse_decision("AGENT: coder").is_none());
    }
}
