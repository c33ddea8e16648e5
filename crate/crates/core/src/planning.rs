//! Plan generation in three forms: repeated sampling, diversity-conditioned
//! sequential generation, and failure-informed replanning.
//!
//! Plans are advisory bullet lists, parsed lexically from model output so
//! tests stay deterministic. Prompt templates load from asset files and the
//! asset provenance is recorded in run reports so experiments can swap
//! prompts without a rebuild.

use std::path::Path;

use thiserror::Error;

use crate::aggregate::tail_chars;
use crate::domain::{AgentRole, FailureRecord, Plan, PlanStrategy, Task};
use crate::gateway::{CallContext, ChatMessage, ChatRequest, Gateway, GatewayError};

/// Planning model calls sample at high temperature by default.
pub const DEFAULT_PLAN_TEMPERATURE: f64 = 1.0;

/// Replan prompts keep at most this many trailing characters per failure
/// transcript.
pub const REPLAN_EXCERPT_CHARS: usize = 4_000;

const PLAN_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("plan parse: no bullet lines in model output")]
    Parse { raw: String },
    #[error("planning precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("prompt assets: {0}")]
    Asset(String),
}

/// Prompt templates, loaded once per experiment.
#[derive(Debug, Clone)]
pub struct PromptAssets {
    pub base_plan: String,
    pub diverse_suffix: String,
    pub replan: String,
    pub aggregate: String,
    /// Provenance string recorded in run reports.
    pub source: String,
}

impl PromptAssets {
    /// Templates compiled into the binary.
    pub fn builtin() -> Self {
        PromptAssets {
            base_plan: include_str!("../assets/base_plan.txt").trim_end().to_string(),
            diverse_suffix: include_str!("../assets/diverse_suffix.txt").trim_end().to_string(),
            replan: include_str!("../assets/replan.txt").trim_end().to_string(),
            aggregate: include_str!("../assets/aggregate.txt").trim_end().to_string(),
            source: "builtin:v1".to_string(),
        }
    }

    /// Load the four template files from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PlanningError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String, PlanningError> {
            std::fs::read_to_string(dir.join(name))
                .map(|s| s.trim_end().to_string())
                .map_err(|e| PlanningError::Asset(format!("{}: {e}", dir.join(name).display())))
        };
        Ok(PromptAssets {
            base_plan: read("base_plan.txt")?,
            diverse_suffix: read("diverse_suffix.txt")?,
            replan: read("replan.txt")?,
            aggregate: read("aggregate.txt")?,
            source: dir.display().to_string(),
        })
    }
}

/// Inputs to a plan-generation call.
#[derive(Clone, Copy)]
pub struct PlanningContext<'a> {
    pub task: &'a Task,
    pub prior_plans: &'a [Plan],
    pub failure_memory: &'a [FailureRecord],
    pub temperature: f64,
}

impl<'a> PlanningContext<'a> {
    pub fn fresh(task: &'a Task) -> Self {
        PlanningContext {
            task,
            prior_plans: &[],
            failure_memory: &[],
            temperature: DEFAULT_PLAN_TEMPERATURE,
        }
    }

    fn check_ordered(&self) -> Result<(), PlanningError> {
        let ordered = self
            .prior_plans
            .windows(2)
            .all(|w| w[0].generation_index <= w[1].generation_index);
        if !ordered {
            return Err(PlanningError::Precondition(
                "prior_plans must be ordered by generation_index".into(),
            ));
        }
        Ok(())
    }

    fn check_pristine(&self) -> Result<(), PlanningError> {
        if !self.prior_plans.is_empty() {
            return Err(PlanningError::Precondition(
                "initial plan generation expects no prior plans".into(),
            ));
        }
        if !self.failure_memory.is_empty() {
            return Err(PlanningError::Precondition(
                "initial plan generation expects an empty failure memory".into(),
            ));
        }
        Ok(())
    }
}

fn agent_roster(agents: &[AgentRole]) -> String {
    agents
        .iter()
        .map(|a| format!("- {}", a.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The base planning prompt (first-plan form).
pub fn base_prompt(assets: &PromptAssets, task: &Task, agents: &[AgentRole]) -> String {
    assets
        .base_plan
        .replace("{task}", &task.question)
        .replace("{agents}", &agent_roster(agents))
}

/// Prompt for the next diverse plan: the base prompt, every earlier plan
/// verbatim, and the diversity instruction exactly once.
pub fn diverse_prompt(
    assets: &PromptAssets,
    task: &Task,
    agents: &[AgentRole],
    prior: &[Plan],
) -> String {
    let mut parts = vec![base_prompt(assets, task, agents)];
    for (idx, plan) in prior.iter().enumerate() {
        parts.push(format!("Plan #{}:\n{}", idx + 1, plan.bullets_text()));
    }
    parts.push(assets.diverse_suffix.clone());
    parts.join("\n\n")
}

/// Replan prompt: the task, each failed plan, and a bounded tail of each
/// failure transcript.
pub fn replan_prompt(assets: &PromptAssets, task: &Task, memory: &[FailureRecord]) -> String {
    let failures = memory
        .iter()
        .enumerate()
        .map(|(idx, record)| {
            format!(
                "Failed plan #{} (team {}):\n{}\n\nTranscript tail:\n{}",
                idx + 1,
                record.team_id,
                record.plan.bullets_text(),
                tail_chars(&record.transcript.render_text(), REPLAN_EXCERPT_CHARS),
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    assets
        .replan
        .replace("{task}", &task.question)
        .replace("{failures}", &failures)
}

/// Extract bullet steps from model output: lines starting with `-`, `*`, or
/// `N.` after trimming, in order.
pub fn parse_plan(raw: &str) -> Result<Vec<String>, PlanningError> {
    let mut steps = Vec::new();
    for line in raw.lines() {
        let trimmed = line.trim();
        let step = if let Some(rest) = trimmed.strip_prefix('-') {
            Some(rest)
        } else if let Some(rest) = trimmed.strip_prefix('*') {
            Some(rest)
        } else {
            numbered_rest(trimmed)
        };
        if let Some(step) = step {
            let step = step.trim();
            if !step.is_empty() {
                steps.push(step.to_string());
            }
        }
    }
    if steps.is_empty() {
        return Err(PlanningError::Parse { raw: raw.to_string() });
    }
    Ok(steps)
}

fn numbered_rest(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    line[digits..].strip_prefix('.')
}

fn plan_request(prompt: String, temperature: f64, team_tag: u32) -> ChatRequest {
    let mut req = ChatRequest::new(
        vec![ChatMessage::user(prompt)],
        format!("team{team_tag}:planner"),
    );
    req.temperature = temperature;
    req.max_output_tokens = PLAN_MAX_OUTPUT_TOKENS;
    req
}

async fn request_plan(
    gateway: &Gateway,
    ctx: &CallContext,
    prompt: String,
    temperature: f64,
    strategy: PlanStrategy,
    generation_index: u32,
    parent_failure_count: u32,
) -> Result<Plan, PlanningError> {
    let request = plan_request(prompt, temperature, ctx.team.0);
    let response = gateway.complete(ctx, &request).await?;
    let steps = parse_plan(&response.content)?;
    Plan::new(steps, strategy, generation_index, parent_failure_count)
        .map_err(|e| PlanningError::Precondition(e.to_string()))
}

/// Generate `n` plans from `n` independent calls with byte-identical prompts.
/// Calls run concurrently; plan `i` is attributed to `contexts[i]`'s team.
pub async fn generate_repeated(
    gateway: &Gateway,
    contexts: &[CallContext],
    assets: &PromptAssets,
    ctx: PlanningContext<'_>,
    agents: &[AgentRole],
) -> Result<Vec<Plan>, PlanningError> {
    ctx.check_pristine()?;
    if contexts.is_empty() {
        return Err(PlanningError::Precondition("n must be >= 1".into()));
    }
    let prompt = base_prompt(assets, ctx.task, agents);
    let calls = contexts.iter().enumerate().map(|(idx, call_ctx)| {
        request_plan(
            gateway,
            call_ctx,
            prompt.clone(),
            ctx.temperature,
            PlanStrategy::Repeated,
            idx as u32 + 1,
            0,
        )
    });
    futures::future::try_join_all(calls).await
}

/// Generate `n` plans sequentially, each conditioned to differ from all
/// earlier ones. The first call uses the base prompt; with `n = 1` this is
/// identical to a single repeated sample.
pub async fn generate_diverse(
    gateway: &Gateway,
    contexts: &[CallContext],
    assets: &PromptAssets,
    ctx: PlanningContext<'_>,
    agents: &[AgentRole],
) -> Result<Vec<Plan>, PlanningError> {
    ctx.check_pristine()?;
    if contexts.is_empty() {
        return Err(PlanningError::Precondition("n must be >= 1".into()));
    }
    let mut plans: Vec<Plan> = Vec::with_capacity(contexts.len());
    for (idx, call_ctx) in contexts.iter().enumerate() {
        let prompt = if plans.is_empty() {
            base_prompt(assets, ctx.task, agents)
        } else {
            diverse_prompt(assets, ctx.task, agents, &plans)
        };
        let plan = request_plan(
            gateway,
            call_ctx,
            prompt,
            ctx.temperature,
            PlanStrategy::Diverse,
            idx as u32 + 1,
            0,
        )
        .await?;
        plans.push(plan);
    }
    Ok(plans)
}

/// Generate one replacement plan from the accumulated failure memory.
pub async fn replan(
    gateway: &Gateway,
    call_ctx: &CallContext,
    assets: &PromptAssets,
    ctx: PlanningContext<'_>,
) -> Result<Plan, PlanningError> {
    ctx.check_ordered()?;
    if ctx.failure_memory.is_empty() {
        return Err(PlanningError::Precondition(
            "replan requires a non-empty failure memory".into(),
        ));
    }
    let prompt = replan_prompt(assets, ctx.task, ctx.failure_memory);
    let generation_index = ctx
        .prior_plans
        .last()
        .map(|p| p.generation_index + 1)
        .unwrap_or(1);
    request_plan(
        gateway,
        call_ctx,
        prompt,
        ctx.temperature,
        PlanStrategy::Replanned,
        generation_index,
        ctx.failure_memory.len() as u32,
    )
    .await
}
