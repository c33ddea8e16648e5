//! Answer aggregation: normalization, majority voting, judge-model
//! aggregation over transcripts, and the best-of-k oracle.

use std::collections::BTreeMap;

use crate::domain::{Task, TeamId, Transcript};
use crate::gateway::{CallContext, ChatMessage, ChatRequest, Gateway};
use crate::planning::PromptAssets;

/// Default per-team transcript budget (characters, tail-kept) for the judge
/// prompt.
pub const DEFAULT_TRANSCRIPT_BUDGET: usize = 20_000;

const JUDGE_MAX_OUTPUT_TOKENS: u32 = 2048;

/// Marker the judge reply must contain; the final answer is whatever follows
/// its last occurrence.
pub const FINAL_ANSWER_MARKER: &str = "FINAL ANSWER";

/// One team's contribution to an aggregation decision. `answer` is absent for
/// teams that finished without answering; their transcripts still carry
/// evidence for the judge and are rendered with "(no answer)".
#[derive(Debug, Clone)]
pub struct BundleEntry {
    pub team_id: TeamId,
    pub answer: Option<String>,
    pub transcript: Transcript,
    /// 1-based arrival position among the bundled outcomes.
    pub arrival_index: u32,
}

/// The answers (and logs) collected from a race, in team-id order with an
/// explicit arrival permutation.
#[derive(Debug, Clone)]
pub struct AnswerBundle {
    pub task: Task,
    pub entries: Vec<BundleEntry>,
}

impl AnswerBundle {
    pub fn new(task: Task, entries: Vec<BundleEntry>) -> Result<Self, String> {
        if entries.is_empty() {
            return Err("bundle must have at least one entry".into());
        }
        let mut seen: Vec<u32> = entries.iter().map(|e| e.arrival_index).collect();
        seen.sort_unstable();
        if seen != (1..=entries.len() as u32).collect::<Vec<_>>() {
            return Err("arrival_index must be a permutation of 1..=len".into());
        }
        Ok(AnswerBundle { task, entries })
    }

    /// Entries sorted by arrival.
    pub fn by_arrival(&self) -> Vec<&BundleEntry> {
        let mut v: Vec<&BundleEntry> = self.entries.iter().collect();
        v.sort_by_key(|e| e.arrival_index);
        v
    }
}

/// Keep at most the last `budget` characters of `text`, prefixing a note when
/// truncation happened.
pub fn tail_chars(text: &str, budget: usize) -> String {
    let total = text.chars().count();
    if total <= budget {
        return text.to_string();
    }
    let tail: String = text
        .chars()
        .skip(total - budget)
        .collect();
    format!("(transcript truncated to last {budget} characters)\n{tail}")
}

/// Canonicalize an answer for comparison: trim, collapse whitespace,
/// lowercase, strip trailing periods and surrounding quotes, and normalize
/// plain numbers (drop thousands separators, leading `$`/`%`, trailing
/// fractional zeros). Idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let mut s: String = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    s = s.to_lowercase();
    loop {
        let before = s.len();
        while s.ends_with('.') {
            s.pop();
            while s.ends_with(' ') {
                s.pop();
            }
        }
        s = strip_surrounding_quotes(&s);
        if s.len() == before {
            break;
        }
    }
    if let Some(numeric) = canonical_number(&s) {
        return numeric;
    }
    s
}

fn strip_surrounding_quotes(s: &str) -> String {
    let mut out = s;
    loop {
        let stripped = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')]
            .iter()
            .find_map(|(open, close)| {
                out.strip_prefix(*open)
                    .and_then(|rest| rest.strip_suffix(*close))
            });
        match stripped {
            Some(inner) if !inner.is_empty() => out = inner.trim(),
            _ => break,
        }
    }
    out.to_string()
}

/// If `s` is a plain number (optionally with a leading `$` or `%`, a sign,
/// and `,` thousands separators), return its canonical form.
fn canonical_number(s: &str) -> Option<String> {
    let trimmed = s.strip_prefix('$').or_else(|| s.strip_prefix('%')).unwrap_or(s);
    let without_commas = trimmed.replace(',', "");
    let body = without_commas.strip_prefix(['+', '-']).unwrap_or(&without_commas);
    if body.is_empty() {
        return None;
    }
    let mut parts = body.splitn(2, '.');
    let int_part = parts.next().unwrap_or("");
    let frac_part = parts.next();
    if int_part.is_empty() || !int_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if let Some(frac) = frac_part {
        if frac.is_empty() || !frac.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
    }
    let negative = without_commas.starts_with('-');
    let int_trimmed = int_part.trim_start_matches('0');
    let int_canonical = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let mut out = String::new();
    if negative && !(int_canonical == "0" && frac_part.map_or(true, |f| f.trim_end_matches('0').is_empty())) {
        out.push('-');
    }
    out.push_str(int_canonical);
    if let Some(frac) = frac_part {
        let frac = frac.trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
    }
    Some(out)
}

/// Majority vote over normalized answers. Groups tie-break by earliest
/// arrival; the winner's earliest-arriving raw answer is returned. `None`
/// when no entry carries an answer.
pub fn majority_vote(bundle: &AnswerBundle) -> Option<String> {
    // normalized answer -> (count, earliest arrival, raw answer at that arrival)
    let mut groups: BTreeMap<String, (usize, u32, String)> = BTreeMap::new();
    for entry in bundle.by_arrival() {
        let Some(raw) = &entry.answer else { continue };
        let key = normalize_answer(raw);
        groups
            .entry(key)
            .and_modify(|(count, _, _)| *count += 1)
            .or_insert((1, entry.arrival_index, raw.clone()));
    }
    groups
        .into_values()
        .max_by(|(ca, aa, _), (cb, ab, _)| ca.cmp(cb).then(ab.cmp(aa)))
        .map(|(_, _, raw)| raw)
}

/// Success iff any normalized answer equals the normalized ground truth;
/// returns the first match by arrival order.
pub fn best_of_k(bundle: &AnswerBundle, ground_truth: &str) -> (bool, Option<String>) {
    let target = normalize_answer(ground_truth);
    for entry in bundle.by_arrival() {
        if let Some(raw) = &entry.answer {
            if normalize_answer(raw) == target {
                return (true, Some(raw.clone()));
            }
        }
    }
    (false, None)
}

/// Build the judge prompt: the task, team count, and per-team transcript
/// excerpt plus response in arrival order.
pub fn build_judge_prompt(assets: &PromptAssets, bundle: &AnswerBundle, budget: usize) -> String {
    let ordered = bundle.by_arrival();
    let blocks = ordered
        .iter()
        .enumerate()
        .map(|(idx, entry)| {
            let number = idx + 1;
            let transcript = tail_chars(&entry.transcript.render_text(), budget);
            let response = entry.answer.as_deref().unwrap_or("(no answer)");
            format!(
                "Transcript from Team #{number}: {transcript}\nResponse from Team #{number}: {response}"
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    assets
        .aggregate
        .replace("{task}", &bundle.task.question)
        .replace("{n}", &ordered.len().to_string())
        .replace("{team_blocks}", &blocks)
}

/// Text after the last `FINAL ANSWER` marker, with any leading colon and
/// surrounding whitespace removed.
pub fn extract_final_answer(reply: &str) -> Option<String> {
    let idx = reply.rfind(FINAL_ANSWER_MARKER)?;
    let after = &reply[idx + FINAL_ANSWER_MARKER.len()..];
    let after = after.trim_start().strip_prefix(':').unwrap_or(after);
    Some(after.trim().to_string())
}

/// Result of judge aggregation, with flags describing any fallback taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub answer: Option<String>,
    pub flags: Vec<String>,
}

/// Aggregate with one judge-model call over the bundled transcripts.
///
/// A reply without the marker falls back to the trimmed full reply (flag
/// `unparsed_judge_reply`); a backend error falls back to majority voting
/// (flag `judge_backend_error`).
pub async fn llm_aggregate(
    bundle: &AnswerBundle,
    gateway: &Gateway,
    ctx: &CallContext,
    assets: &PromptAssets,
    budget: usize,
) -> JudgeVerdict {
    let prompt = build_judge_prompt(assets, bundle, budget);
    let mut request = ChatRequest::new(vec![ChatMessage::user(prompt)], "judge");
    request.max_output_tokens = JUDGE_MAX_OUTPUT_TOKENS;
    match gateway.complete(ctx, &request).await {
        Ok(response) => match extract_final_answer(&response.content) {
            Some(answer) if !answer.is_empty() => JudgeVerdict {
                answer: Some(answer),
                flags: Vec::new(),
            },
            _ => JudgeVerdict {
                answer: Some(response.content.trim().to_string()),
                flags: vec!["unparsed_judge_reply".into()],
            },
        },
        Err(err) => {
            tracing::warn!(error = %err, "judge call failed; falling back to majority vote");
            JudgeVerdict {
                answer: majority_vote(bundle),
                flags: vec!["judge_backend_error".into()],
            }
        }
    }
}
