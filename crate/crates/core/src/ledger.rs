//! Time-stamped token-usage ledger, pricing, and cumulative-cost queries.
//!
//! Money is integer micro-dollars internally; decimals appear only at the
//! reporting boundary. Each event's cost is an integer, so every aggregate
//! (per-team cumulative cost, race cost at a cutoff, grand total) is an exact
//! sum with no rounding drift.

use std::collections::BTreeSet;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::TeamId;
use crate::time::Instant;

/// Integer micro-dollars (1_000_000 = $1).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MicroUsd(pub u64);

impl MicroUsd {
    pub const ZERO: MicroUsd = MicroUsd(0);

    pub const fn from_micros(micros: u64) -> Self {
        MicroUsd(micros)
    }

    pub fn from_dollars(dollars: f64) -> Self {
        MicroUsd((dollars * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_dollars(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Add for MicroUsd {
    type Output = MicroUsd;
    fn add(self, rhs: MicroUsd) -> MicroUsd {
        MicroUsd(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for MicroUsd {
    fn add_assign(&mut self, rhs: MicroUsd) {
        *self = *self + rhs;
    }
}

impl Sum for MicroUsd {
    fn sum<I: Iterator<Item = MicroUsd>>(iter: I) -> MicroUsd {
        iter.fold(MicroUsd::ZERO, |a, b| a + b)
    }
}

impl std::fmt::Display for MicroUsd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "${:.6}", self.as_dollars())
    }
}

/// Per-million-token rates. Defaults are the GPT-4o list prices:
/// $2.50 per 1M input tokens, $10.00 per 1M output tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PriceTableDollars", into = "PriceTableDollars")]
pub struct PriceTable {
    pub input_per_million: MicroUsd,
    pub output_per_million: MicroUsd,
}

#[derive(Serialize, Deserialize)]
struct PriceTableDollars {
    input_rate: f64,
    output_rate: f64,
}

impl TryFrom<PriceTableDollars> for PriceTable {
    type Error = String;
    fn try_from(d: PriceTableDollars) -> Result<Self, String> {
        if !(d.input_rate >= 0.0) || !(d.output_rate >= 0.0) {
            return Err("price rates must be >= 0".into());
        }
        Ok(PriceTable {
            input_per_million: MicroUsd::from_dollars(d.input_rate),
            output_per_million: MicroUsd::from_dollars(d.output_rate),
        })
    }
}

impl From<PriceTable> for PriceTableDollars {
    fn from(p: PriceTable) -> Self {
        PriceTableDollars {
            input_rate: p.input_per_million.as_dollars(),
            output_rate: p.output_per_million.as_dollars(),
        }
    }
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable {
            input_per_million: MicroUsd::from_micros(2_500_000),
            output_per_million: MicroUsd::from_micros(10_000_000),
        }
    }
}

/// tokens * rate-per-million, floored to integer micro-dollars.
fn token_cost(tokens: u64, rate_per_million: MicroUsd) -> MicroUsd {
    MicroUsd(((tokens as u128 * rate_per_million.0 as u128) / 1_000_000) as u64)
}

/// What a usage event charges for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UsageKind {
    /// Prompt tokens, charged at the instant a request is physically sent.
    Dispatch { prompt_tokens: u64 },
    /// Completion tokens, charged at the instant a reply is received.
    Completion { completion_tokens: u64 },
}

/// One time-stamped token charge attributed to a team.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub team: TeamId,
    pub instant: Instant,
    #[serde(flatten)]
    pub kind: UsageKind,
}

impl UsageEvent {
    pub fn cost(&self, prices: &PriceTable) -> MicroUsd {
        match self.kind {
            UsageKind::Dispatch { prompt_tokens } => {
                token_cost(prompt_tokens, prices.input_per_million)
            }
            UsageKind::Completion { completion_tokens } => {
                token_cost(completion_tokens, prices.output_per_million)
            }
        }
    }
}

/// Append-only usage ledger for one race.
///
/// Appends from concurrent teams are serialized behind a lock; queries take a
/// consistent snapshot. Events carry explicit instants, so a slow code path
/// may append an event time-stamped in the past and cumulative-cost queries
/// still see it at the right place on the timeline.
#[derive(Debug, Default)]
pub struct CostLedger {
    events: Mutex<Vec<UsageEvent>>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, event: UsageEvent) {
        self.events.lock().expect("ledger lock").push(event);
    }

    pub fn record_dispatch(&self, team: TeamId, instant: Instant, prompt_tokens: u64) {
        self.append(UsageEvent {
            team,
            instant,
            kind: UsageKind::Dispatch { prompt_tokens },
        });
    }

    pub fn record_completion(&self, team: TeamId, instant: Instant, completion_tokens: u64) {
        self.append(UsageEvent {
            team,
            instant,
            kind: UsageKind::Completion { completion_tokens },
        });
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<UsageEvent> {
        self.events.lock().expect("ledger lock").clone()
    }

    pub fn teams(&self) -> BTreeSet<TeamId> {
        self.events
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|e| e.team)
            .collect()
    }

    /// Cumulative cost incurred by `team` up to and including instant `t`.
    /// An unknown team costs zero (with an audit warning).
    pub fn cost_at(&self, team: TeamId, t: Instant, prices: &PriceTable) -> MicroUsd {
        let events = self.events.lock().expect("ledger lock");
        if !events.iter().any(|e| e.team == team) {
            tracing::warn!(team = team.0, "cost_at query for unknown team");
            return MicroUsd::ZERO;
        }
        events
            .iter()
            .filter(|e| e.team == team && e.instant <= t)
            .map(|e| e.cost(prices))
            .sum()
    }

    /// Total cost of every event regardless of instant.
    pub fn total_cost(&self, prices: &PriceTable) -> MicroUsd {
        self.events
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|e| e.cost(prices))
            .sum()
    }

    /// Total cost of one team's events regardless of instant.
    pub fn team_total(&self, team: TeamId, prices: &PriceTable) -> MicroUsd {
        self.events
            .lock()
            .expect("ledger lock")
            .iter()
            .filter(|e| e.team == team)
            .map(|e| e.cost(prices))
            .sum()
    }

    /// Race cost at a cutoff: sum over all teams of `cost_at(team, cutoff)`.
    /// Because event costs are integers, this equals the per-team sum exactly.
    pub fn race_cost(&self, cutoff: Instant, prices: &PriceTable) -> MicroUsd {
        self.events
            .lock()
            .expect("ledger lock")
            .iter()
            .filter(|e| e.instant <= cutoff)
            .map(|e| e.cost(prices))
            .sum()
    }
}
