//! Runtime and evaluation harness for racing independent multi-agent solver
//! teams against the same task.
//!
//! A race fans out `n` teams over generated plans and either terminates on
//! the first returned answer (early-stop) or waits for `k` answers and
//! aggregates them. Latency is measured on a run-local timeline and token
//! spend is tracked in a time-stamped ledger so the cost of a race can be
//! computed exactly at the termination instant. Recorded latency traces can
//! be replayed under a virtual clock, making every experiment deterministic
//! and fast.

pub mod aggregate;
pub mod bench;
pub mod cancel;
pub mod domain;
pub mod gateway;
pub mod ledger;
pub mod planning;
pub mod race;
pub mod team;
pub mod time;

pub use cancel::CancelToken;
pub use domain::{Plan, PlanStrategy, Task, TeamId, TeamOutcome, Transcript};
pub use ledger::{CostLedger, MicroUsd, PriceTable};
pub use time::{Clock, Instant, RealClock, VirtualClock};
