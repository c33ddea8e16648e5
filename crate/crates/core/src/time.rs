//! Run-local clocks and the deterministic virtual-time executor.
//!
//! Every task run owns a timeline that starts at instant zero. Live runs
//! anchor the timeline to the OS monotonic clock; replay runs use
//! [`VirtualClock`], a discrete-event clock that only moves when
//! [`run_virtual`] finds nothing left to poll. Wall-clock dates never enter
//! the timeline, which is what makes replays bit-identical.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::future::Future;
use std::ops::{Add, AddAssign, Sub};
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An instant on the run-local timeline, in nanoseconds since run start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Instant(u64);

impl Instant {
    pub const ZERO: Instant = Instant(0);

    pub const fn from_nanos(ns: u64) -> Self {
        Instant(ns)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Instant(ms * 1_000_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Instant(secs * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    /// Duration since an earlier instant, clamped to zero if `earlier` is later.
    pub fn saturating_since(self, earlier: Instant) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Instant {
    type Output = Instant;
    fn add(self, rhs: Duration) -> Instant {
        Instant(self.0.saturating_add(rhs.as_nanos() as u64))
    }
}

impl AddAssign<Duration> for Instant {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub<Instant> for Instant {
    type Output = Duration;
    fn sub(self, rhs: Instant) -> Duration {
        self.saturating_since(rhs)
    }
}

impl std::fmt::Display for Instant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}s", self.as_secs_f64())
    }
}

/// Boxed sleep future returned by [`Clock::sleep_until`].
pub type SleepFuture = Pin<Box<dyn Future<Output = ()> + Send>>;

/// Uniform time source for a single run.
///
/// `now` is non-decreasing. Sleeping is the only way code may wait for time
/// to pass; under a virtual clock that is what drives the event scheduler.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
    fn sleep_until(&self, deadline: Instant) -> SleepFuture;
    fn sleep(&self, duration: Duration) -> SleepFuture {
        self.sleep_until(self.now() + duration)
    }
}

/// Monotonic wall clock anchored at construction time.
///
/// `sleep_until` uses the tokio timer and therefore needs a running tokio
/// runtime with time enabled; virtual runs never touch it.
pub struct RealClock {
    start: std::time::Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock {
            start: std::time::Instant::now(),
        }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now(&self) -> Instant {
        Instant(self.start.elapsed().as_nanos() as u64)
    }

    fn sleep_until(&self, deadline: Instant) -> SleepFuture {
        let remaining = deadline.saturating_since(self.now());
        Box::pin(tokio::time::sleep(remaining))
    }
}

struct TimerCell {
    fired: AtomicBool,
    cancelled: AtomicBool,
    waker: Mutex<Option<Waker>>,
}

impl TimerCell {
    fn new() -> Arc<Self> {
        Arc::new(TimerCell {
            fired: AtomicBool::new(false),
            cancelled: AtomicBool::new(false),
            waker: Mutex::new(None),
        })
    }

    fn fire(&self) -> Option<Waker> {
        self.fired.store(true, Ordering::SeqCst);
        self.waker.lock().expect("timer waker lock").take()
    }
}

struct TimerEntry {
    deadline: u64,
    seq: u64,
    cell: Arc<TimerCell>,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.deadline, self.seq) == (other.deadline, other.seq)
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deadline, self.seq).cmp(&(other.deadline, other.seq))
    }
}

#[derive(Default)]
struct VirtualState {
    now: u64,
    next_seq: u64,
    timers: BinaryHeap<Reverse<TimerEntry>>,
}

/// Discrete-event virtual clock.
///
/// Time advances only through [`VirtualClock::fire_next`] (normally called by
/// [`run_virtual`]) or an explicit [`VirtualClock::advance_to`]. Timers fire
/// in (deadline, registration order), which gives replays a strict total
/// order of events.
#[derive(Clone)]
pub struct VirtualClock {
    state: Arc<Mutex<VirtualState>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            state: Arc::new(Mutex::new(VirtualState::default())),
        }
    }

    /// Deadline of the earliest live timer, if any.
    pub fn next_deadline(&self) -> Option<Instant> {
        let mut state = self.state.lock().expect("clock lock");
        while let Some(Reverse(entry)) = state.timers.peek() {
            if entry.cell.cancelled.load(Ordering::SeqCst) {
                state.timers.pop();
            } else {
                return Some(Instant(entry.deadline));
            }
        }
        None
    }

    /// Advance to the earliest live timer and fire it. Returns false when no
    /// live timer is pending.
    pub fn fire_next(&self) -> bool {
        let waker = {
            let mut state = self.state.lock().expect("clock lock");
            loop {
                let Some(Reverse(entry)) = state.timers.pop() else {
                    return false;
                };
                if entry.cell.cancelled.load(Ordering::SeqCst) {
                    continue;
                }
                state.now = state.now.max(entry.deadline);
                break entry.cell.fire();
            }
        };
        if let Some(w) = waker {
            w.wake();
        }
        true
    }

    /// Fire every timer with deadline at or before `target`, then settle the
    /// clock at `target` (never moving backwards).
    pub fn advance_to(&self, target: Instant) {
        loop {
            match self.next_deadline() {
                Some(d) if d <= target => {
                    self.fire_next();
                }
                _ => break,
            }
        }
        let mut state = self.state.lock().expect("clock lock");
        state.now = state.now.max(target.as_nanos());
    }

    fn register(&self, deadline: Instant) -> TimerFuture {
        let mut state = self.state.lock().expect("clock lock");
        let cell = TimerCell::new();
        if deadline.as_nanos() <= state.now {
            cell.fired.store(true, Ordering::SeqCst);
        } else {
            let seq = state.next_seq;
            state.next_seq += 1;
            state.timers.push(Reverse(TimerEntry {
                deadline: deadline.as_nanos(),
                seq,
                cell: cell.clone(),
            }));
        }
        TimerFuture { cell }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Instant {
        Instant(self.state.lock().expect("clock lock").now)
    }

    fn sleep_until(&self, deadline: Instant) -> SleepFuture {
        Box::pin(self.register(deadline))
    }
}

struct TimerFuture {
    cell: Arc<TimerCell>,
}

impl Future for TimerFuture {
    type Output = ();
    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.cell.fired.load(Ordering::SeqCst) {
            Poll::Ready(())
        } else {
            *self.cell.waker.lock().expect("timer waker lock") = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

impl Drop for TimerFuture {
    fn drop(&mut self) {
        // A dropped sleep must not pin the scheduler to its deadline.
        self.cell.cancelled.store(true, Ordering::SeqCst);
    }
}

/// Error from [`run_virtual`].
#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("simulation deadlock: root future pending with no live timers")]
    Deadlock,
}

struct RootSignal {
    woken: AtomicBool,
}

impl Wake for RootSignal {
    fn wake(self: Arc<Self>) {
        self.woken.store(true, Ordering::SeqCst);
    }
    fn wake_by_ref(self: &Arc<Self>) {
        self.woken.store(true, Ordering::SeqCst);
    }
}

/// Drive a future to completion under virtual time.
///
/// Single-threaded: polls the future whenever it has been woken, and when
/// nothing is runnable advances the clock to the earliest pending timer.
/// Errors with [`SimError::Deadlock`] if the future is pending but no timer
/// can ever wake it.
pub fn run_virtual<F: Future>(clock: &VirtualClock, future: F) -> Result<F::Output, SimError> {
    let signal = Arc::new(RootSignal {
        woken: AtomicBool::new(true),
    });
    let waker = Waker::from(signal.clone());
    let mut cx = Context::from_waker(&waker);
    let mut future = std::pin::pin!(future);
    loop {
        while signal.woken.swap(false, Ordering::SeqCst) {
            if let Poll::Ready(value) = future.as_mut().poll(&mut cx) {
                return Ok(value);
            }
        }
        if !clock.fire_next() {
            return Err(SimError::Deadlock);
        }
    }
}
