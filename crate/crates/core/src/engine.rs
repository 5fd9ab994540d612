//! Deterministic discrete-event core.
//!
//! The [`Engine`] owns a virtual clock in integer microseconds and a min-heap
//! of pending events ordered by `(time, seq)`. Cancellation is lazy: a
//! cancelled event stays in the heap and is skipped when popped.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::EngineError;

/// Point in simulated time, in microseconds since simulation start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

/// Length of a simulated interval, in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimDuration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    /// Elapsed time since `earlier`; zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_us(us: u64) -> Self {
        SimDuration(us)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimDuration(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimDuration(s * 1_000_000)
    }

    /// Converts a millisecond quantity, rounding to the nearest microsecond.
    /// Negative and non-finite inputs clamp to zero.
    pub fn from_ms_f64(ms: f64) -> Self {
        if !ms.is_finite() || ms <= 0.0 {
            return SimDuration(0);
        }
        SimDuration((ms * 1_000.0).round() as u64)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Self::from_ms_f64(s * 1_000.0)
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub<SimTime> for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        self.since(rhs)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_ms_f64())
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_ms_f64())
    }
}

/// Coarse classification of events, used for logging and dispatch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    TransferComplete,
    StageComplete,
    ExitTimer,
    GeneratorTick,
    MeasurementTick,
}

/// Payloads carried by the engine must report their kind.
pub trait EventPayload {
    fn kind(&self) -> EventKind;
}

/// Handle returned by [`Engine::schedule`]; identifies one scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

/// A dispatched event.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

impl<P: EventPayload> Event<P> {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

struct Queued<P> {
    time: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pending,
    Cancelled,
    Dispatched,
}

/// One line of the optional dispatch log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

/// Single-threaded discrete-event scheduler.
pub struct Engine<P> {
    now: SimTime,
    heap: BinaryHeap<Queued<P>>,
    status: Vec<Status>,
    live: usize,
    dispatched: u64,
    log: Option<Vec<LogEntry>>,
}

impl<P: EventPayload> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventPayload> Engine<P> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            status: Vec::new(),
            live: 0,
            dispatched: 0,
            log: None,
        }
    }

    /// Records `(time, seq, kind)` for every dispatched event from now on.
    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log(&self) -> &[LogEntry] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of scheduled events that are neither cancelled nor dispatched.
    pub fn pending(&self) -> usize {
        self.live
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<EventHandle, EngineError> {
        if time < self.now {
            return Err(EngineError::ScheduleInPast {
                requested: time,
                now: self.now,
            });
        }
        let seq = self.status.len() as u64;
        self.status.push(Status::Pending);
        self.heap.push(Queued { time, seq, payload });
        self.live += 1;
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(
        &mut self,
        delay: SimDuration,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        self.schedule(self.now + delay, payload)
    }

    /// Marks a pending event as cancelled. Returns `false` if it was already
    /// dispatched or cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> Result<bool, EngineError> {
        let slot = self
            .status
            .get_mut(handle.0 as usize)
            .ok_or(EngineError::UnknownHandle(handle.0))?;
        match *slot {
            Status::Pending => {
                *slot = Status::Cancelled;
                self.live -= 1;
                Ok(true)
            }
            Status::Cancelled | Status::Dispatched => Ok(false),
        }
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        matches!(self.status.get(handle.0 as usize), Some(Status::Pending))
    }

    /// Time of the earliest live event, discarding cancelled heads.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.drop_cancelled_head();
        self.heap.peek().map(|q| q.time)
    }

    fn drop_cancelled_head(&mut self) {
        while let Some(head) = self.heap.peek() {
            if self.status[head.seq as usize] == Status::Cancelled {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next live event with `time <= until` and advances the clock to it.
    pub fn next_event(&mut self, until: Option<SimTime>) -> Option<Event<P>> {
        self.drop_cancelled_head();
        let head = self.heap.peek()?;
        if let Some(limit) = until {
            if head.time > limit {
                return None;
            }
        }
        let q = self.heap.pop()?;
        debug_assert!(q.time >= self.now);
        self.now = q.time;
        self.status[q.seq as usize] = Status::Dispatched;
        self.live -= 1;
        self.dispatched += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(LogEntry {
                time: q.time,
                seq: q.seq,
                kind: q.payload.kind(),
            });
        }
        Some(Event {
            time: q.time,
            seq: q.seq,
            payload: q.payload,
        })
    }

    /// Dispatches every live event with `time <= until` (all events when
    /// `until` is `None`), handing each to `handler`. Returns the dispatch count.
    pub fn run<F>(&mut self, until: Option<SimTime>, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.next_event(until) {
            handler(self, ev);
            count += 1;
        }
        if let Some(limit) = until {
            if limit > self.now && limit != SimTime::MAX {
                self.now = limit;
            }
        }
        count
    }
}

/// Seeded random stream; one per stochastic consumer.
///
/// Streams with the same `(seed, stream_id)` yield identical draws on every
/// platform (ChaCha8 with an explicit stream selector).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Stream ids for the built-in consumers.
pub mod streams {
    pub const WORKLOAD: u64 = 1;
    pub const DISPATCH: u64 = 2;
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        self.rng.gen_range(0..n)
    }

    /// Exponential draw with the given rate (mean `1/rate`).
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Index drawn proportionally to `weights` (which must have a positive sum).
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Tag(u32);

    impl EventPayload for Tag {
        fn kind(&self) -> EventKind {
            EventKind::GeneratorTick
        }
    }

    fn drain(engine: &mut Engine<Tag>, until: Option<SimTime>) -> Vec<u32> {
        let mut seen = Vec::new();
        engine.run(until, |_, ev| seen.push(ev.payload.0));
        seen
    }

    #[test]
    fn equal_times_dispatch_in_schedule_order() {
        let mut e = Engine::new();
        e.schedule(SimTime::ZERO, Tag(1)).unwrap();
        e.schedule(SimTime::ZERO, Tag(2)).unwrap();
        assert_eq!(drain(&mut e, None), vec![1, 2]);
    }

    #[test]
    fn cancelled_event_never_dispatches() {
        let mut e = Engine::new();
        let h = e.schedule(SimTime::from_us(5), Tag(1)).unwrap();
        assert!(e.cancel(h).unwrap());
        assert_eq!(drain(&mut e, None), Vec::<u32>::new());
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_us(10), Tag(1)).unwrap();
        drain(&mut e, None);
        let err = e.schedule(SimTime::from_us(9), Tag(2)).unwrap_err();
        assert!(matches!(err, EngineError::ScheduleInPast { .. }));
    }

    #[test]
    fn cancel_semantics() {
        let mut e = Engine::new();
        let a = e.schedule(SimTime::from_us(1), Tag(1)).unwrap();
        let b = e.schedule(SimTime::from_us(2), Tag(2)).unwrap();
        assert!(e.cancel(b).unwrap());
        assert!(!e.cancel(b).unwrap());
        drain(&mut e, None);
        assert!(!e.cancel(a).unwrap());
        assert!(matches!(
            e.cancel(EventHandle(99)),
            Err(EngineError::UnknownHandle(99))
        ));
    }

    #[test]
    fn run_respects_until_and_ordering() {
        let mut e: Engine<Tag> = Engine::new();
        assert_eq!(e.run(None, |_, _| {}), 0);

        e.schedule(SimTime::from_us(2), Tag(2)).unwrap();
        e.schedule(SimTime::from_us(1), Tag(1)).unwrap();
        e.schedule(SimTime::from_us(2), Tag(3)).unwrap();
        assert_eq!(drain(&mut e, None), vec![1, 2, 3]);

        let mut e = Engine::new();
        e.schedule(SimTime::from_us(1), Tag(1)).unwrap();
        e.schedule(SimTime::from_us(2), Tag(2)).unwrap();
        assert_eq!(e.run(Some(SimTime::from_us(1)), |_, _| {}), 1);
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn handlers_can_schedule_follow_ups() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_us(1), Tag(0)).unwrap();
        let mut seen = Vec::new();
        e.run(None, |eng, ev| {
            seen.push((eng.now().as_us(), ev.payload.0));
            if ev.payload.0 < 3 {
                eng.schedule_in(SimDuration::from_us(10), Tag(ev.payload.0 + 1))
                    .unwrap();
            }
        });
        assert_eq!(seen, vec![(1, 0), (11, 1), (21, 2), (31, 3)]);
    }

    #[test]
    fn rng_streams_are_reproducible_and_independent() {
        let mut a = RngStream::new(7, streams::WORKLOAD);
        let mut b = RngStream::new(7, streams::WORKLOAD);
        let mut c = RngStream::new(7, streams::DISPATCH);
        let xs: Vec<u64> = (0..8).map(|_| a.below(1_000_000)).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.below(1_000_000)).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.below(1_000_000)).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn duration_conversion_rounds_to_microseconds() {
        assert_eq!(SimDuration::from_ms_f64(285.1).as_us(), 285_100);
        assert_eq!(SimDuration::from_ms_f64(0.1).as_us(), 100);
        assert_eq!(SimDuration::from_ms_f64(-3.0).as_us(), 0);
    }
}
