//! Contended transfer channels and memory ledgers.
//!
//! A [`Channel`] shares its bandwidth equally among all active transfers
//! (fluid processor sharing). Progress is tracked with a per-channel
//! attained-service counter: every active transfer receives the same service
//! rate, so a transfer that joins when the counter reads `s` finishes when the
//! counter reaches `s + bytes`. Quantities are fixed-point integers, so
//! completion times are exact and reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EventHandle, EventKind, EventPayload, SimDuration, SimTime};
use crate::error::{EngineError, ResourceError};

/// A memory or byte quantity, stored as integer micro-megabytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Megabytes(u64);

const MICRO: u64 = 1_000_000;
/// Pico-MB per micro-MB; channel service is tracked in pico-MB.
const PICO_PER_MICRO: u128 = 1_000_000;

impl Megabytes {
    pub const ZERO: Megabytes = Megabytes(0);

    /// Rounds to the nearest micro-MB; negative values clamp to zero.
    pub fn from_mb(mb: f64) -> Self {
        if !mb.is_finite() || mb <= 0.0 {
            return Megabytes(0);
        }
        Megabytes((mb * MICRO as f64).round() as u64)
    }

    pub const fn from_whole_mb(mb: u64) -> Self {
        Megabytes(mb * MICRO)
    }

    pub const fn from_micro(micro: u64) -> Self {
        Megabytes(micro)
    }

    pub const fn as_micro(self) -> u64 {
        self.0
    }

    pub fn as_mb(self) -> f64 {
        self.0 as f64 / MICRO as f64
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn saturating_sub(self, rhs: Megabytes) -> Megabytes {
        Megabytes(self.0.saturating_sub(rhs.0))
    }

    /// Least multiple of `granularity` that is `>= self`. A zero granularity
    /// means exact allocation.
    pub fn round_up_to(self, granularity: Megabytes) -> Megabytes {
        if granularity.0 == 0 {
            return self;
        }
        Megabytes(self.0.div_ceil(granularity.0) * granularity.0)
    }

    pub fn scale(self, n: u64) -> Megabytes {
        Megabytes(self.0 * n)
    }
}

impl Add for Megabytes {
    type Output = Megabytes;
    fn add(self, rhs: Self) -> Self {
        Megabytes(self.0 + rhs.0)
    }
}

impl AddAssign for Megabytes {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sub for Megabytes {
    type Output = Megabytes;
    fn sub(self, rhs: Self) -> Self {
        Megabytes(self.0 - rhs.0)
    }
}

impl SubAssign for Megabytes {
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl std::iter::Sum for Megabytes {
    fn sum<I: Iterator<Item = Megabytes>>(iter: I) -> Self {
        Megabytes(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Megabytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}MB", self.as_mb())
    }
}

impl Serialize for Megabytes {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_mb())
    }
}

impl<'de> Deserialize<'de> for Megabytes {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mb = f64::deserialize(d)?;
        if mb < 0.0 {
            return Err(serde::de::Error::custom(format!(
                "negative megabyte quantity {mb}"
            )));
        }
        Ok(Megabytes::from_mb(mb))
    }
}

pub type TransferId = u64;
pub type InvocationId = u64;

#[derive(Debug, Clone)]
pub struct Transfer {
    pub id: TransferId,
    pub owner: InvocationId,
    pub bytes_total: Megabytes,
    pub started: SimTime,
    /// Channel service level (pico-MB) at which this transfer is done.
    finish_tag: u128,
}

impl Transfer {
    /// Bytes still to move, given the channel's current service level.
    fn remaining_pico(&self, service: u128) -> u128 {
        self.finish_tag.saturating_sub(service)
    }
}

/// A bandwidth-limited medium under equal-share fluid processor sharing.
#[derive(Debug, Clone)]
pub struct Channel {
    name: String,
    /// Bandwidth in pico-MB per microsecond (numerically MB/s × 1e6).
    rate: u128,
    service: u128,
    last_update: SimTime,
    active: BTreeMap<TransferId, Transfer>,
    delivered: u128,
    busy: SimDuration,
    completed_bytes: Megabytes,
    completed_count: u64,
    pending_event: Option<EventHandle>,
}

impl Channel {
    pub fn new(name: impl Into<String>, bandwidth_mbps: f64) -> Self {
        assert!(
            bandwidth_mbps.is_finite() && bandwidth_mbps > 0.0,
            "channel bandwidth must be positive"
        );
        Self {
            name: name.into(),
            rate: (bandwidth_mbps * 1e6).round() as u128,
            service: 0,
            last_update: SimTime::ZERO,
            active: BTreeMap::new(),
            delivered: 0,
            busy: SimDuration::ZERO,
            completed_bytes: Megabytes::ZERO,
            completed_count: 0,
            pending_event: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bandwidth_mbps(&self) -> f64 {
        self.rate as f64 / 1e6
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> impl Iterator<Item = &Transfer> {
        self.active.values()
    }

    /// Total bytes moved so far, including partial progress of active transfers.
    pub fn delivered(&self) -> Megabytes {
        Megabytes::from_micro((self.delivered / PICO_PER_MICRO) as u64)
    }

    /// Sum of `bytes_total` over completed transfers.
    pub fn completed_bytes(&self) -> Megabytes {
        self.completed_bytes
    }

    pub fn completed_count(&self) -> u64 {
        self.completed_count
    }

    /// Total time with at least one active transfer.
    pub fn busy_time(&self) -> SimDuration {
        self.busy
    }

    /// Remaining bytes of an active transfer as of the last update.
    pub fn remaining(&self, id: TransferId) -> Option<Megabytes> {
        self.active.get(&id).map(|t| {
            Megabytes::from_micro((t.remaining_pico(self.service) / PICO_PER_MICRO) as u64)
        })
    }

    /// Brings the service counter up to `now` at the current equal-share rate.
    pub fn advance(&mut self, now: SimTime) {
        debug_assert!(now >= self.last_update);
        let dt = now.since(self.last_update).as_us() as u128;
        let n = self.active.len() as u128;
        if n > 0 && dt > 0 {
            let per_transfer = dt * self.rate / n;
            for t in self.active.values() {
                let remaining = t.remaining_pico(self.service);
                self.delivered += per_transfer.min(remaining);
            }
            self.service += per_transfer;
            self.busy += SimDuration::from_us(dt as u64);
        }
        self.last_update = now;
    }

    /// Adds a transfer at `now`. Callers must reschedule the channel's
    /// completion event afterwards (see [`Channel::reschedule`]).
    pub fn begin_transfer(
        &mut self,
        now: SimTime,
        id: TransferId,
        owner: InvocationId,
        bytes: Megabytes,
    ) -> Result<(), ResourceError> {
        if bytes.is_zero() {
            return Err(ResourceError::EmptyTransfer);
        }
        self.advance(now);
        let finish_tag = self.service + bytes.as_micro() as u128 * PICO_PER_MICRO;
        self.active.insert(
            id,
            Transfer {
                id,
                owner,
                bytes_total: bytes,
                started: now,
                finish_tag,
            },
        );
        Ok(())
    }

    /// Earliest completion instant under the current membership.
    pub fn next_completion(&self) -> Option<SimTime> {
        let n = self.active.len() as u128;
        let min_remaining = self
            .active
            .values()
            .map(|t| t.remaining_pico(self.service))
            .min()?;
        let dt = (min_remaining * n).div_ceil(self.rate);
        Some(self.last_update + SimDuration::from_us(dt as u64))
    }

    /// Advances to `now` and removes every transfer that has finished.
    pub fn take_completed(&mut self, now: SimTime) -> Vec<Transfer> {
        self.advance(now);
        let done: Vec<TransferId> = self
            .active
            .values()
            .filter(|t| t.finish_tag <= self.service)
            .map(|t| t.id)
            .collect();
        let mut out = Vec::with_capacity(done.len());
        for id in done {
            if let Some(t) = self.active.remove(&id) {
                self.completed_bytes += t.bytes_total;
                self.completed_count += 1;
                out.push(t);
            }
        }
        if self.active.is_empty() {
            // Idle channel: rebase the counter so it does not grow unboundedly.
            self.service = 0;
        }
        out
    }

    /// Membership-change hook: cancels the outstanding completion event (if
    /// any) and schedules a fresh one for the new earliest finisher.
    pub fn reschedule<P: EventPayload>(
        &mut self,
        engine: &mut Engine<P>,
        payload: impl FnOnce() -> P,
    ) -> Result<(), EngineError> {
        if let Some(h) = self.pending_event.take() {
            engine.cancel(h)?;
        }
        if let Some(t) = self.next_completion() {
            let t = t.max(engine.now());
            self.pending_event = Some(engine.schedule(t, payload())?);
        }
        Ok(())
    }
}

/// Standalone fluid-PS run of a single channel: each `(start, bytes)` pair
/// begins at `start`; returns completion times in input order.
pub fn simulate_transfers(
    bandwidth_mbps: f64,
    transfers: &[(SimTime, Megabytes)],
) -> Result<Vec<SimTime>, ResourceError> {
    #[derive(Debug)]
    enum Ev {
        Start(usize),
        Done,
    }
    impl EventPayload for Ev {
        fn kind(&self) -> EventKind {
            match self {
                Ev::Start(_) => EventKind::Arrival,
                Ev::Done => EventKind::TransferComplete,
            }
        }
    }

    let mut engine: Engine<Ev> = Engine::new();
    let mut channel = Channel::new("standalone", bandwidth_mbps);
    for (i, (start, _)) in transfers.iter().enumerate() {
        engine
            .schedule(*start, Ev::Start(i))
            .expect("fresh engine accepts any time");
    }
    let mut done = vec![SimTime::ZERO; transfers.len()];
    while let Some(ev) = engine.next_event(None) {
        let now = ev.time;
        match ev.payload {
            Ev::Start(i) => {
                channel.begin_transfer(now, i as TransferId, i as InvocationId, transfers[i].1)?;
            }
            Ev::Done => {
                for t in channel.take_completed(now) {
                    done[t.id as usize] = now;
                }
            }
        }
        channel
            .reschedule(&mut engine, || Ev::Done)
            .expect("completion never precedes now");
    }
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AllocClass {
    Context,
    ReadOnly,
    Writable,
    InstanceFixed,
}

/// Who holds an allocation; used for teardown leak checks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AllocOwner {
    Invocation(InvocationId),
    Resident { function: usize, gpu: usize },
    ContextPool { function: usize, gpu: usize },
}

pub type AllocationId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub requested: Megabytes,
    pub effective: Megabytes,
    pub class: AllocClass,
    pub owner: AllocOwner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocOutcome {
    Granted(AllocationId),
    Denied {
        effective: Megabytes,
        shortfall: Megabytes,
    },
}

/// Held memory by class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryBreakdown {
    pub context: Megabytes,
    pub read_only: Megabytes,
    pub writable: Megabytes,
    /// Whole fixed-size instances (context and explicit memory together).
    pub instance: Megabytes,
    /// Granularity rounding on top of the requested sizes.
    pub rounding: Megabytes,
}

impl MemoryBreakdown {
    /// Requested sizes only.
    pub fn logical(&self) -> Megabytes {
        self.context + self.read_only + self.writable + self.instance
    }

    /// What the ledger actually reserves.
    pub fn total(&self) -> Megabytes {
        self.logical() + self.rounding
    }

    fn class_mut(&mut self, class: AllocClass) -> &mut Megabytes {
        match class {
            AllocClass::Context => &mut self.context,
            AllocClass::ReadOnly => &mut self.read_only,
            AllocClass::Writable => &mut self.writable,
            AllocClass::InstanceFixed => &mut self.instance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemoryLedger {
    capacity: Option<Megabytes>,
    granularity: Megabytes,
    allocations: BTreeMap<AllocationId, Allocation>,
    next_id: AllocationId,
    used: Megabytes,
    peak: Megabytes,
    breakdown: MemoryBreakdown,
}

impl MemoryLedger {
    /// `capacity = None` means unlimited.
    pub fn new(capacity: Option<Megabytes>, granularity: Megabytes) -> Self {
        Self {
            capacity,
            granularity,
            allocations: BTreeMap::new(),
            next_id: 0,
            used: Megabytes::ZERO,
            peak: Megabytes::ZERO,
            breakdown: MemoryBreakdown::default(),
        }
    }

    /// Held memory by class (requested sizes plus rounding).
    pub fn breakdown(&self) -> MemoryBreakdown {
        self.breakdown
    }

    pub fn capacity(&self) -> Option<Megabytes> {
        self.capacity
    }

    pub fn granularity(&self) -> Megabytes {
        self.granularity
    }

    pub fn used(&self) -> Megabytes {
        self.used
    }

    pub fn peak(&self) -> Megabytes {
        self.peak
    }

    pub fn free_space(&self) -> Option<Megabytes> {
        self.capacity.map(|c| c.saturating_sub(self.used))
    }

    pub fn effective_size(&self, size: Megabytes) -> Megabytes {
        size.round_up_to(self.granularity)
    }

    /// Whether `effective` additional megabytes would fit right now.
    pub fn fits(&self, effective: Megabytes) -> bool {
        match self.capacity {
            Some(c) => self.used + effective <= c,
            None => true,
        }
    }

    pub fn try_alloc(
        &mut self,
        size: Megabytes,
        class: AllocClass,
        owner: AllocOwner,
    ) -> Result<AllocOutcome, ResourceError> {
        if size.is_zero() {
            return Err(ResourceError::EmptyAllocation);
        }
        let effective = self.effective_size(size);
        if !self.fits(effective) {
            let free = self.free_space().unwrap_or(Megabytes::ZERO);
            return Ok(AllocOutcome::Denied {
                effective,
                shortfall: effective.saturating_sub(free),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.allocations.insert(
            id,
            Allocation {
                requested: size,
                effective,
                class,
                owner,
            },
        );
        self.used += effective;
        self.peak = self.peak.max(self.used);
        *self.breakdown.class_mut(class) += size;
        self.breakdown.rounding += effective - size;
        Ok(AllocOutcome::Granted(id))
    }

    pub fn free(&mut self, id: AllocationId) -> Result<Allocation, ResourceError> {
        match self.allocations.remove(&id) {
            Some(a) => {
                self.used -= a.effective;
                *self.breakdown.class_mut(a.class) -= a.requested;
                self.breakdown.rounding -= a.effective - a.requested;
                Ok(a)
            }
            None if id < self.next_id => Err(ResourceError::DoubleFree(id)),
            None => Err(ResourceError::UnknownAllocation(id)),
        }
    }

    pub fn get(&self, id: AllocationId) -> Option<&Allocation> {
        self.allocations.get(&id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = (&AllocationId, &Allocation)> {
        self.allocations.iter()
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }
}
