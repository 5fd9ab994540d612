//! Scheduling policies as mechanism presets, DGSF context pools, and the
//! random GPU dispatcher.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{streams, EventHandle, RngStream, SimDuration};
use crate::functions::PlanMode;
use crate::resources::{AllocationId, InvocationId, Megabytes};
use crate::sharing::SharingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyName {
    #[serde(rename = "FixedGSL")]
    FixedGsl,
    #[serde(rename = "FixedGSL-F")]
    FixedGslF,
    #[serde(rename = "DGSF")]
    Dgsf,
    #[serde(rename = "SAGE")]
    Sage,
    #[serde(rename = "SAGE-NR")]
    SageNr,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::FixedGsl,
        PolicyName::FixedGslF,
        PolicyName::Dgsf,
        PolicyName::Sage,
        PolicyName::SageNr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::FixedGsl => "FixedGSL",
            PolicyName::FixedGslF => "FixedGSL-F",
            PolicyName::Dgsf => "DGSF",
            PolicyName::Sage => "SAGE",
            PolicyName::SageNr => "SAGE-NR",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['_', '-'], "");
        Ok(match norm.as_str() {
            "fixedgsl" => PolicyName::FixedGsl,
            "fixedgslf" => PolicyName::FixedGslF,
            "dgsf" => PolicyName::Dgsf,
            "sage" => PolicyName::Sage,
            "sagenr" => PolicyName::SageNr,
            _ => return Err(format!("unknown policy `{s}`")),
        })
    }
}

/// How a policy admits invocations onto a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmissionStyle {
    /// One fixed-size instance per invocation.
    FixedInstance,
    /// Pre-created per-function contexts shared through an FCFS queue.
    ContextPool,
    /// Resident functions with reference-counted sharing and staged exit.
    Sharing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub name: PolicyName,
    pub plan_mode: PlanMode,
    pub granularity: Megabytes,
    pub ro_sharing: bool,
    pub ctx_sharing: bool,
    pub multi_stage_exit: bool,
    pub pre_created_contexts: u32,
    pub stage_intervals: [SimDuration; 4],
    /// Destroy an idle DGSF pool after this long without invocations.
    pub dgsf_ctx_ttl: Option<SimDuration>,
}

impl PolicyConfig {
    pub fn preset(name: PolicyName) -> Self {
        let base = PolicyConfig {
            name,
            plan_mode: PlanMode::Serial,
            granularity: Megabytes::from_whole_mb(1),
            ro_sharing: false,
            ctx_sharing: false,
            multi_stage_exit: false,
            pre_created_contexts: 0,
            stage_intervals: [SimDuration::from_secs(30); 4],
            dgsf_ctx_ttl: None,
        };
        match name {
            PolicyName::FixedGsl => PolicyConfig {
                granularity: Megabytes::from_whole_mb(1024),
                ..base
            },
            PolicyName::FixedGslF => base,
            PolicyName::Dgsf => PolicyConfig {
                pre_created_contexts: 4,
                ..base
            },
            PolicyName::Sage => PolicyConfig {
                plan_mode: PlanMode::Parallel,
                ro_sharing: true,
                ctx_sharing: true,
                multi_stage_exit: true,
                ..base
            },
            PolicyName::SageNr => PolicyConfig {
                name,
                ro_sharing: false,
                ..Self::preset(PolicyName::Sage)
            },
        }
    }

    pub fn style(&self) -> AdmissionStyle {
        match self.name {
            PolicyName::FixedGsl | PolicyName::FixedGslF => AdmissionStyle::FixedInstance,
            PolicyName::Dgsf => AdmissionStyle::ContextPool,
            PolicyName::Sage | PolicyName::SageNr => AdmissionStyle::Sharing,
        }
    }

    pub fn sharing_config(&self) -> SharingConfig {
        SharingConfig {
            ro_sharing: self.ro_sharing,
            ctx_sharing: self.ctx_sharing,
            multi_stage_exit: self.multi_stage_exit,
            stage_intervals: self.stage_intervals,
        }
    }

    pub fn with_overrides(mut self, o: &PolicyOverrides) -> Self {
        if let Some(m) = o.plan_mode {
            self.plan_mode = m;
        }
        if let Some(v) = o.ro_sharing {
            self.ro_sharing = v;
        }
        if let Some(v) = o.ctx_sharing {
            self.ctx_sharing = v;
        }
        if let Some(v) = o.multi_stage_exit {
            self.multi_stage_exit = v;
        }
        if let Some(g) = o.granularity_mb {
            self.granularity = Megabytes::from_mb(g);
        }
        if let Some(ttl) = o.dgsf_ctx_ttl {
            self.dgsf_ctx_ttl = Some(SimDuration::from_secs_f64(ttl));
        }
        if let Some(n) = o.pre_created_contexts {
            self.pre_created_contexts = n;
        }
        if let Some(s) = o.stage_interval_s {
            self.stage_intervals = [SimDuration::from_secs_f64(s); 4];
        }
        if let Some(v) = &o.stage_intervals_s {
            for (dst, src) in self.stage_intervals.iter_mut().zip(v.iter()) {
                *dst = SimDuration::from_secs_f64(*src);
            }
        }
        self
    }
}

/// Ablation flags layered over a named preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_mode: Option<PlanMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ro_sharing: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx_sharing: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_stage_exit: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity_mb: Option<f64>,
    /// Seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgsf_ctx_ttl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_created_contexts: Option<u32>,
    /// Seconds, applied to all four stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_interval_s: Option<f64>,
    /// Seconds, per stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_intervals_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Context exists and is idle.
    Free(AllocationId),
    Busy(AllocationId),
    /// Claimed by an invocation that will create the context.
    Reserved,
    /// Context destroyed (idle TTL) or not yet created.
    Absent,
}

/// Fixed set of per-(function, GPU) contexts served first-come-first-served.
#[derive(Debug, Clone)]
pub struct ContextPool {
    pub slots: Vec<Slot>,
    pub waiters: VecDeque<InvocationId>,
    pub ttl_timer: Option<EventHandle>,
}

/// Result of asking a pool for a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotGrant {
    /// Reuse an existing context.
    Ready(usize),
    /// Slot is free but its context must be created (and allocated) first.
    Create(usize),
    /// All slots busy; the caller was queued.
    Queued,
}

impl ContextPool {
    pub fn new(slots: Vec<Slot>) -> Self {
        Self {
            slots,
            waiters: VecDeque::new(),
            ttl_timer: None,
        }
    }

    pub fn busy(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Busy(_) | Slot::Reserved))
            .count()
    }

    pub fn is_idle(&self) -> bool {
        self.busy() == 0 && self.waiters.is_empty()
    }

    /// Finds a slot for a new invocation without queueing. Existing contexts
    /// are preferred over creating new ones.
    pub fn find_slot(&self) -> Option<SlotGrant> {
        if let Some(i) = self.slots.iter().position(|s| matches!(s, Slot::Free(_))) {
            return Some(SlotGrant::Ready(i));
        }
        self.slots
            .iter()
            .position(|s| matches!(s, Slot::Absent))
            .map(SlotGrant::Create)
    }

    /// FCFS acquire: fails over to the waiter queue when busy, and never
    /// overtakes earlier waiters.
    pub fn acquire(&mut self, inv: InvocationId) -> SlotGrant {
        if self.waiters.is_empty() {
            if let Some(g) = self.find_slot() {
                return g;
            }
        }
        self.waiters.push_back(inv);
        SlotGrant::Queued
    }

    pub fn reserve(&mut self, slot: usize) {
        self.slots[slot] = Slot::Reserved;
    }

    /// Gives up a reservation without having created the context.
    pub fn unreserve(&mut self, slot: usize) {
        if self.slots[slot] == Slot::Reserved {
            self.slots[slot] = Slot::Absent;
        }
    }

    pub fn mark_busy(&mut self, slot: usize, ctx: AllocationId) {
        self.slots[slot] = Slot::Busy(ctx);
    }

    /// Returns the slot's context to the pool.
    pub fn release(&mut self, slot: usize) {
        if let Slot::Busy(id) = self.slots[slot] {
            self.slots[slot] = Slot::Free(id);
        }
    }

    /// Destroys idle contexts; returns their allocations for freeing.
    pub fn destroy_idle(&mut self) -> Vec<AllocationId> {
        let mut freed = Vec::new();
        for s in self.slots.iter_mut() {
            if let Slot::Free(id) = *s {
                freed.push(id);
                *s = Slot::Absent;
            }
        }
        freed
    }

    /// Destroys the first idle context, if any.
    pub fn destroy_one_idle(&mut self) -> Option<AllocationId> {
        let slot = self.slots.iter_mut().find(|s| matches!(s, Slot::Free(_)))?;
        let Slot::Free(id) = *slot else {
            unreachable!()
        };
        *slot = Slot::Absent;
        Some(id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = AllocationId> + '_ {
        self.slots.iter().filter_map(|s| match s {
            Slot::Free(id) | Slot::Busy(id) => Some(*id),
            Slot::Reserved | Slot::Absent => None,
        })
    }
}

/// Uniform random GPU placement from a dedicated RNG stream.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    gpus: usize,
    rng: RngStream,
}

impl Dispatcher {
    pub fn new(seed: u64, gpus: usize) -> Self {
        assert!(gpus > 0, "cluster needs at least one GPU");
        Self {
            gpus,
            rng: RngStream::new(seed, streams::DISPATCH),
        }
    }

    pub fn place(&mut self) -> usize {
        if self.gpus == 1 {
            return 0;
        }
        self.rng.below(self.gpus as u64) as usize
    }
}
