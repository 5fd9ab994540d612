//! Sharing-based GPU memory manager.
//!
//! One [`ResidentFunction`] exists per (function, GPU). It reference-counts
//! active invocations, owns the shared read-only block and GPU context, and
//! after the last invocation finishes decays through four timed stages:
//!
//! | state   | GPU read-only | GPU context | CPU read-only cache | CPU context | container |
//! |---------|---------------|-------------|---------------------|-------------|-----------|
//! | Stage1  | yes           | yes         | yes                 | yes         | yes       |
//! | Stage2  |               | yes         | yes                 | yes         | yes       |
//! | Stage3  |               |             | yes                 | yes         | yes       |
//! | Stage4  |               |             |                     |             | yes       |
//!
//! Read-only columns apply only when the function has read-only memory and
//! read-only sharing is enabled; the GPU context column only when context
//! sharing is enabled.

use std::collections::BTreeMap;

use crate::engine::{EventHandle, SimDuration, SimTime};
use crate::error::{EngineError, ResourceError, SharingError};
use crate::functions::{FunctionSpec, WarmthClass};
use crate::resources::{
    AllocClass, AllocOutcome, AllocOwner, AllocationId, InvocationId, Megabytes, MemoryBreakdown,
    MemoryLedger,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResidentKey {
    pub function: usize,
    pub gpu: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidentState {
    Active(u32),
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Evicted,
}

impl ResidentState {
    fn staged(self) -> bool {
        matches!(
            self,
            ResidentState::Stage1
                | ResidentState::Stage2
                | ResidentState::Stage3
                | ResidentState::Stage4
        )
    }

    /// Index into the stage-interval array for the timer that ends this state.
    fn stage_index(self) -> Option<usize> {
        match self {
            ResidentState::Stage1 => Some(0),
            ResidentState::Stage2 => Some(1),
            ResidentState::Stage3 => Some(2),
            ResidentState::Stage4 => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Holdings {
    pub gpu_ro: Option<AllocationId>,
    pub gpu_ctx: Option<AllocationId>,
    pub cpu_ro_cache: Option<AllocationId>,
    pub cpu_ctx: bool,
    pub container: bool,
}

#[derive(Debug, Clone)]
pub struct ResidentFunction {
    pub key: ResidentKey,
    pub state: ResidentState,
    pub held: Holdings,
    pub exit_timer: Option<EventHandle>,
    /// Set once the loader of the shared read-only block has finished.
    pub ro_ready: bool,
    pub ctx_ready: bool,
    pub ro_waiters: Vec<InvocationId>,
    pub ctx_waiters: Vec<InvocationId>,
    pub last_release: SimTime,
    /// Read-only loads performed (leader elections won).
    pub ro_loads: u64,
}

impl ResidentFunction {
    fn new(key: ResidentKey) -> Self {
        Self {
            key,
            state: ResidentState::Evicted,
            held: Holdings::default(),
            exit_timer: None,
            ro_ready: false,
            ctx_ready: false,
            ro_waiters: Vec::new(),
            ctx_waiters: Vec::new(),
            last_release: SimTime::ZERO,
            ro_loads: 0,
        }
    }
}

/// Which mechanisms the manager applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharingConfig {
    pub ro_sharing: bool,
    pub ctx_sharing: bool,
    pub multi_stage_exit: bool,
    pub stage_intervals: [SimDuration; 4],
}

impl Default for SharingConfig {
    fn default() -> Self {
        Self {
            ro_sharing: true,
            ctx_sharing: true,
            multi_stage_exit: true,
            stage_intervals: [SimDuration::from_secs(30); 4],
        }
    }
}

/// What an admitted invocation may reuse, and what it must produce itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareGrant {
    pub warmth: WarmthClass,
    /// The invocation does not move read-only bytes on either channel.
    pub shared_ro: bool,
    /// The invocation skips GPU context creation.
    pub shared_ctx: bool,
    /// Read-only block is being loaded by another invocation; wait for it.
    pub await_ro: bool,
    pub await_ctx: bool,
    /// Host channel must carry read-only bytes (no CPU-side copy retained).
    pub load_ro_host: bool,
    /// PCIe channel must carry read-only bytes.
    pub load_ro_pcie: bool,
    pub cpu_ctx: bool,
    pub container: bool,
    /// This invocation becomes the loader of the shared read-only block.
    pub ro_leader: bool,
    pub ctx_leader: bool,
}

/// GPU memory an admission needs before it can start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdmissionDelta {
    pub writable: Megabytes,
    /// Read-only memory owned by the invocation itself (sharing disabled).
    pub private_ro: Megabytes,
    pub private_ctx: Megabytes,
    pub shared_ro: Megabytes,
    pub shared_ctx: Megabytes,
}

impl AdmissionDelta {
    pub fn parts(&self) -> [(Megabytes, AllocClass, bool); 5] {
        [
            (self.shared_ctx, AllocClass::Context, true),
            (self.shared_ro, AllocClass::ReadOnly, true),
            (self.private_ctx, AllocClass::Context, false),
            (self.private_ro, AllocClass::ReadOnly, false),
            (self.writable, AllocClass::Writable, false),
        ]
    }

    /// Total effective size under `ledger`'s granularity.
    pub fn effective(&self, ledger: &MemoryLedger) -> Megabytes {
        self.parts()
            .iter()
            .filter(|(m, _, _)| !m.is_zero())
            .map(|(m, _, _)| ledger.effective_size(*m))
            .sum()
    }
}

/// Allocations made for one admitted invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdmittedAllocs {
    /// Freed by the invocation at completion.
    pub private: Vec<AllocationId>,
}

/// Timer service the manager uses for its stage timers.
pub trait ExitTimers {
    fn schedule_exit(&mut self, at: SimTime, key: ResidentKey) -> Result<EventHandle, EngineError>;
    fn cancel_exit(&mut self, handle: EventHandle) -> Result<bool, EngineError>;
}

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("gpu memory denied during commit")]
    Denied,
}

/// GPU memory held on `ledger`, by class.
pub fn resident_memory(ledger: &MemoryLedger) -> MemoryBreakdown {
    ledger.breakdown()
}

/// All residents for a cluster.
#[derive(Debug, Clone)]
pub struct SharingManager {
    config: SharingConfig,
    residents: BTreeMap<ResidentKey, ResidentFunction>,
}

fn alloc(
    ledger: &mut MemoryLedger,
    size: Megabytes,
    class: AllocClass,
    owner: AllocOwner,
) -> Result<AllocationId, ManagerError> {
    match ledger.try_alloc(size, class, owner)? {
        AllocOutcome::Granted(id) => Ok(id),
        AllocOutcome::Denied { .. } => Err(ManagerError::Denied),
    }
}

impl SharingManager {
    pub fn new(config: SharingConfig) -> Self {
        Self {
            config,
            residents: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SharingConfig {
        &self.config
    }

    pub fn get(&self, key: ResidentKey) -> Option<&ResidentFunction> {
        self.residents.get(&key)
    }

    pub fn residents(&self) -> impl Iterator<Item = &ResidentFunction> {
        self.residents.values()
    }

    fn shares_ro(&self, spec: &FunctionSpec) -> bool {
        self.config.ro_sharing && spec.has_read_only()
    }

    /// What an invocation admitted now would be granted. Does not mutate.
    pub fn grant_for(&self, key: ResidentKey, spec: &FunctionSpec) -> ShareGrant {
        let empty = ResidentFunction::new(key);
        let r = self.residents.get(&key).unwrap_or(&empty);
        let share_ro = self.shares_ro(spec);
        let warmth = match r.state {
            ResidentState::Active(_) | ResidentState::Stage1 => WarmthClass::Stage1Hot,
            ResidentState::Stage2 => WarmthClass::Stage2,
            ResidentState::Stage3 => WarmthClass::Stage3,
            ResidentState::Stage4 => WarmthClass::Stage4,
            ResidentState::Evicted => WarmthClass::Cold,
        };

        let (shared_ctx, await_ctx, ctx_leader) = if !self.config.ctx_sharing {
            (false, false, false)
        } else if r.held.gpu_ctx.is_some() {
            (true, !r.ctx_ready, false)
        } else {
            (false, false, true)
        };

        let (shared_ro, await_ro, ro_leader, load_ro_host, load_ro_pcie) = if !spec.has_read_only()
        {
            (false, false, false, false, false)
        } else if !share_ro {
            (false, false, false, true, true)
        } else if r.held.gpu_ro.is_some() {
            (true, !r.ro_ready, false, false, false)
        } else {
            let host = r.held.cpu_ro_cache.is_none();
            (false, false, true, host, true)
        };

        let evicted = r.state == ResidentState::Evicted;
        ShareGrant {
            warmth,
            shared_ro,
            shared_ctx,
            await_ro,
            await_ctx,
            load_ro_host,
            load_ro_pcie,
            cpu_ctx: evicted,
            container: evicted,
            ro_leader,
            ctx_leader,
        }
    }

    /// GPU memory that admitting under `grant` would add.
    pub fn delta_for(&self, grant: &ShareGrant, spec: &FunctionSpec) -> AdmissionDelta {
        let mut d = AdmissionDelta {
            writable: spec.writable_mem,
            ..Default::default()
        };
        if grant.ro_leader {
            d.shared_ro = spec.ro_mem;
        } else if grant.load_ro_pcie && !self.shares_ro(spec) {
            d.private_ro = spec.ro_mem;
        }
        if grant.ctx_leader {
            d.shared_ctx = spec.context_mem;
        } else if !self.config.ctx_sharing {
            d.private_ctx = spec.context_mem;
        }
        d
    }

    /// Admits an invocation: reserves GPU memory for `grant`, cancels any
    /// pending exit timer and moves the resident to `Active`. Fails with
    /// [`ManagerError::Denied`] (and no state change) if memory does not fit.
    #[allow(clippy::too_many_arguments)]
    pub fn admit(
        &mut self,
        key: ResidentKey,
        spec: &FunctionSpec,
        invocation: InvocationId,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
        timers: &mut impl ExitTimers,
    ) -> Result<(ShareGrant, AdmittedAllocs), ManagerError> {
        let grant = self.grant_for(key, spec);
        let delta = self.delta_for(&grant, spec);
        if !gpu_ledger.fits(delta.effective(gpu_ledger)) {
            return Err(ManagerError::Denied);
        }
        let r = self
            .residents
            .entry(key)
            .or_insert_with(|| ResidentFunction::new(key));
        let mut allocs = AdmittedAllocs::default();
        let resident_owner = AllocOwner::Resident {
            function: key.function,
            gpu: key.gpu,
        };
        for (size, class, shared) in delta.parts() {
            if size.is_zero() {
                continue;
            }
            if shared {
                let id = alloc(gpu_ledger, size, class, resident_owner.clone())?;
                match class {
                    AllocClass::Context => {
                        r.held.gpu_ctx = Some(id);
                        r.ctx_ready = false;
                    }
                    _ => {
                        r.held.gpu_ro = Some(id);
                        r.ro_ready = false;
                        r.ro_loads += 1;
                    }
                }
            } else {
                let id = alloc(gpu_ledger, size, class, AllocOwner::Invocation(invocation))?;
                allocs.private.push(id);
            }
        }
        if grant.ro_leader && r.held.cpu_ro_cache.is_none() {
            r.held.cpu_ro_cache = Some(alloc(
                cpu_ledger,
                spec.ro_mem,
                AllocClass::ReadOnly,
                resident_owner,
            )?);
        }
        if grant.await_ro {
            r.ro_waiters.push(invocation);
        }
        if grant.await_ctx {
            r.ctx_waiters.push(invocation);
        }
        r.held.cpu_ctx = true;
        r.held.container = true;
        if let Some(h) = r.exit_timer.take() {
            timers.cancel_exit(h)?;
        }
        r.state = match r.state {
            ResidentState::Active(n) => ResidentState::Active(n + 1),
            _ => ResidentState::Active(1),
        };
        Ok((grant, allocs))
    }

    /// Marks the shared read-only block loaded; returns invocations waiting on it.
    pub fn mark_ro_ready(&mut self, key: ResidentKey) -> Vec<InvocationId> {
        match self.residents.get_mut(&key) {
            Some(r) => {
                r.ro_ready = true;
                std::mem::take(&mut r.ro_waiters)
            }
            None => Vec::new(),
        }
    }

    pub fn mark_ctx_ready(&mut self, key: ResidentKey) -> Vec<InvocationId> {
        match self.residents.get_mut(&key) {
            Some(r) => {
                r.ctx_ready = true;
                std::mem::take(&mut r.ctx_waiters)
            }
            None => Vec::new(),
        }
    }

    /// Ends one active invocation. The last one starts the staged exit (or
    /// evicts immediately when staged exit is disabled).
    pub fn release(
        &mut self,
        key: ResidentKey,
        now: SimTime,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
        timers: &mut impl ExitTimers,
    ) -> Result<(), ManagerError> {
        let multi = self.config.multi_stage_exit;
        let interval = self.config.stage_intervals[0];
        let r = self
            .residents
            .get_mut(&key)
            .filter(|r| matches!(r.state, ResidentState::Active(_)))
            .ok_or(SharingError::NotActive {
                function: key.function.to_string(),
                gpu: key.gpu,
            })?;
        match r.state {
            ResidentState::Active(n) if n > 1 => r.state = ResidentState::Active(n - 1),
            _ => {
                r.last_release = now;
                if multi {
                    r.state = ResidentState::Stage1;
                    r.exit_timer = Some(timers.schedule_exit(now + interval, key)?);
                } else {
                    Self::evict(r, gpu_ledger, cpu_ledger)?;
                }
            }
        }
        Ok(())
    }

    fn evict(
        r: &mut ResidentFunction,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
    ) -> Result<(), ResourceError> {
        if let Some(id) = r.held.gpu_ro.take() {
            gpu_ledger.free(id)?;
        }
        if let Some(id) = r.held.gpu_ctx.take() {
            gpu_ledger.free(id)?;
        }
        if let Some(id) = r.held.cpu_ro_cache.take() {
            cpu_ledger.free(id)?;
        }
        r.held.cpu_ctx = false;
        r.held.container = false;
        r.ro_ready = false;
        r.ctx_ready = false;
        r.state = ResidentState::Evicted;
        Ok(())
    }

    /// Advances a staged resident by one stage, freeing what that stage drops.
    /// Returns GPU memory freed (effective). The next timer is scheduled at
    /// `now + interval` unless the resident reached `Evicted`.
    fn step_down(
        &mut self,
        key: ResidentKey,
        spec: &FunctionSpec,
        now: SimTime,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
        timers: &mut impl ExitTimers,
    ) -> Result<Megabytes, ManagerError> {
        let share_ro = self.shares_ro(spec);
        let intervals = self.config.stage_intervals;
        let Some(r) = self.residents.get_mut(&key) else {
            return Ok(Megabytes::ZERO);
        };
        let before = gpu_ledger.used();
        let next = match r.state {
            ResidentState::Stage1 => {
                if let Some(id) = r.held.gpu_ro.take() {
                    gpu_ledger.free(id)?;
                }
                r.ro_ready = false;
                if share_ro && r.held.cpu_ro_cache.is_none() {
                    r.held.cpu_ro_cache = Some(alloc(
                        cpu_ledger,
                        spec.ro_mem,
                        AllocClass::ReadOnly,
                        AllocOwner::Resident {
                            function: key.function,
                            gpu: key.gpu,
                        },
                    )?);
                }
                ResidentState::Stage2
            }
            ResidentState::Stage2 => {
                if let Some(id) = r.held.gpu_ctx.take() {
                    gpu_ledger.free(id)?;
                }
                r.ctx_ready = false;
                ResidentState::Stage3
            }
            ResidentState::Stage3 => {
                if let Some(id) = r.held.cpu_ro_cache.take() {
                    cpu_ledger.free(id)?;
                }
                r.held.cpu_ctx = false;
                ResidentState::Stage4
            }
            ResidentState::Stage4 => {
                r.held.container = false;
                ResidentState::Evicted
            }
            _ => return Ok(Megabytes::ZERO),
        };
        r.state = next;
        r.exit_timer = match next.stage_index() {
            Some(i) => Some(timers.schedule_exit(now + intervals[i], key)?),
            None => None,
        };
        Ok(before.saturating_sub(gpu_ledger.used()))
    }

    /// Stage timer fired for `key`.
    pub fn on_exit_timer(
        &mut self,
        key: ResidentKey,
        spec: &FunctionSpec,
        now: SimTime,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
        timers: &mut impl ExitTimers,
    ) -> Result<Megabytes, ManagerError> {
        match self.residents.get_mut(&key) {
            Some(r) if r.state.staged() => {
                r.exit_timer = None;
            }
            _ => return Ok(Megabytes::ZERO),
        }
        self.step_down(key, spec, now, gpu_ledger, cpu_ledger, timers)
    }

    /// Staged residents on `gpu` that still hold GPU memory, in demotion
    /// order: most decayed first, then least recently released.
    pub fn demotion_candidates(&self, gpu: usize) -> Vec<ResidentKey> {
        let mut c: Vec<&ResidentFunction> = self
            .residents
            .values()
            .filter(|r| r.key.gpu == gpu)
            .filter(|r| matches!(r.state, ResidentState::Stage1 | ResidentState::Stage2))
            .filter(|r| r.held.gpu_ro.is_some() || r.held.gpu_ctx.is_some())
            .collect();
        c.sort_by_key(|r| {
            let decay = match r.state {
                ResidentState::Stage2 => 0,
                _ => 1,
            };
            (decay, r.last_release, r.key)
        });
        c.into_iter().map(|r| r.key).collect()
    }

    /// Force-demotes `key` by one stage (memory pressure). Restarts the stage
    /// timer for the new state.
    pub fn force_demote(
        &mut self,
        key: ResidentKey,
        spec: &FunctionSpec,
        now: SimTime,
        gpu_ledger: &mut MemoryLedger,
        cpu_ledger: &mut MemoryLedger,
        timers: &mut impl ExitTimers,
    ) -> Result<Megabytes, ManagerError> {
        if let Some(r) = self.residents.get_mut(&key) {
            if !r.state.staged() {
                return Ok(Megabytes::ZERO);
            }
            if let Some(h) = r.exit_timer.take() {
                timers.cancel_exit(h)?;
            }
        }
        self.step_down(key, spec, now, gpu_ledger, cpu_ledger, timers)
    }

    /// Evicts every resident (end of run teardown).
    pub fn teardown(
        &mut self,
        gpu_ledgers: &mut [MemoryLedger],
        cpu_ledgers: &mut [MemoryLedger],
        node_of_gpu: impl Fn(usize) -> usize,
        timers: &mut impl ExitTimers,
    ) -> Result<(), ManagerError> {
        for r in self.residents.values_mut() {
            if let Some(h) = r.exit_timer.take() {
                timers.cancel_exit(h)?;
            }
            let g = r.key.gpu;
            Self::evict(r, &mut gpu_ledgers[g], &mut cpu_ledgers[node_of_gpu(g)])?;
        }
        Ok(())
    }

    /// Checks that `r` holds exactly what its state requires.
    pub fn check_holdings(&self, r: &ResidentFunction, spec: &FunctionSpec) -> Result<(), String> {
        let ro = self.shares_ro(spec);
        let ctx = self.config.ctx_sharing;
        // (gpu_ro, gpu_ctx, cpu_ro_cache, cpu_ctx, container)
        let required = match r.state {
            ResidentState::Active(_) | ResidentState::Stage1 => (ro, ctx, ro, true, true),
            ResidentState::Stage2 => (false, ctx, ro, true, true),
            ResidentState::Stage3 => (false, false, ro, true, true),
            ResidentState::Stage4 => (false, false, false, false, true),
            ResidentState::Evicted => (false, false, false, false, false),
        };
        let held = (
            r.held.gpu_ro.is_some(),
            r.held.gpu_ctx.is_some(),
            r.held.cpu_ro_cache.is_some(),
            r.held.cpu_ctx,
            r.held.container,
        );
        if held != required {
            return Err(format!(
                "resident {:?} in {:?} holds {:?}, requires {:?}",
                r.key, r.state, held, required
            ));
        }
        let timer_expected = r.state.staged();
        if r.exit_timer.is_some() != timer_expected {
            return Err(format!(
                "resident {:?} in {:?} has timer={}",
                r.key,
                r.state,
                r.exit_timer.is_some()
            ));
        }
        Ok(())
    }
}

/// Warmth an arrival `gap` after the last completion finds, given the stage
/// intervals. Boundaries belong to the later (more decayed) stage.
pub fn classify_gap(gap: SimDuration, intervals: &[SimDuration; 4]) -> WarmthClass {
    let classes = [
        WarmthClass::Stage1Hot,
        WarmthClass::Stage2,
        WarmthClass::Stage3,
        WarmthClass::Stage4,
    ];
    let mut edge = SimDuration::ZERO;
    for (i, w) in classes.iter().enumerate() {
        edge += intervals[i];
        if gap < edge {
            return *w;
        }
    }
    WarmthClass::Cold
}
