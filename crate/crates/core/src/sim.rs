//! The simulated cluster.
//!
//! [`Simulation`] owns the event engine, per-GPU memory ledgers, host and
//! PCIe channels, the sharing manager, DGSF context pools and all
//! invocations. Each event handler updates that state and schedules the
//! follow-up events; nothing runs outside the engine's dispatch order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::{
    streams, Engine, EventHandle, EventKind, EventPayload, RngStream, SimDuration, SimTime,
};
use crate::error::{EngineError, SimError};
use crate::functions::{
    build_plan, ChannelClass, FunctionSpec, PlanRequest, SpecTable, Stage, StagePlan, WarmthClass,
};
use crate::metrics::{
    percentile, summarize, ChannelSummary, InvocationRecord, MemorySample, MemoryTracker, Outcome,
    RunSummary, SummaryContext,
};
use crate::policies::{AdmissionStyle, ContextPool, Dispatcher, PolicyConfig, Slot, SlotGrant};
use crate::resources::{
    AllocClass, AllocOutcome, AllocOwner, AllocationId, Channel, InvocationId, Megabytes,
    MemoryBreakdown, MemoryLedger, TransferId,
};
use crate::sharing::{ExitTimers, ManagerError, ResidentKey, ShareGrant, SharingManager};
use crate::workload::{generate, GeneratorKind, GeneratorSpec, StabilityReport};

/// Hardware of the simulated cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "default_gpus")]
    pub gpus: usize,
    /// GPUs sharing one host channel.
    #[serde(default = "default_gpus")]
    pub gpus_per_node: usize,
    #[serde(default = "default_gpu_mem")]
    pub gpu_mem_mb: f64,
    #[serde(default = "default_pcie")]
    pub pcie_mbps: f64,
    #[serde(default = "default_host")]
    pub host_mbps: f64,
    /// Kernels that may run at once on one GPU; `null` means unlimited.
    #[serde(default = "default_compute_concurrency")]
    pub compute_concurrency: Option<u32>,
}

fn default_gpus() -> usize {
    1
}
fn default_gpu_mem() -> f64 {
    40960.0
}
fn default_pcie() -> f64 {
    5051.0
}
fn default_host() -> f64 {
    1631.0
}
fn default_compute_concurrency() -> Option<u32> {
    Some(1)
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            gpus: default_gpus(),
            gpus_per_node: default_gpus(),
            gpu_mem_mb: default_gpu_mem(),
            pcie_mbps: default_pcie(),
            host_mbps: default_host(),
            compute_concurrency: default_compute_concurrency(),
        }
    }
}

impl ClusterConfig {
    pub fn with_gpus(mut self, gpus: usize) -> Self {
        self.gpus = gpus;
        self
    }

    pub fn nodes(&self) -> usize {
        self.gpus.div_ceil(self.gpus_per_node.max(1))
    }

    pub fn node_of(&self, gpu: usize) -> usize {
        gpu / self.gpus_per_node.max(1)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.gpus == 0 {
            return bad("cluster needs at least one GPU");
        }
        if self.gpus_per_node == 0 {
            return bad("gpus_per_node must be positive");
        }
        for (name, v) in [
            ("gpu_mem_mb", self.gpu_mem_mb),
            ("pcie_mbps", self.pcie_mbps),
            ("host_mbps", self.host_mbps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.compute_concurrency == Some(0) {
            return bad("compute_concurrency must be positive or null");
        }
        Ok(())
    }
}

/// Run controls independent of the workload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    /// Measurement window `[0, period]`. Defaults to the Poisson duration,
    /// or the whole run for other generators.
    pub period: Option<SimDuration>,
    /// Stop dispatching after this instant; `None` drains every event.
    pub stop_at: Option<SimTime>,
    /// Memory timeline sampling interval.
    pub sample_interval: Option<SimDuration>,
    /// Check resident holdings and ledger consistency after every event.
    pub check_invariants: bool,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub specs: SpecTable,
    pub cluster: ClusterConfig,
    pub policy: PolicyConfig,
    pub workload: GeneratorSpec,
    pub options: RunOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Arrival(usize),
    /// Closed-loop chain issues its next request.
    ChainNext(usize),
    StageDone {
        inv: InvocationId,
        node: usize,
    },
    Channel(usize),
    ExitTimer(ResidentKey),
    PoolTtl(ResidentKey),
    Sample,
}

impl EventPayload for Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Arrival(_) => EventKind::Arrival,
            Payload::ChainNext(_) => EventKind::GeneratorTick,
            Payload::StageDone { .. } => EventKind::StageComplete,
            Payload::Channel(_) => EventKind::TransferComplete,
            Payload::ExitTimer(_) | Payload::PoolTtl(_) => EventKind::ExitTimer,
            Payload::Sample => EventKind::MeasurementTick,
        }
    }
}

struct Timers<'a>(&'a mut Engine<Payload>);

impl ExitTimers for Timers<'_> {
    fn schedule_exit(&mut self, at: SimTime, key: ResidentKey) -> Result<EventHandle, EngineError> {
        self.0.schedule(at, Payload::ExitTimer(key))
    }

    fn cancel_exit(&mut self, handle: EventHandle) -> Result<bool, EngineError> {
        self.0.cancel(handle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Waiting for a DGSF context slot.
    PoolWait,
    /// In the GPU admission queue.
    Queued,
    Running,
    Done,
}

#[derive(Debug, Clone)]
struct Invocation {
    rec: InvocationRecord,
    function: usize,
    gpu: usize,
    chain: Option<usize>,
    phase: Phase,
    plan: Option<StagePlan>,
    waiting_preds: Vec<usize>,
    private: Vec<AllocationId>,
    grant: Option<ShareGrant>,
    pool_slot: Option<usize>,
    create_ctx: bool,
    await_ro: bool,
    await_ctx: bool,
    await_node: Option<usize>,
}

struct ClosedLoop {
    remaining: u64,
    functions: Vec<usize>,
    weights: Vec<f64>,
    rng: RngStream,
}

enum Admit {
    Started,
    Blocked,
    Failed,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<InvocationRecord>,
    pub summary: RunSummary,
    pub timeline: Vec<MemorySample>,
    pub end_time: SimTime,
    pub events: u64,
    /// Allocations still held after teardown; `None` when the run ended with
    /// work outstanding and no teardown was attempted.
    pub leaked: Option<Vec<String>>,
}

pub struct Simulation {
    engine: Engine<Payload>,
    specs: SpecTable,
    cluster: ClusterConfig,
    policy: PolicyConfig,
    options: RunOptions,
    arrivals: Vec<(SimTime, usize)>,
    closed: Option<ClosedLoop>,
    dispatcher: Dispatcher,
    gpu_ledgers: Vec<MemoryLedger>,
    cpu_ledgers: Vec<MemoryLedger>,
    channels: Vec<Channel>,
    transfers: BTreeMap<TransferId, (InvocationId, usize)>,
    next_transfer: TransferId,
    sharing: SharingManager,
    pools: BTreeMap<ResidentKey, ContextPool>,
    admit_queues: Vec<VecDeque<InvocationId>>,
    compute_running: Vec<u32>,
    compute_queues: Vec<VecDeque<(InvocationId, usize)>>,
    invs: Vec<Invocation>,
    trackers: Vec<MemoryTracker>,
    last_seen: Vec<MemoryBreakdown>,
    timeline: Vec<MemorySample>,
    window_end: Option<SimTime>,
    events: u64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let SimConfig {
            specs,
            cluster,
            policy,
            workload,
            options,
        } = config;
        cluster.validate()?;
        if specs.is_empty() {
            return Err(SimError::Config("spec table is empty".into()));
        }
        let generated = generate(&workload, &specs, options.seed)?;
        let mut arrivals = Vec::with_capacity(generated.len());
        for a in &generated {
            let idx = specs.require(&a.function)?;
            arrivals.push((a.at, specs.index_of(&idx.name).expect("required above")));
        }

        let closed = match &workload.generator {
            GeneratorKind::ClosedLoop { concurrency, count } => {
                let mix = workload.resolved_mix(&specs)?;
                Some((
                    *concurrency,
                    ClosedLoop {
                        remaining: *count,
                        functions: mix
                            .iter()
                            .map(|(n, _)| specs.index_of(n).expect("mix was validated"))
                            .collect(),
                        weights: mix.iter().map(|(_, w)| *w).collect(),
                        rng: RngStream::new(options.seed, streams::WORKLOAD),
                    },
                ))
            }
            _ => None,
        };

        let window_end = options
            .period
            .map(|p| SimTime::ZERO + p)
            .or(match &workload.generator {
                GeneratorKind::Poisson { duration_s, .. } => {
                    Some(SimTime::ZERO + SimDuration::from_secs_f64(*duration_s))
                }
                _ => None,
            });

        let gpus = cluster.gpus;
        let nodes = cluster.nodes();
        let capacity = Some(Megabytes::from_mb(cluster.gpu_mem_mb));
        let mut channels = Vec::with_capacity(nodes + gpus);
        for n in 0..nodes {
            channels.push(Channel::new(format!("host{n}"), cluster.host_mbps));
        }
        for g in 0..gpus {
            channels.push(Channel::new(format!("pcie{g}"), cluster.pcie_mbps));
        }

        let mut sim = Simulation {
            engine: Engine::new(),
            dispatcher: Dispatcher::new(options.seed, gpus),
            gpu_ledgers: (0..gpus)
                .map(|_| MemoryLedger::new(capacity, policy.granularity))
                .collect(),
            cpu_ledgers: (0..nodes)
                .map(|_| MemoryLedger::new(None, Megabytes::ZERO))
                .collect(),
            channels,
            transfers: BTreeMap::new(),
            next_transfer: 0,
            sharing: SharingManager::new(policy.sharing_config()),
            pools: BTreeMap::new(),
            admit_queues: vec![VecDeque::new(); gpus],
            compute_running: vec![0; gpus],
            compute_queues: vec![VecDeque::new(); gpus],
            invs: Vec::with_capacity(arrivals.len()),
            trackers: (0..gpus).map(|_| MemoryTracker::new(window_end)).collect(),
            last_seen: vec![MemoryBreakdown::default(); gpus],
            timeline: Vec::new(),
            window_end,
            events: 0,
            arrivals,
            closed: None,
            specs,
            cluster,
            policy,
            options,
        };

        if sim.policy.style() == AdmissionStyle::ContextPool {
            let used: BTreeSet<usize> = match &sim.closed_functions(&closed) {
                Some(f) => f.iter().copied().collect(),
                None => sim.arrivals.iter().map(|(_, f)| *f).collect(),
            };
            for g in 0..gpus {
                for &f in &used {
                    sim.register_pool(ResidentKey {
                        function: f,
                        gpu: g,
                    })?;
                }
            }
        }

        if let Some(&(at, _)) = sim.arrivals.first() {
            sim.engine.schedule(at, Payload::Arrival(0))?;
        }
        if let Some((concurrency, mut cl)) = closed {
            let first = cl.remaining.min(concurrency as u64);
            cl.remaining -= first;
            for c in 0..first as usize {
                sim.engine.schedule(SimTime::ZERO, Payload::ChainNext(c))?;
            }
            sim.closed = Some(cl);
        }
        if sim.options.sample_interval.is_some() {
            sim.engine.schedule(SimTime::ZERO, Payload::Sample)?;
        }
        sim.observe_memory();
        Ok(sim)
    }

    fn closed_functions(&self, closed: &Option<(u32, ClosedLoop)>) -> Option<Vec<usize>> {
        closed.as_ref().map(|(_, c)| c.functions.clone())
    }

    fn register_pool(&mut self, key: ResidentKey) -> Result<(), SimError> {
        let spec = self.specs.by_index(key.function);
        let size = self.policy.pre_created_contexts.max(1) as usize;
        let mut slots = Vec::with_capacity(size);
        for _ in 0..size {
            let owner = AllocOwner::ContextPool {
                function: key.function,
                gpu: key.gpu,
            };
            match self.gpu_ledgers[key.gpu].try_alloc(
                spec.context_mem,
                AllocClass::Context,
                owner,
            )? {
                AllocOutcome::Granted(id) => slots.push(Slot::Free(id)),
                AllocOutcome::Denied { .. } => slots.push(Slot::Absent),
            }
        }
        self.pools.insert(key, ContextPool::new(slots));
        Ok(())
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn sharing(&self) -> &SharingManager {
        &self.sharing
    }

    pub fn gpu_ledger(&self, gpu: usize) -> &MemoryLedger {
        &self.gpu_ledgers[gpu]
    }

    pub fn specs(&self) -> &SpecTable {
        &self.specs
    }

    pub fn records(&self) -> impl Iterator<Item = &InvocationRecord> {
        self.invs.iter().map(|i| &i.rec)
    }

    /// Dispatches one event. Returns `false` once nothing is left to do.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(ev) = self.engine.next_event(self.options.stop_at) else {
            return Ok(false);
        };
        self.events += 1;
        match ev.payload {
            Payload::Arrival(i) => {
                let (_, f) = self.arrivals[i];
                if let Some(&(at, _)) = self.arrivals.get(i + 1) {
                    self.engine.schedule(at, Payload::Arrival(i + 1))?;
                }
                self.on_arrival(f, None)?;
            }
            Payload::ChainNext(c) => {
                let cl = self
                    .closed
                    .as_mut()
                    .expect("chain events need a closed loop");
                let f = cl.functions[cl.rng.weighted_index(&cl.weights)];
                self.on_arrival(f, Some(c))?;
            }
            Payload::StageDone { inv, node } => self.complete_node(inv, node)?,
            Payload::Channel(ch) => self.on_channel(ch)?,
            Payload::ExitTimer(key) => {
                let now = self.engine.now();
                let node = self.cluster.node_of(key.gpu);
                self.sharing.on_exit_timer(
                    key,
                    self.specs.by_index(key.function),
                    now,
                    &mut self.gpu_ledgers[key.gpu],
                    &mut self.cpu_ledgers[node],
                    &mut Timers(&mut self.engine),
                )?;
                self.drain_admissions(key.gpu)?;
            }
            Payload::PoolTtl(key) => self.on_pool_ttl(key)?,
            Payload::Sample => self.on_sample()?,
        }
        self.observe_memory();
        if self.options.check_invariants {
            self.check_invariants()?;
        }
        Ok(true)
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        while self.step()? {}
        self.finish()
    }

    fn on_arrival(&mut self, function: usize, chain: Option<usize>) -> Result<(), SimError> {
        let now = self.engine.now();
        let id = self.invs.len() as InvocationId;
        let gpu = self.dispatcher.place();
        let mut rec = InvocationRecord::new(id, self.specs.by_index(function).name.clone(), now);
        rec.gpu = Some(gpu);
        self.invs.push(Invocation {
            rec,
            function,
            gpu,
            chain,
            phase: Phase::Queued,
            plan: None,
            waiting_preds: Vec::new(),
            private: Vec::new(),
            grant: None,
            pool_slot: None,
            create_ctx: false,
            await_ro: false,
            await_ctx: false,
            await_node: None,
        });
        if self.policy.style() == AdmissionStyle::ContextPool {
            let key = ResidentKey { function, gpu };
            if !self.pools.contains_key(&key) {
                self.register_pool(key)?;
            }
            let pool = self.pools.get_mut(&key).expect("registered above");
            if let Some(h) = pool.ttl_timer.take() {
                self.engine.cancel(h)?;
            }
            let grant = pool.acquire(id);
            if grant == SlotGrant::Queued {
                self.invs[id as usize].phase = Phase::PoolWait;
                return Ok(());
            }
            self.take_slot(key, id, grant);
        }
        self.admit_queues[gpu].push_back(id);
        self.drain_admissions(gpu)
    }

    /// Claims the pool slot named by `grant` for `id`.
    fn take_slot(&mut self, key: ResidentKey, id: InvocationId, grant: SlotGrant) {
        let pool = self.pools.get_mut(&key).expect("pool exists");
        let inv = &mut self.invs[id as usize];
        match grant {
            SlotGrant::Ready(i) => {
                let Slot::Free(ctx) = pool.slots[i] else {
                    unreachable!("ready slot holds a context")
                };
                pool.mark_busy(i, ctx);
                inv.pool_slot = Some(i);
                inv.create_ctx = false;
            }
            SlotGrant::Create(i) => {
                pool.reserve(i);
                inv.pool_slot = Some(i);
                inv.create_ctx = true;
            }
            SlotGrant::Queued => unreachable!("queued grants hold no slot"),
        }
    }

    /// Returns a slot and hands freed slots to waiting invocations in order.
    fn release_slot(&mut self, key: ResidentKey, slot: usize) -> Result<(), SimError> {
        let now = self.engine.now();
        let ttl = self.policy.dgsf_ctx_ttl;
        let pool = self.pools.get_mut(&key).expect("pool exists");
        if pool.slots[slot] == Slot::Reserved {
            pool.unreserve(slot);
        } else {
            pool.release(slot);
        }
        let mut handed = Vec::new();
        while let Some(&w) = pool.waiters.front() {
            let Some(g) = pool.find_slot() else { break };
            pool.waiters.pop_front();
            handed.push((w, g));
            // `take_slot` needs the pool mutably; mark now to keep find_slot honest.
            match g {
                SlotGrant::Ready(i) => {
                    if let Slot::Free(ctx) = pool.slots[i] {
                        pool.mark_busy(i, ctx);
                    }
                }
                SlotGrant::Create(i) => pool.reserve(i),
                SlotGrant::Queued => {}
            }
        }
        let idle = pool.is_idle();
        if idle {
            if let Some(ttl) = ttl {
                if let Some(h) = pool.ttl_timer.take() {
                    self.engine.cancel(h)?;
                }
                pool.ttl_timer = Some(self.engine.schedule(now + ttl, Payload::PoolTtl(key))?);
            }
        }
        for (w, g) in handed {
            let inv = &mut self.invs[w as usize];
            match g {
                SlotGrant::Ready(i) => {
                    inv.pool_slot = Some(i);
                    inv.create_ctx = false;
                }
                SlotGrant::Create(i) => {
                    inv.pool_slot = Some(i);
                    inv.create_ctx = true;
                }
                SlotGrant::Queued => {}
            }
            inv.phase = Phase::Queued;
            self.admit_queues[key.gpu].push_back(w);
        }
        Ok(())
    }

    fn on_pool_ttl(&mut self, key: ResidentKey) -> Result<(), SimError> {
        let Some(pool) = self.pools.get_mut(&key) else {
            return Ok(());
        };
        pool.ttl_timer = None;
        if !pool.is_idle() {
            return Ok(());
        }
        for id in pool.destroy_idle() {
            self.gpu_ledgers[key.gpu].free(id)?;
        }
        self.drain_admissions(key.gpu)
    }

    /// Admits queued invocations on `gpu` in FIFO order until the head blocks.
    fn drain_admissions(&mut self, gpu: usize) -> Result<(), SimError> {
        while let Some(&id) = self.admit_queues[gpu].front() {
            match self.try_admit(id)? {
                Admit::Started => {
                    self.admit_queues[gpu].pop_front();
                }
                Admit::Blocked => break,
                Admit::Failed => {
                    self.admit_queues[gpu].pop_front();
                    self.fail(id)?;
                }
            }
        }
        Ok(())
    }

    fn exceeds_capacity(&self, gpu: usize, effective: Megabytes) -> bool {
        self.gpu_ledgers[gpu]
            .capacity()
            .is_some_and(|c| effective > c)
    }

    fn try_admit(&mut self, id: InvocationId) -> Result<Admit, SimError> {
        let (function, gpu) = {
            let inv = &self.invs[id as usize];
            (inv.function, inv.gpu)
        };
        let mode = self.policy.plan_mode;
        match self.policy.style() {
            AdmissionStyle::FixedInstance => {
                let spec = self.specs.by_index(function);
                let size = spec.total_mem();
                let ledger = &mut self.gpu_ledgers[gpu];
                if ledger
                    .capacity()
                    .is_some_and(|c| ledger.effective_size(size) > c)
                {
                    return Ok(Admit::Failed);
                }
                match ledger.try_alloc(
                    size,
                    AllocClass::InstanceFixed,
                    AllocOwner::Invocation(id),
                )? {
                    AllocOutcome::Granted(a) => {
                        let req = PlanRequest::for_warmth(spec, WarmthClass::Cold, mode);
                        self.invs[id as usize].private.push(a);
                        self.start(id, req, WarmthClass::Cold)?;
                        Ok(Admit::Started)
                    }
                    AllocOutcome::Denied { .. } => Ok(Admit::Blocked),
                }
            }
            AdmissionStyle::ContextPool => {
                let spec = self.specs.by_index(function).clone();
                let create = self.invs[id as usize].create_ctx;
                let mut parts = vec![
                    (spec.ro_mem, AllocClass::ReadOnly),
                    (spec.writable_mem, AllocClass::Writable),
                ];
                if create {
                    parts.push((spec.context_mem, AllocClass::Context));
                }
                parts.retain(|(m, _)| !m.is_zero());
                let ledger = &self.gpu_ledgers[gpu];
                let need: Megabytes = parts.iter().map(|(m, _)| ledger.effective_size(*m)).sum();
                if self.exceeds_capacity(gpu, need) {
                    return Ok(Admit::Failed);
                }
                let key = ResidentKey { function, gpu };
                if !ledger.fits(need) && !self.reclaim_idle_contexts(key, need)? {
                    return Ok(Admit::Blocked);
                }
                let slot = self.invs[id as usize]
                    .pool_slot
                    .expect("admitted with a slot");
                for (m, class) in parts {
                    let owner = if class == AllocClass::Context {
                        AllocOwner::ContextPool { function, gpu }
                    } else {
                        AllocOwner::Invocation(id)
                    };
                    let AllocOutcome::Granted(a) =
                        self.gpu_ledgers[gpu].try_alloc(m, class, owner)?
                    else {
                        return Err(SimError::Invariant("pool admission lost its fit".into()));
                    };
                    if class == AllocClass::Context {
                        self.pools
                            .get_mut(&key)
                            .expect("pool exists")
                            .mark_busy(slot, a);
                    } else {
                        self.invs[id as usize].private.push(a);
                    }
                }
                let req = PlanRequest {
                    mode,
                    container: true,
                    cpu_ctx: true,
                    gpu_ctx: create,
                    host_bytes: spec.ro_bytes_host + spec.input_bytes_host,
                    pcie_bytes: spec.ro_bytes_pcie + spec.input_bytes_pcie,
                    await_read_only: false,
                    await_context: false,
                };
                self.start(id, req, WarmthClass::Cold)?;
                Ok(Admit::Started)
            }
            AdmissionStyle::Sharing => self.try_admit_shared(id, function, gpu),
        }
    }

    /// Destroys idle contexts of other functions' pools on `key.gpu` until
    /// `need` fits. Destroys nothing when even all of them would not do.
    fn reclaim_idle_contexts(
        &mut self,
        key: ResidentKey,
        need: Megabytes,
    ) -> Result<bool, SimError> {
        let ledger = &self.gpu_ledgers[key.gpu];
        let Some(free) = ledger.free_space() else {
            return Ok(true);
        };
        let victims: Vec<(ResidentKey, Megabytes)> = self
            .pools
            .iter()
            .filter(|(k, _)| k.gpu == key.gpu && **k != key)
            .flat_map(|(k, pool)| {
                let size = ledger.effective_size(self.specs.by_index(k.function).context_mem);
                pool.slots
                    .iter()
                    .filter(|s| matches!(s, Slot::Free(_)))
                    .map(move |_| (*k, size))
            })
            .collect();
        let reclaimable: Megabytes = victims.iter().map(|v| v.1).sum();
        if free + reclaimable < need {
            return Ok(false);
        }
        for (k, _) in victims {
            if self.gpu_ledgers[key.gpu].fits(need) {
                break;
            }
            let pool = self.pools.get_mut(&k).expect("victim pool exists");
            if let Some(id) = pool.destroy_one_idle() {
                self.gpu_ledgers[key.gpu].free(id)?;
            }
        }
        Ok(true)
    }

    fn try_admit_shared(
        &mut self,
        id: InvocationId,
        function: usize,
        gpu: usize,
    ) -> Result<Admit, SimError> {
        let now = self.engine.now();
        let key = ResidentKey { function, gpu };
        let node = self.cluster.node_of(gpu);
        let spec = self.specs.by_index(function);
        let grant = self.sharing.grant_for(key, spec);
        let need = self
            .sharing
            .delta_for(&grant, spec)
            .effective(&self.gpu_ledgers[gpu]);
        if self.exceeds_capacity(gpu, need) {
            return Ok(Admit::Failed);
        }
        if !self.gpu_ledgers[gpu].fits(need) {
            // Reclaim idle residents only if that is enough to admit.
            let reclaimable: Megabytes = self
                .sharing
                .demotion_candidates(gpu)
                .into_iter()
                .filter(|k| *k != key)
                .filter_map(|k| self.sharing.get(k))
                .flat_map(|r| [r.held.gpu_ro, r.held.gpu_ctx])
                .flatten()
                .filter_map(|a| self.gpu_ledgers[gpu].get(a).map(|a| a.effective))
                .sum();
            let free = self.gpu_ledgers[gpu].free_space().unwrap_or(need);
            if free + reclaimable < need {
                return Ok(Admit::Blocked);
            }
            while !self.gpu_ledgers[gpu].fits(need) {
                let Some(victim) = self
                    .sharing
                    .demotion_candidates(gpu)
                    .into_iter()
                    .find(|k| *k != key)
                else {
                    break;
                };
                self.sharing.force_demote(
                    victim,
                    self.specs.by_index(victim.function),
                    now,
                    &mut self.gpu_ledgers[gpu],
                    &mut self.cpu_ledgers[node],
                    &mut Timers(&mut self.engine),
                )?;
            }
        }
        let spec = self.specs.by_index(function);
        match self.sharing.admit(
            key,
            spec,
            id,
            &mut self.gpu_ledgers[gpu],
            &mut self.cpu_ledgers[node],
            &mut Timers(&mut self.engine),
        ) {
            Ok((grant, allocs)) => {
                let ro_host = if grant.load_ro_host {
                    spec.ro_bytes_host
                } else {
                    Megabytes::ZERO
                };
                let ro_pcie = if grant.load_ro_pcie {
                    spec.ro_bytes_pcie
                } else {
                    Megabytes::ZERO
                };
                let req = PlanRequest {
                    mode: self.policy.plan_mode,
                    container: grant.container,
                    cpu_ctx: grant.cpu_ctx,
                    gpu_ctx: !grant.shared_ctx,
                    host_bytes: spec.input_bytes_host + ro_host,
                    pcie_bytes: spec.input_bytes_pcie + ro_pcie,
                    await_read_only: grant.await_ro,
                    await_context: grant.await_ctx,
                };
                let inv = &mut self.invs[id as usize];
                inv.private = allocs.private;
                inv.grant = Some(grant);
                inv.await_ro = grant.await_ro;
                inv.await_ctx = grant.await_ctx;
                self.start(id, req, grant.warmth)?;
                Ok(Admit::Started)
            }
            Err(ManagerError::Denied) => Ok(Admit::Blocked),
            Err(e) => Err(e.into()),
        }
    }

    fn start(
        &mut self,
        id: InvocationId,
        req: PlanRequest,
        warmth: WarmthClass,
    ) -> Result<(), SimError> {
        let now = self.engine.now();
        let plan = build_plan(self.specs.by_index(self.invs[id as usize].function), &req);
        let inv = &mut self.invs[id as usize];
        inv.phase = Phase::Running;
        inv.rec.start = Some(now);
        inv.rec.warmth = Some(warmth);
        inv.rec.host_bytes = plan.bytes_on(ChannelClass::Host);
        inv.rec.pcie_bytes = plan.bytes_on(ChannelClass::Pcie);
        inv.waiting_preds = plan.nodes.iter().map(|n| n.preds.len()).collect();
        let roots: Vec<usize> = (0..plan.nodes.len())
            .filter(|&i| plan.nodes[i].preds.is_empty())
            .collect();
        inv.plan = Some(plan);
        for r in roots {
            self.launch(id, r)?;
        }
        Ok(())
    }

    fn launch(&mut self, id: InvocationId, node: usize) -> Result<(), SimError> {
        let now = self.engine.now();
        let inv = &mut self.invs[id as usize];
        let stage = inv
            .plan
            .as_ref()
            .expect("running invocations have a plan")
            .nodes[node]
            .stage;
        let gpu = inv.gpu;
        let done = Payload::StageDone { inv: id, node };
        match stage {
            Stage::Compute(d) => {
                let limit = self.cluster.compute_concurrency.unwrap_or(u32::MAX);
                if self.compute_running[gpu] < limit {
                    self.compute_running[gpu] += 1;
                    inv.rec.stages[stage.kind().index()] = Some((now, now));
                    self.engine.schedule(now + d, done)?;
                } else {
                    self.compute_queues[gpu].push_back((id, node));
                }
            }
            Stage::CpuLoad(bytes) | Stage::GpuLoad(bytes) => {
                inv.rec.stages[stage.kind().index()] = Some((now, now));
                if bytes.is_zero() {
                    self.engine.schedule(now, done)?;
                } else {
                    let ch = match stage {
                        Stage::CpuLoad(_) => self.cluster.node_of(gpu),
                        _ => self.cluster.nodes() + gpu,
                    };
                    let tid = self.next_transfer;
                    self.next_transfer += 1;
                    self.channels[ch].begin_transfer(now, tid, id, bytes)?;
                    self.transfers.insert(tid, (id, node));
                    self.channels[ch].reschedule(&mut self.engine, || Payload::Channel(ch))?;
                }
            }
            Stage::AwaitShared { .. } => {
                inv.rec.stages[stage.kind().index()] = Some((now, now));
                if inv.await_ro || inv.await_ctx {
                    inv.await_node = Some(node);
                } else {
                    self.engine.schedule(now, done)?;
                }
            }
            Stage::Container(d) | Stage::CpuCtx(d) | Stage::GpuCtx(d) | Stage::Return(d) => {
                inv.rec.stages[stage.kind().index()] = Some((now, now));
                self.engine.schedule(now + d, done)?;
            }
        }
        Ok(())
    }

    fn on_channel(&mut self, ch: usize) -> Result<(), SimError> {
        let now = self.engine.now();
        let done = self.channels[ch].take_completed(now);
        for t in done {
            let (id, node) = self
                .transfers
                .remove(&t.id)
                .ok_or_else(|| SimError::Invariant(format!("unknown transfer {}", t.id)))?;
            self.complete_node(id, node)?;
        }
        self.channels[ch].reschedule(&mut self.engine, || Payload::Channel(ch))?;
        Ok(())
    }

    fn complete_node(&mut self, id: InvocationId, node: usize) -> Result<(), SimError> {
        let now = self.engine.now();
        let inv = &mut self.invs[id as usize];
        let plan = inv.plan.as_ref().expect("running invocations have a plan");
        let stage = plan.nodes[node].stage;
        if let Some(span) = inv.rec.stages[stage.kind().index()].as_mut() {
            span.1 = now;
        }
        let successors: Vec<usize> = plan.successors(node).collect();
        let gpu = inv.gpu;
        let key = ResidentKey {
            function: inv.function,
            gpu,
        };
        let grant = inv.grant;
        match stage {
            Stage::GpuLoad(_) if grant.is_some_and(|g| g.ro_leader) => {
                for w in self.sharing.mark_ro_ready(key) {
                    self.invs[w as usize].await_ro = false;
                    self.release_await(w)?;
                }
            }
            Stage::GpuCtx(_) if grant.is_some_and(|g| g.ctx_leader) => {
                for w in self.sharing.mark_ctx_ready(key) {
                    self.invs[w as usize].await_ctx = false;
                    self.release_await(w)?;
                }
            }
            Stage::Compute(_) => {
                self.compute_running[gpu] -= 1;
                if let Some((next, n)) = self.compute_queues[gpu].pop_front() {
                    self.launch(next, n)?;
                }
            }
            Stage::Return(_) => return self.finish_invocation(id),
            _ => {}
        }
        for s in successors {
            let inv = &mut self.invs[id as usize];
            inv.waiting_preds[s] -= 1;
            if inv.waiting_preds[s] == 0 {
                self.launch(id, s)?;
            }
        }
        Ok(())
    }

    fn release_await(&mut self, id: InvocationId) -> Result<(), SimError> {
        let inv = &mut self.invs[id as usize];
        if !inv.await_ro && !inv.await_ctx {
            if let Some(node) = inv.await_node.take() {
                let now = self.engine.now();
                self.engine
                    .schedule(now, Payload::StageDone { inv: id, node })?;
            }
        }
        Ok(())
    }

    fn finish_invocation(&mut self, id: InvocationId) -> Result<(), SimError> {
        let now = self.engine.now();
        let inv = &mut self.invs[id as usize];
        inv.phase = Phase::Done;
        inv.rec.completion = Some(now);
        inv.rec.outcome = Outcome::Completed;
        let gpu = inv.gpu;
        let key = ResidentKey {
            function: inv.function,
            gpu,
        };
        let private = std::mem::take(&mut inv.private);
        let slot = inv.pool_slot.take();
        for a in private {
            self.gpu_ledgers[gpu].free(a)?;
        }
        match self.policy.style() {
            AdmissionStyle::FixedInstance => {}
            AdmissionStyle::ContextPool => {
                if let Some(s) = slot {
                    self.release_slot(key, s)?;
                }
            }
            AdmissionStyle::Sharing => {
                let node = self.cluster.node_of(gpu);
                self.sharing.release(
                    key,
                    now,
                    &mut self.gpu_ledgers[gpu],
                    &mut self.cpu_ledgers[node],
                    &mut Timers(&mut self.engine),
                )?;
            }
        }
        self.continue_chain(id)?;
        self.drain_admissions(gpu)
    }

    fn fail(&mut self, id: InvocationId) -> Result<(), SimError> {
        let inv = &mut self.invs[id as usize];
        inv.phase = Phase::Done;
        inv.rec.outcome = Outcome::Failed;
        let key = ResidentKey {
            function: inv.function,
            gpu: inv.gpu,
        };
        if let Some(s) = inv.pool_slot.take() {
            self.release_slot(key, s)?;
        }
        self.continue_chain(id)
    }

    fn continue_chain(&mut self, id: InvocationId) -> Result<(), SimError> {
        let Some(c) = self.invs[id as usize].chain else {
            return Ok(());
        };
        let cl = self
            .closed
            .as_mut()
            .expect("chained invocation without a loop");
        if cl.remaining > 0 {
            cl.remaining -= 1;
            let now = self.engine.now();
            self.engine.schedule(now, Payload::ChainNext(c))?;
        }
        Ok(())
    }

    fn on_sample(&mut self) -> Result<(), SimError> {
        let now = self.engine.now();
        for (gpu, l) in self.gpu_ledgers.iter().enumerate() {
            self.timeline.push(MemorySample {
                time: now,
                gpu,
                usage: l.breakdown(),
            });
        }
        let interval = self.options.sample_interval.expect("sampling enabled");
        let next = now + interval.max(SimDuration::from_us(1));
        let more = match self.window_end {
            Some(end) => next <= end,
            None => self.engine.pending() > 0,
        };
        if more {
            self.engine.schedule(next, Payload::Sample)?;
        }
        Ok(())
    }

    fn observe_memory(&mut self) {
        let now = self.engine.now();
        for g in 0..self.gpu_ledgers.len() {
            let b = self.gpu_ledgers[g].breakdown();
            if b != self.last_seen[g] || now == SimTime::ZERO {
                self.trackers[g].observe(now, b);
                self.last_seen[g] = b;
            }
        }
    }

    /// Resident holdings match their states; ledgers are consistent.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        for r in self.sharing.residents() {
            self.sharing
                .check_holdings(r, self.specs.by_index(r.key.function))
                .map_err(SimError::Invariant)?;
        }
        for (g, l) in self.gpu_ledgers.iter().enumerate() {
            if l.breakdown().total() != l.used() {
                return Err(SimError::Invariant(format!(
                    "gpu {g}: breakdown disagrees with usage"
                )));
            }
            if !l.fits(Megabytes::ZERO) {
                return Err(SimError::Invariant(format!("gpu {g}: over capacity")));
            }
            let limit = self.cluster.compute_concurrency.unwrap_or(u32::MAX);
            if self.compute_running[g] > limit {
                return Err(SimError::Invariant(format!("gpu {g}: compute over limit")));
            }
        }
        Ok(())
    }

    /// Closes the run: memory averages, teardown and leak check, summary.
    pub fn finish(mut self) -> Result<SimOutput, SimError> {
        let end = self.engine.now();
        let window_end = self.window_end.unwrap_or(end);
        let memory = self
            .trackers
            .iter_mut()
            .map(|t| t.finish(window_end.max(end)))
            .collect();

        let outstanding = self.invs.iter().any(|i| i.phase != Phase::Done);
        let leaked = if outstanding {
            None
        } else {
            let node_of = {
                let c = self.cluster.clone();
                move |g: usize| c.node_of(g)
            };
            self.sharing.teardown(
                &mut self.gpu_ledgers,
                &mut self.cpu_ledgers,
                node_of,
                &mut Timers(&mut self.engine),
            )?;
            for (key, pool) in self.pools.iter_mut() {
                if let Some(h) = pool.ttl_timer.take() {
                    self.engine.cancel(h)?;
                }
                let ids: Vec<AllocationId> = pool.allocations().collect();
                for id in ids {
                    self.gpu_ledgers[key.gpu].free(id)?;
                }
                for s in pool.slots.iter_mut() {
                    *s = Slot::Absent;
                }
            }
            let mut left = Vec::new();
            for (g, l) in self.gpu_ledgers.iter().enumerate() {
                for (id, a) in l.allocations() {
                    left.push(format!(
                        "gpu{g} allocation {id}: {:?} {}",
                        a.owner, a.requested
                    ));
                }
            }
            for (n, l) in self.cpu_ledgers.iter().enumerate() {
                for (id, a) in l.allocations() {
                    left.push(format!(
                        "host{n} allocation {id}: {:?} {}",
                        a.owner, a.requested
                    ));
                }
            }
            Some(left)
        };

        let span = end.since(SimTime::ZERO);
        let channels = self
            .channels
            .iter()
            .map(|c| ChannelSummary {
                name: c.name().to_string(),
                bandwidth_mbps: c.bandwidth_mbps(),
                busy_fraction: if span.is_zero() {
                    0.0
                } else {
                    c.busy_time().as_us() as f64 / span.as_us() as f64
                },
                delivered_mb: c.delivered().as_mb(),
                completed_transfer_mb: c.completed_bytes().as_mb(),
                transfers: c.completed_count(),
            })
            .collect();
        let records: Vec<InvocationRecord> = self.invs.into_iter().map(|i| i.rec).collect();
        let summary = summarize(
            &records,
            SummaryContext {
                policy: self.policy.name.as_str(),
                seed: self.options.seed,
                period: window_end.since(SimTime::ZERO),
                gpus: self.cluster.gpus,
                specs: &self.specs,
                memory,
                channels,
            },
        );
        Ok(SimOutput {
            records,
            summary,
            timeline: self.timeline,
            end_time: end,
            events: self.events,
            leaked,
        })
    }
}

/// Runs `config` to completion.
pub fn run(config: SimConfig) -> Result<SimOutput, SimError> {
    Simulation::new(config)?.run()
}

/// Number of invocations that have arrived by `t` and are neither finished
/// nor failed.
fn in_system(records: &[InvocationRecord], t: SimTime) -> u64 {
    records
        .iter()
        .filter(|r| r.arrival <= t)
        .filter(|r| match r.outcome {
            Outcome::Completed => r.completion.is_some_and(|c| c > t),
            Outcome::Failed => false,
            Outcome::Pending => true,
        })
        .count() as u64
}

/// Stability observations over `[0, window_end]`. Unfinished invocations
/// count with their age at `observed_until` as a latency lower bound.
pub fn stability_report(
    records: &[InvocationRecord],
    window_end: SimTime,
    observed_until: SimTime,
) -> StabilityReport {
    let w = window_end.as_us();
    let early = SimTime::from_us(w / 10);
    let quartile = |lo: u64, hi: u64| -> Option<f64> {
        let lat: Vec<f64> = records
            .iter()
            .filter(|r| (lo..hi).contains(&r.arrival.as_us()))
            .filter(|r| r.outcome != Outcome::Failed)
            .map(|r| match r.latency() {
                Some(d) => d.as_ms_f64(),
                None => observed_until.since(r.arrival).as_ms_f64(),
            })
            .collect();
        percentile(&lat, 99.0).ok()
    };
    StabilityReport {
        in_system_early: in_system(records, early),
        in_system_end: in_system(records, window_end),
        p99_first_quartile_ms: quartile(0, w / 4),
        p99_last_quartile_ms: quartile(w - w / 4, w + 1),
        completed: records
            .iter()
            .filter(|r| r.completion.is_some_and(|c| c <= window_end))
            .count() as u64,
    }
}

/// One peak-search probe: `base` with a Poisson workload at `rate` over the
/// base duration, stopped at the end of the window.
pub fn probe(base: &SimConfig, rate: f64, duration_s: f64) -> Result<StabilityReport, SimError> {
    let mut cfg = base.clone();
    cfg.workload = GeneratorSpec {
        generator: GeneratorKind::Poisson { rate, duration_s },
        mix: base.workload.mix.clone(),
    };
    let end = SimTime::ZERO + SimDuration::from_secs_f64(duration_s);
    cfg.options.period = None;
    cfg.options.stop_at = Some(end);
    cfg.options.sample_interval = None;
    let sim = Simulation::new(cfg)?;
    let out = sim.run()?;
    Ok(stability_report(&out.records, end, end))
}

/// Uncontended latency of one invocation of `spec` admitted with `warmth`.
pub fn solo_latency(
    spec: &FunctionSpec,
    req: &PlanRequest,
    cluster: &ClusterConfig,
) -> SimDuration {
    build_plan(spec, req).solo_latency(cluster.host_mbps, cluster.pcie_mbps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::default_table;
    use crate::policies::{PolicyName, PolicyOverrides};
    use crate::workload::InlineArrival;

    fn config(policy: PolicyName, arrivals: &[(f64, &str)]) -> SimConfig {
        SimConfig {
            specs: default_table(),
            cluster: ClusterConfig::default(),
            policy: PolicyConfig::preset(policy),
            workload: GeneratorSpec {
                generator: GeneratorKind::Arrivals {
                    arrivals: arrivals
                        .iter()
                        .map(|(t, f)| InlineArrival {
                            timestamp_ms: *t,
                            function: f.to_string(),
                        })
                        .collect(),
                },
                mix: Default::default(),
            },
            options: RunOptions {
                check_invariants: true,
                ..Default::default()
            },
        }
    }

    fn latencies(out: &SimOutput) -> Vec<f64> {
        out.records
            .iter()
            .map(|r| r.latency().expect("completed").as_ms_f64())
            .collect()
    }

    #[test]
    fn fixed_gsl_single_cold_invocation() {
        let out = run(config(PolicyName::FixedGsl, &[(0.0, "resnet50")])).unwrap();
        assert_eq!(latencies(&out), vec![399.398]);
        assert_eq!(out.leaked, Some(vec![]));
    }

    #[test]
    fn sage_warmth_sequence() {
        let arrivals = [
            (0.0, "resnet50"),
            (10_000.0, "resnet50"),
            (60_000.0, "resnet50"),
            (140_000.0, "resnet50"),
            (250_000.0, "resnet50"),
            (400_000.0, "resnet50"),
        ];
        let out = run(config(PolicyName::Sage, &arrivals)).unwrap();
        let got = latencies(&out);
        let want = [310.5, 28.909, 49.717, 309.5, 309.5, 310.5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 0.002, "{got:?}");
        }
        let warmth: Vec<_> = out.records.iter().map(|r| r.warmth.unwrap()).collect();
        assert_eq!(
            warmth,
            vec![
                WarmthClass::Cold,
                WarmthClass::Stage1Hot,
                WarmthClass::Stage2,
                WarmthClass::Stage3,
                WarmthClass::Stage4,
                WarmthClass::Cold
            ]
        );
        assert_eq!(out.leaked, Some(vec![]));
    }

    #[test]
    fn concurrent_sharers_wait_for_the_leader() {
        let out = run(config(
            PolicyName::Sage,
            &[(0.0, "resnet50"), (0.0, "resnet50")],
        ))
        .unwrap();
        let spec = default_table().require("resnet50").unwrap().clone();
        let pcie: Megabytes = out.records.iter().map(|r| r.pcie_bytes).sum();
        assert_eq!(pcie, spec.ro_bytes_pcie + spec.input_bytes_pcie.scale(2));
        // Compute is exclusive, so the follower computes after the leader.
        let c0 = out.records[0].completion.unwrap();
        let c1 = out.records[1].completion.unwrap();
        assert!(c1 > c0);
    }

    #[test]
    fn dgsf_reuses_pooled_contexts() {
        let out = run(config(PolicyName::Dgsf, &[(0.0, "resnet50")])).unwrap();
        // No GPU context creation: 1 + 67.199 + 21.699 + 24.3 + 0.1.
        assert_eq!(latencies(&out), vec![114.298]);
        assert_eq!(out.leaked, Some(vec![]));
    }

    #[test]
    fn dgsf_ttl_recreates_contexts() {
        let mut cfg = config(
            PolicyName::Dgsf,
            &[(0.0, "resnet50"), (20_000.0, "resnet50")],
        );
        cfg.policy = cfg.policy.with_overrides(&PolicyOverrides {
            dgsf_ctx_ttl: Some(5.0),
            ..Default::default()
        });
        let out = run(cfg).unwrap();
        assert_eq!(latencies(&out), vec![114.298, 399.398]);
    }

    #[test]
    fn dgsf_reclaims_idle_contexts_of_other_functions() {
        // Four resnet50 contexts leave 344 MB; lbm needs 744 MB and gets it
        // by destroying one idle resnet50 context.
        let mut cfg = config(
            PolicyName::Dgsf,
            &[(0.0, "resnet50"), (1_000.0, "lbm"), (5_000.0, "resnet50")],
        );
        cfg.cluster.gpu_mem_mb = 2000.0;
        let out = run(cfg).unwrap();
        let solo_lbm = run(config(PolicyName::FixedGslF, &[(0.0, "lbm")])).unwrap();
        let l = latencies(&out);
        assert_eq!(l[1], latencies(&solo_lbm)[0]);
        assert_eq!(l[2], 114.298);
        assert_eq!(out.leaked, Some(vec![]));
    }

    #[test]
    fn oversized_invocation_fails() {
        let mut cfg = config(PolicyName::FixedGsl, &[(0.0, "bert"), (1.0, "resnet50")]);
        cfg.cluster.gpu_mem_mb = 1024.0;
        let out = run(cfg).unwrap();
        assert_eq!(out.records[0].outcome, Outcome::Failed);
        assert_eq!(out.records[1].outcome, Outcome::Completed);
    }

    #[test]
    fn fixed_instances_queue_for_memory() {
        let mut cfg = config(
            PolicyName::FixedGsl,
            &[(0.0, "resnet50"), (0.0, "resnet50")],
        );
        cfg.cluster.gpu_mem_mb = 1024.0;
        let out = run(cfg).unwrap();
        let l = latencies(&out);
        assert_eq!(l[0], 399.398);
        assert!((l[1] - 2.0 * 399.398).abs() < 0.002, "{l:?}");
    }

    #[test]
    fn closed_loop_issues_count_requests() {
        let mut cfg = config(PolicyName::Sage, &[]);
        cfg.workload = GeneratorSpec {
            generator: GeneratorKind::ClosedLoop {
                concurrency: 3,
                count: 20,
            },
            mix: [("resnet50".to_string(), 1.0)].into_iter().collect(),
        };
        let out = run(cfg).unwrap();
        assert_eq!(out.records.len(), 20);
        assert!(out.records.iter().all(|r| r.outcome == Outcome::Completed));
        assert_eq!(out.leaked, Some(vec![]));
    }

    #[test]
    fn memory_pressure_demotes_idle_residents() {
        let mut cfg = config(PolicyName::Sage, &[(0.0, "bert"), (2_000.0, "vgg11")]);
        // bert keeps 414 + 1282.5 resident; vgg11 needs 414 + 544.8.
        cfg.cluster.gpu_mem_mb = 2300.0;
        let out = run(cfg).unwrap();
        assert!(out.records.iter().all(|r| r.outcome == Outcome::Completed));
        assert_eq!(out.leaked, Some(vec![]));
    }
}
