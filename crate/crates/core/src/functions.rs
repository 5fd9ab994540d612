//! Function specifications and per-invocation stage plans.
//!
//! A [`StagePlan`] is a small DAG over the setup stages, compute and result
//! return. Serial plans chain every stage; parallel plans run GPU context
//! creation alongside the CPU-load → GPU-load chain and join at compute.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SimDuration;
use crate::error::SpecError;
use crate::resources::Megabytes;

/// Calibrated description of one GPU function. Memory in MB, times in ms at
/// the file boundary; stored as fixed-point internally.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpec {
    pub name: String,
    pub context_mem: Megabytes,
    pub ro_mem: Megabytes,
    pub writable_mem: Megabytes,
    pub ro_bytes_host: Megabytes,
    pub ro_bytes_pcie: Megabytes,
    pub input_bytes_host: Megabytes,
    pub input_bytes_pcie: Megabytes,
    pub container_time: SimDuration,
    pub cpu_ctx_time: SimDuration,
    pub gpu_ctx_time: SimDuration,
    pub compute_time: SimDuration,
    pub return_time: SimDuration,
}

impl FunctionSpec {
    pub fn explicit_mem(&self) -> Megabytes {
        self.ro_mem + self.writable_mem
    }

    /// Context plus explicit memory: the footprint of one unshared instance.
    pub fn total_mem(&self) -> Megabytes {
        self.context_mem + self.explicit_mem()
    }

    pub fn has_read_only(&self) -> bool {
        !self.ro_mem.is_zero()
    }
}

/// On-disk form of a [`FunctionSpec`]. Omitted byte counts take defaults:
/// read-only transfer sizes equal `ro_mem`, input sizes are 5% of explicit
/// memory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FunctionRecord {
    pub name: String,
    #[serde(default = "default_context")]
    pub context_mem: f64,
    pub ro_mem: f64,
    pub writable_mem: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ro_bytes_host: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ro_bytes_pcie: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bytes_host: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bytes_pcie: Option<f64>,
    #[serde(default)]
    pub container_time: f64,
    #[serde(default = "default_cpu_ctx")]
    pub cpu_ctx_time: f64,
    #[serde(default = "default_gpu_ctx")]
    pub gpu_ctx_time: f64,
    pub compute_time: f64,
    #[serde(default = "default_return")]
    pub return_time: f64,
}

fn default_context() -> f64 {
    414.0
}
fn default_cpu_ctx() -> f64 {
    1.0
}
fn default_gpu_ctx() -> f64 {
    285.1
}
fn default_return() -> f64 {
    0.1
}

/// Fraction of explicit memory moved as per-invocation input when the
/// record does not say.
pub const DEFAULT_INPUT_FRACTION: f64 = 0.05;

impl FunctionRecord {
    pub fn into_spec(self) -> Result<FunctionSpec, SpecError> {
        let name = self.name.clone();
        let check = |field: &'static str, v: f64| -> Result<f64, SpecError> {
            if !v.is_finite() || v < 0.0 {
                Err(SpecError::Negative {
                    function: name.clone(),
                    field,
                    value: v,
                })
            } else {
                Ok(v)
            }
        };
        let context = check("context_mem", self.context_mem)?;
        if context <= 0.0 {
            return Err(SpecError::NotPositive {
                function: name,
                field: "context_mem",
            });
        }
        let ro = check("ro_mem", self.ro_mem)?;
        let writable = check("writable_mem", self.writable_mem)?;
        let default_input = (ro + writable) * DEFAULT_INPUT_FRACTION;
        let ro_host = check("ro_bytes_host", self.ro_bytes_host.unwrap_or(ro))?;
        let ro_pcie = check("ro_bytes_pcie", self.ro_bytes_pcie.unwrap_or(ro))?;
        let in_host = check(
            "input_bytes_host",
            self.input_bytes_host.unwrap_or(default_input),
        )?;
        let in_pcie = check(
            "input_bytes_pcie",
            self.input_bytes_pcie.unwrap_or(default_input),
        )?;
        let ms = SimDuration::from_ms_f64;
        Ok(FunctionSpec {
            context_mem: Megabytes::from_mb(context),
            ro_mem: Megabytes::from_mb(ro),
            writable_mem: Megabytes::from_mb(writable),
            ro_bytes_host: Megabytes::from_mb(ro_host),
            ro_bytes_pcie: Megabytes::from_mb(ro_pcie),
            input_bytes_host: Megabytes::from_mb(in_host),
            input_bytes_pcie: Megabytes::from_mb(in_pcie),
            container_time: ms(check("container_time", self.container_time)?),
            cpu_ctx_time: ms(check("cpu_ctx_time", self.cpu_ctx_time)?),
            gpu_ctx_time: ms(check("gpu_ctx_time", self.gpu_ctx_time)?),
            compute_time: ms(check("compute_time", self.compute_time)?),
            return_time: ms(check("return_time", self.return_time)?),
            name: self.name,
        })
    }
}

/// Immutable name → spec map with a stable iteration order and dense indices.
#[derive(Debug, Clone, Default)]
pub struct SpecTable {
    specs: Vec<FunctionSpec>,
    index: BTreeMap<String, usize>,
}

impl SpecTable {
    pub fn new(specs: Vec<FunctionSpec>) -> Self {
        let mut table = SpecTable::default();
        for s in specs {
            table.insert(s);
        }
        table
    }

    /// Adds or replaces a spec by name.
    pub fn insert(&mut self, spec: FunctionSpec) {
        match self.index.get(&spec.name) {
            Some(&i) => self.specs[i] = spec,
            None => {
                self.index.insert(spec.name.clone(), self.specs.len());
                self.specs.push(spec);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&FunctionSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    pub fn require(&self, name: &str) -> Result<&FunctionSpec, SpecError> {
        self.get(name)
            .ok_or_else(|| SpecError::UnknownFunction(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> &FunctionSpec {
        &self.specs[i]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Specs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &FunctionSpec> {
        self.specs.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }
}

/// Built-in records for the ten benchmarks: memory columns of the published
/// memory characterization, resnet50 stage times from its published latency
/// breakdown. Non-resnet50 compute times are placeholders (override via a
/// spec file).
pub fn default_records() -> Vec<FunctionRecord> {
    let rec = |name: &str, ro: f64, writable: f64, compute: f64| FunctionRecord {
        name: name.to_string(),
        context_mem: 414.0,
        ro_mem: ro,
        writable_mem: writable,
        ro_bytes_host: None,
        ro_bytes_pcie: None,
        input_bytes_host: None,
        input_bytes_pcie: None,
        container_time: 0.0,
        cpu_ctx_time: 1.0,
        gpu_ctx_time: 285.1,
        compute_time: compute,
        return_time: 0.1,
    };
    let mut resnet = rec("resnet50", 97.7, 11.9, 24.3);
    // A cold load moves the full 109.6 MB explicit footprint on both paths:
    // 67.2 ms at 1631 MB/s and 21.7 ms at 5051 MB/s. A warm load moves only
    // the input: 3.6 ms host, 0.9 ms PCIe.
    resnet.input_bytes_host = Some(5.9);
    resnet.input_bytes_pcie = Some(4.5);
    resnet.ro_bytes_host = Some(103.7);
    resnet.ro_bytes_pcie = Some(105.1);
    vec![
        rec("bert", 1282.5, 60.1, 38.0),
        rec("deepspeech", 24.8, 6.9, 31.0),
        rec("inception3", 91.1, 11.7, 19.0),
        rec("nasnet", 20.3, 11.8, 45.0),
        resnet,
        rec("seq2seq", 6.1, 0.1, 12.0),
        rec("vgg11", 506.8, 38.0, 16.0),
        rec("lbm", 0.0, 330.0, 120.0),
        rec("mrif", 0.0, 22.0, 55.0),
        rec("tpacf", 0.1, 28.3, 80.0),
    ]
}

pub fn default_table() -> SpecTable {
    SpecTable::new(
        default_records()
            .into_iter()
            .map(|r| r.into_spec().expect("built-in records are valid"))
            .collect(),
    )
}

/// Parses a JSON array of [`FunctionRecord`]s.
pub fn parse_spec_table(json: &str) -> Result<SpecTable, SpecError> {
    let records: Vec<FunctionRecord> =
        serde_json::from_str(json).map_err(|e| SpecError::Parse(e.to_string()))?;
    let specs = records
        .into_iter()
        .map(FunctionRecord::into_spec)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SpecTable::new(specs))
}

pub fn load_spec_table(path: &Path) -> Result<SpecTable, SpecError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpecError::Parse(format!("{}: {e}", path.display())))?;
    parse_spec_table(&text)
}

/// How much retained state an invocation finds at admission.
/// Ordered by amount of state: `Cold` is least, `Stage1Hot` most.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WarmthClass {
    Cold,
    Stage4,
    Stage3,
    Stage2,
    Stage1Hot,
}

impl WarmthClass {
    pub const ALL: [WarmthClass; 5] = [
        WarmthClass::Cold,
        WarmthClass::Stage4,
        WarmthClass::Stage3,
        WarmthClass::Stage2,
        WarmthClass::Stage1Hot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            WarmthClass::Cold => "cold",
            WarmthClass::Stage4 => "stage4",
            WarmthClass::Stage3 => "stage3",
            WarmthClass::Stage2 => "stage2",
            WarmthClass::Stage1Hot => "stage1",
        }
    }
}

impl fmt::Display for WarmthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Serial,
    Parallel,
}

/// The eight recorded stage slots of an invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Container,
    CpuCtx,
    CpuLoad,
    GpuCtx,
    GpuLoad,
    AwaitShared,
    Compute,
    Return,
}

impl StageKind {
    pub const ALL: [StageKind; 8] = [
        StageKind::Container,
        StageKind::CpuCtx,
        StageKind::CpuLoad,
        StageKind::GpuCtx,
        StageKind::GpuLoad,
        StageKind::AwaitShared,
        StageKind::Compute,
        StageKind::Return,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            StageKind::Container => "container",
            StageKind::CpuCtx => "cpu_ctx",
            StageKind::CpuLoad => "cpu_load",
            StageKind::GpuCtx => "gpu_ctx",
            StageKind::GpuLoad => "gpu_load",
            StageKind::AwaitShared => "await_shared",
            StageKind::Compute => "compute",
            StageKind::Return => "return",
        }
    }
}

/// Transfer medium of a load stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelClass {
    Host,
    Pcie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Container(SimDuration),
    CpuCtx(SimDuration),
    CpuLoad(Megabytes),
    GpuCtx(SimDuration),
    GpuLoad(Megabytes),
    /// Waits for state another invocation is producing: the shared
    /// read-only block and/or the shared GPU context.
    AwaitShared {
        read_only: bool,
        context: bool,
    },
    Compute(SimDuration),
    Return(SimDuration),
}

impl Stage {
    pub fn kind(&self) -> StageKind {
        match self {
            Stage::Container(_) => StageKind::Container,
            Stage::CpuCtx(_) => StageKind::CpuCtx,
            Stage::CpuLoad(_) => StageKind::CpuLoad,
            Stage::GpuCtx(_) => StageKind::GpuCtx,
            Stage::GpuLoad(_) => StageKind::GpuLoad,
            Stage::AwaitShared { .. } => StageKind::AwaitShared,
            Stage::Compute(_) => StageKind::Compute,
            Stage::Return(_) => StageKind::Return,
        }
    }

    /// Fixed service time, for stages that have one.
    pub fn fixed_time(&self) -> Option<SimDuration> {
        match *self {
            Stage::Container(d)
            | Stage::CpuCtx(d)
            | Stage::GpuCtx(d)
            | Stage::Compute(d)
            | Stage::Return(d) => Some(d),
            _ => None,
        }
    }

    pub fn transfer(&self) -> Option<(ChannelClass, Megabytes)> {
        match *self {
            Stage::CpuLoad(b) => Some((ChannelClass::Host, b)),
            Stage::GpuLoad(b) => Some((ChannelClass::Pcie, b)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageNode {
    pub stage: Stage,
    pub preds: Vec<usize>,
}

/// Stage DAG in topological order (every predecessor index is smaller).
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub mode: PlanMode,
    pub nodes: Vec<StageNode>,
}

impl StagePlan {
    pub fn find(&self, kind: StageKind) -> Option<usize> {
        self.nodes.iter().position(|n| n.stage.kind() == kind)
    }

    pub fn has(&self, kind: StageKind) -> bool {
        self.find(kind).is_some()
    }

    pub fn bytes_on(&self, class: ChannelClass) -> Megabytes {
        self.nodes
            .iter()
            .filter_map(|n| n.stage.transfer())
            .filter(|(c, _)| *c == class)
            .map(|(_, b)| b)
            .sum()
    }

    /// Indices of nodes that list `i` as a predecessor.
    pub fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.preds.contains(&i))
            .map(|(j, _)| j)
    }

    /// Checks acyclicity (topological indexing) and the compute readiness
    /// rule: compute waits for context availability and every GPU load.
    pub fn validate(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.preds.iter().any(|&p| p >= i) {
                return Err(format!("node {i} has a non-topological predecessor"));
            }
        }
        let compute = self.find(StageKind::Compute).ok_or("plan has no compute")?;
        let ancestors = self.ancestors(compute);
        for (i, n) in self.nodes.iter().enumerate() {
            let needed = matches!(n.stage, Stage::GpuCtx(_) | Stage::GpuLoad(_))
                || matches!(n.stage, Stage::AwaitShared { .. });
            if needed && !ancestors[i] {
                return Err(format!("compute does not wait for node {i}"));
            }
        }
        let ret = self.find(StageKind::Return).ok_or("plan has no return")?;
        if !self.ancestors(ret)[compute] {
            return Err("return does not follow compute".into());
        }
        Ok(())
    }

    fn ancestors(&self, node: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = self.nodes[node].preds.clone();
        while let Some(p) = stack.pop() {
            if !seen[p] {
                seen[p] = true;
                stack.extend(self.nodes[p].preds.iter().copied());
            }
        }
        seen
    }

    /// Solo end-to-end latency: the longest path with uncontended stage times.
    /// Shared waits count as zero.
    pub fn solo_latency(&self, host_bw_mbps: f64, pcie_bw_mbps: f64) -> SimDuration {
        let mut finish = vec![SimDuration::ZERO; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            let start = n
                .preds
                .iter()
                .map(|&p| finish[p])
                .max()
                .unwrap_or(SimDuration::ZERO);
            let own = match n.stage.transfer() {
                Some((class, bytes)) => {
                    let bw = match class {
                        ChannelClass::Host => host_bw_mbps,
                        ChannelClass::Pcie => pcie_bw_mbps,
                    };
                    solo_transfer_time(bytes, bw)
                }
                None => n.stage.fixed_time().unwrap_or(SimDuration::ZERO),
            };
            finish[i] = start + own;
        }
        finish.into_iter().max().unwrap_or(SimDuration::ZERO)
    }
}

/// Uncontended transfer time, rounded up to the microsecond like the channel.
pub fn solo_transfer_time(bytes: Megabytes, bandwidth_mbps: f64) -> SimDuration {
    if bytes.is_zero() {
        return SimDuration::ZERO;
    }
    let rate = (bandwidth_mbps * 1e6).round() as u128;
    let pico = bytes.as_micro() as u128 * 1_000_000;
    SimDuration::from_us(pico.div_ceil(rate) as u64)
}

/// Which stages an invocation needs; the general form behind
/// [`plan_invocation`], used by policies that deviate from the warmth rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanRequest {
    pub mode: PlanMode,
    pub container: bool,
    pub cpu_ctx: bool,
    pub gpu_ctx: bool,
    pub host_bytes: Megabytes,
    pub pcie_bytes: Megabytes,
    pub await_read_only: bool,
    pub await_context: bool,
}

impl PlanRequest {
    /// Stage requirements implied by `warmth` alone (no sharing waits).
    pub fn for_warmth(spec: &FunctionSpec, warmth: WarmthClass, mode: PlanMode) -> Self {
        let full_host = spec.ro_bytes_host + spec.input_bytes_host;
        let full_pcie = spec.ro_bytes_pcie + spec.input_bytes_pcie;
        let (container, cpu_ctx, gpu_ctx, host_bytes, pcie_bytes) = match warmth {
            WarmthClass::Cold => (true, true, true, full_host, full_pcie),
            WarmthClass::Stage4 => (false, false, true, full_host, full_pcie),
            WarmthClass::Stage3 => (false, false, true, spec.input_bytes_host, full_pcie),
            WarmthClass::Stage2 => (false, false, false, spec.input_bytes_host, full_pcie),
            WarmthClass::Stage1Hot => (
                false,
                false,
                false,
                spec.input_bytes_host,
                spec.input_bytes_pcie,
            ),
        };
        PlanRequest {
            mode,
            container,
            cpu_ctx,
            gpu_ctx,
            host_bytes,
            pcie_bytes,
            await_read_only: false,
            await_context: false,
        }
    }
}

pub fn plan_invocation(spec: &FunctionSpec, warmth: WarmthClass, mode: PlanMode) -> StagePlan {
    build_plan(spec, &PlanRequest::for_warmth(spec, warmth, mode))
}

pub fn build_plan(spec: &FunctionSpec, req: &PlanRequest) -> StagePlan {
    let mut nodes: Vec<StageNode> = Vec::with_capacity(8);
    let mut push = |stage: Stage, preds: Vec<usize>| -> usize {
        nodes.push(StageNode { stage, preds });
        nodes.len() - 1
    };
    let chain = |last: Option<usize>| last.into_iter().collect::<Vec<_>>();

    let mut last = None;
    if req.container {
        last = Some(push(Stage::Container(spec.container_time), chain(last)));
    }
    if req.cpu_ctx {
        last = Some(push(Stage::CpuCtx(spec.cpu_ctx_time), chain(last)));
    }
    let awaits = req.await_read_only || req.await_context;
    let shared = Stage::AwaitShared {
        read_only: req.await_read_only,
        context: req.await_context,
    };

    let mut compute_preds = Vec::new();
    match req.mode {
        PlanMode::Serial => {
            let mut tail = push(Stage::CpuLoad(req.host_bytes), chain(last));
            if req.gpu_ctx {
                tail = push(Stage::GpuCtx(spec.gpu_ctx_time), vec![tail]);
            }
            tail = push(Stage::GpuLoad(req.pcie_bytes), vec![tail]);
            if awaits {
                tail = push(shared, vec![tail]);
            }
            compute_preds.push(tail);
        }
        PlanMode::Parallel => {
            let prefix = last;
            if req.gpu_ctx {
                compute_preds.push(push(Stage::GpuCtx(spec.gpu_ctx_time), chain(prefix)));
            }
            let cpu = push(Stage::CpuLoad(req.host_bytes), chain(prefix));
            compute_preds.push(push(Stage::GpuLoad(req.pcie_bytes), vec![cpu]));
            if awaits {
                compute_preds.push(push(shared, chain(prefix)));
            }
        }
    }
    let compute = push(Stage::Compute(spec.compute_time), compute_preds);
    push(Stage::Return(spec.return_time), vec![compute]);
    StagePlan {
        mode: req.mode,
        nodes,
    }
}
