//! Per-invocation records and run-level statistics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::engine::{SimDuration, SimTime};
use crate::error::MetricsError;
use crate::functions::{SpecTable, StageKind, WarmthClass};
use crate::resources::{Megabytes, MemoryBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Completed,
    Failed,
    /// Still queued or running when the run ended.
    Pending,
}

/// Lifecycle of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRecord {
    pub id: u64,
    pub function: String,
    pub gpu: Option<usize>,
    pub arrival: SimTime,
    pub start: Option<SimTime>,
    pub completion: Option<SimTime>,
    /// `(begin, end)` per [`StageKind`], indexed by `StageKind::index`.
    pub stages: [Option<(SimTime, SimTime)>; 8],
    pub warmth: Option<WarmthClass>,
    pub host_bytes: Megabytes,
    pub pcie_bytes: Megabytes,
    pub outcome: Outcome,
}

impl InvocationRecord {
    pub fn new(id: u64, function: impl Into<String>, arrival: SimTime) -> Self {
        Self {
            id,
            function: function.into(),
            gpu: None,
            arrival,
            start: None,
            completion: None,
            stages: [None; 8],
            warmth: None,
            host_bytes: Megabytes::ZERO,
            pcie_bytes: Megabytes::ZERO,
            outcome: Outcome::Pending,
        }
    }

    pub fn queued(&self) -> SimDuration {
        match self.start {
            Some(s) => s.since(self.arrival),
            None => SimDuration::ZERO,
        }
    }

    pub fn latency(&self) -> Option<SimDuration> {
        match (self.outcome, self.completion) {
            (Outcome::Completed, Some(c)) => Some(c.since(self.arrival)),
            _ => None,
        }
    }

    pub fn stage(&self, kind: StageKind) -> Option<(SimTime, SimTime)> {
        self.stages[kind.index()]
    }
}

/// Theoretical throughput: how many computations of `compute_ms` fit in
/// `period_ms`.
pub fn theoretical_throughput(period_ms: f64, compute_ms: f64) -> Result<f64, MetricsError> {
    if !(compute_ms > 0.0) {
        return Err(MetricsError::NonPositiveCompute);
    }
    Ok(period_ms / compute_ms)
}

/// Measured over theoretical throughput.
pub fn normalized_performance(measured: f64, theoretical: f64) -> f64 {
    if theoretical <= 0.0 {
        0.0
    } else {
        measured / theoretical
    }
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest sample.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::BadRank(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_ms(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let sum: f64 = sorted.iter().sum();
        Some(Self {
            count: sorted.len() as u64,
            mean_ms: sum / sorted.len() as f64,
            p50_ms: percentile_sorted(&sorted, 50.0),
            p99_ms: percentile_sorted(&sorted, 99.0),
            max_ms: *sorted.last().unwrap(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionSummary {
    pub arrivals: u64,
    pub completed: u64,
    pub failed: u64,
    pub latency: Option<LatencyStats>,
    pub completed_in_period: u64,
    pub throughput_per_s: f64,
    pub theoretical_throughput_per_s: f64,
    pub normalized_performance: f64,
    /// Admissions by warmth class label.
    pub warmth: BTreeMap<String, u64>,
}

/// Piecewise-constant integration of GPU memory usage over a window.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    last_time: SimTime,
    current: MemoryBreakdown,
    window_end: Option<SimTime>,
    // micro-MB × µs per class: context, read-only, writable, instance, rounding
    integral: [u128; 5],
    integrated_span: u64,
    peak: Megabytes,
}

fn parts(b: &MemoryBreakdown) -> [u64; 5] {
    [
        b.context.as_micro(),
        b.read_only.as_micro(),
        b.writable.as_micro(),
        b.instance.as_micro(),
        b.rounding.as_micro(),
    ]
}

impl MemoryTracker {
    pub fn new(window_end: Option<SimTime>) -> Self {
        Self {
            window_end,
            ..Default::default()
        }
    }

    /// Records that usage is `now_usage` from `now` on.
    pub fn observe(&mut self, now: SimTime, now_usage: MemoryBreakdown) {
        self.accumulate(now);
        self.current = now_usage;
        if self.window_end.is_none_or(|e| now <= e) {
            self.peak = self.peak.max(now_usage.total());
        }
    }

    fn accumulate(&mut self, now: SimTime) {
        let clamp = |t: SimTime| match self.window_end {
            Some(e) => t.min(e),
            None => t,
        };
        let dt = clamp(now).since(clamp(self.last_time)).as_us();
        if dt > 0 {
            for (acc, v) in self.integral.iter_mut().zip(parts(&self.current)) {
                *acc += v as u128 * dt as u128;
            }
            self.integrated_span += dt;
        }
        self.last_time = self.last_time.max(now);
    }

    /// Closes the integral at `end` and returns the time-averaged breakdown.
    pub fn finish(&mut self, end: SimTime) -> MemoryAverage {
        self.accumulate(end);
        let span = self.integrated_span.max(1) as u128;
        let avg = |i: usize| Megabytes::from_micro((self.integral[i] / span) as u64).as_mb();
        let total: u128 = self.integral.iter().sum();
        let logical: u128 = self.integral[..4].iter().sum();
        MemoryAverage {
            context_mb: avg(0),
            read_only_mb: avg(1),
            writable_mb: avg(2),
            instance_mb: avg(3),
            rounding_mb: avg(4),
            logical_mb: Megabytes::from_micro((logical / span) as u64).as_mb(),
            total_mb: Megabytes::from_micro((total / span) as u64).as_mb(),
            peak_mb: self.peak.as_mb(),
            span_s: self.integrated_span as f64 / 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryAverage {
    pub context_mb: f64,
    pub read_only_mb: f64,
    pub writable_mb: f64,
    pub instance_mb: f64,
    pub rounding_mb: f64,
    pub logical_mb: f64,
    pub total_mb: f64,
    pub peak_mb: f64,
    pub span_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    pub name: String,
    pub bandwidth_mbps: f64,
    pub busy_fraction: f64,
    pub delivered_mb: f64,
    pub completed_transfer_mb: f64,
    pub transfers: u64,
}

/// One memory-timeline row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemorySample {
    pub time: SimTime,
    pub gpu: usize,
    pub usage: MemoryBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub policy: String,
    pub seed: u64,
    pub period_s: f64,
    pub gpus: usize,
    pub arrivals: u64,
    pub completed: u64,
    pub failed: u64,
    pub pending: u64,
    pub completed_in_period: u64,
    pub throughput_per_s: f64,
    /// Theoretical throughput of the completed mix: GPU count × period over
    /// mean compute time.
    pub theoretical_throughput_per_s: f64,
    pub normalized_performance: f64,
    pub latency: Option<LatencyStats>,
    pub per_function: BTreeMap<String, FunctionSummary>,
    pub memory: Vec<MemoryAverage>,
    pub mean_gpu_memory_mb: f64,
    pub channels: Vec<ChannelSummary>,
    pub host_bytes_mb: f64,
    pub pcie_bytes_mb: f64,
}

/// Inputs to [`summarize`] besides the records.
pub struct SummaryContext<'a> {
    pub policy: &'a str,
    pub seed: u64,
    pub period: SimDuration,
    pub gpus: usize,
    pub specs: &'a SpecTable,
    pub memory: Vec<MemoryAverage>,
    pub channels: Vec<ChannelSummary>,
}

pub fn summarize(records: &[InvocationRecord], ctx: SummaryContext<'_>) -> RunSummary {
    let period_s = ctx.period.as_secs_f64();
    let period_end = SimTime::ZERO + ctx.period;
    let mut per_fn: BTreeMap<String, (FunctionSummary, Vec<f64>)> = BTreeMap::new();
    let mut all = Vec::new();
    let (mut completed, mut failed, mut pending, mut in_period) = (0u64, 0u64, 0u64, 0u64);
    let mut compute_us_in_period: u128 = 0;
    let (mut host, mut pcie) = (Megabytes::ZERO, Megabytes::ZERO);

    for r in records {
        let entry = per_fn.entry(r.function.clone()).or_insert_with(|| {
            (
                FunctionSummary {
                    arrivals: 0,
                    completed: 0,
                    failed: 0,
                    latency: None,
                    completed_in_period: 0,
                    throughput_per_s: 0.0,
                    theoretical_throughput_per_s: 0.0,
                    normalized_performance: 0.0,
                    warmth: BTreeMap::new(),
                },
                Vec::new(),
            )
        });
        entry.0.arrivals += 1;
        if let Some(w) = r.warmth {
            *entry.0.warmth.entry(w.label().to_string()).or_insert(0) += 1;
        }
        host += r.host_bytes;
        pcie += r.pcie_bytes;
        match r.outcome {
            Outcome::Completed => {
                completed += 1;
                entry.0.completed += 1;
                let ms = r.latency().map(|d| d.as_ms_f64()).unwrap_or(0.0);
                entry.1.push(ms);
                all.push(ms);
                if r.completion.is_some_and(|c| c <= period_end) {
                    in_period += 1;
                    entry.0.completed_in_period += 1;
                    if let Some(spec) = ctx.specs.get(&r.function) {
                        compute_us_in_period += spec.compute_time.as_us() as u128;
                    }
                }
            }
            Outcome::Failed => {
                failed += 1;
                entry.0.failed += 1;
            }
            Outcome::Pending => pending += 1,
        }
    }

    let per_function = per_fn
        .into_iter()
        .map(|(name, (mut s, lat))| {
            s.latency = LatencyStats::from_ms(&lat);
            if period_s > 0.0 {
                s.throughput_per_s = s.completed_in_period as f64 / period_s;
            }
            if let Some(spec) = ctx.specs.get(&name) {
                let comp_ms = spec.compute_time.as_ms_f64();
                if let Ok(theo) = theoretical_throughput(period_s * 1e3, comp_ms) {
                    let theo = theo * ctx.gpus as f64;
                    s.theoretical_throughput_per_s =
                        if period_s > 0.0 { theo / period_s } else { 0.0 };
                    s.normalized_performance =
                        normalized_performance(s.completed_in_period as f64, theo);
                }
            }
            (name, s)
        })
        .collect();

    let throughput = if period_s > 0.0 {
        in_period as f64 / period_s
    } else {
        0.0
    };
    let (theoretical, normalized) = if in_period > 0 && period_s > 0.0 {
        let mean_comp_ms = compute_us_in_period as f64 / in_period as f64 / 1e3;
        match theoretical_throughput(period_s * 1e3, mean_comp_ms) {
            Ok(theo) => {
                let theo_total = theo * ctx.gpus as f64;
                (
                    theo_total / period_s,
                    normalized_performance(in_period as f64, theo_total),
                )
            }
            Err(_) => (0.0, 0.0),
        }
    } else {
        (0.0, 0.0)
    };

    let mean_gpu_memory_mb = if ctx.memory.is_empty() {
        0.0
    } else {
        ctx.memory.iter().map(|m| m.total_mb).sum::<f64>() / ctx.memory.len() as f64
    };

    RunSummary {
        policy: ctx.policy.to_string(),
        seed: ctx.seed,
        period_s,
        gpus: ctx.gpus,
        arrivals: records.len() as u64,
        completed,
        failed,
        pending,
        completed_in_period: in_period,
        throughput_per_s: throughput,
        theoretical_throughput_per_s: theoretical,
        normalized_performance: normalized,
        latency: LatencyStats::from_ms(&all),
        per_function,
        memory: ctx.memory,
        mean_gpu_memory_mb,
        channels: ctx.channels,
        host_bytes_mb: host.as_mb(),
        pcie_bytes_mb: pcie.as_mb(),
    }
}

/// Column order of the per-invocation CSV.
pub const RECORD_COLUMNS: &[&str] = &[
    "id",
    "function",
    "gpu",
    "outcome",
    "warmth",
    "arrival_ms",
    "start_ms",
    "completion_ms",
    "latency_ms",
    "queued_ms",
    "host_mb",
    "pcie_mb",
    "container_begin_ms",
    "container_end_ms",
    "cpu_ctx_begin_ms",
    "cpu_ctx_end_ms",
    "cpu_load_begin_ms",
    "cpu_load_end_ms",
    "gpu_ctx_begin_ms",
    "gpu_ctx_end_ms",
    "gpu_load_begin_ms",
    "gpu_load_end_ms",
    "await_shared_begin_ms",
    "await_shared_end_ms",
    "compute_begin_ms",
    "compute_end_ms",
    "return_begin_ms",
    "return_end_ms",
];

fn ms(t: Option<SimTime>) -> String {
    t.map(|t| format!("{:.3}", t.as_ms_f64()))
        .unwrap_or_default()
}

pub fn write_records_csv<W: Write>(
    mut out: W,
    records: &[InvocationRecord],
) -> std::io::Result<()> {
    writeln!(out, "{}", RECORD_COLUMNS.join(","))?;
    for r in records {
        let outcome = match r.outcome {
            Outcome::Completed => "completed",
            Outcome::Failed => "failed",
            Outcome::Pending => "pending",
        };
        let mut row = vec![
            r.id.to_string(),
            r.function.clone(),
            r.gpu.map(|g| g.to_string()).unwrap_or_default(),
            outcome.to_string(),
            r.warmth.map(|w| w.label().to_string()).unwrap_or_default(),
            ms(Some(r.arrival)),
            ms(r.start),
            ms(r.completion),
            r.latency()
                .map(|d| format!("{:.3}", d.as_ms_f64()))
                .unwrap_or_default(),
            format!("{:.3}", r.queued().as_ms_f64()),
            format!("{:.6}", r.host_bytes.as_mb()),
            format!("{:.6}", r.pcie_bytes.as_mb()),
        ];
        for s in r.stages.iter() {
            row.push(ms(s.map(|x| x.0)));
            row.push(ms(s.map(|x| x.1)));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_memory_csv<W: Write>(mut out: W, samples: &[MemorySample]) -> std::io::Result<()> {
    writeln!(
        out,
        "time_ms,gpu,context_mb,read_only_mb,writable_mb,instance_mb,rounding_mb,total_mb"
    )?;
    for s in samples {
        let u = &s.usage;
        writeln!(
            out,
            "{:.3},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.time.as_ms_f64(),
            s.gpu,
            u.context.as_mb(),
            u.read_only.as_mb(),
            u.writable.as_mb(),
            u.instance.as_mb(),
            u.rounding.as_mb(),
            u.total().as_mb()
        )?;
    }
    Ok(())
}

/// One policy's row in a comparison, with ratios against the baseline row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub mean_latency_ms: Option<f64>,
    pub p99_latency_ms: Option<f64>,
    pub throughput_per_s: f64,
    pub mean_gpu_memory_mb: f64,
    pub mean_latency_ratio: Option<f64>,
    pub p99_latency_ratio: Option<f64>,
    pub throughput_ratio: Option<f64>,
    pub memory_ratio: Option<f64>,
    pub per_function_mean_ratio: BTreeMap<String, Option<f64>>,
    pub per_function_p99_ratio: BTreeMap<String, Option<f64>>,
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// Ratios of each summary against the first.
pub fn compare(summaries: &[RunSummary]) -> Vec<ComparisonRow> {
    let Some(base) = summaries.first() else {
        return Vec::new();
    };
    summaries
        .iter()
        .map(|s| {
            let mean = s.latency.map(|l| l.mean_ms);
            let p99 = s.latency.map(|l| l.p99_ms);
            let fn_ratio = |pick: fn(&LatencyStats) -> f64| {
                s.per_function
                    .iter()
                    .map(|(name, f)| {
                        let other = base
                            .per_function
                            .get(name)
                            .and_then(|b| b.latency.map(|l| pick(&l)));
                        (name.clone(), ratio(f.latency.map(|l| pick(&l)), other))
                    })
                    .collect::<BTreeMap<_, _>>()
            };
            ComparisonRow {
                policy: s.policy.clone(),
                mean_latency_ms: mean,
                p99_latency_ms: p99,
                throughput_per_s: s.throughput_per_s,
                mean_gpu_memory_mb: s.mean_gpu_memory_mb,
                mean_latency_ratio: ratio(mean, base.latency.map(|l| l.mean_ms)),
                p99_latency_ratio: ratio(p99, base.latency.map(|l| l.p99_ms)),
                throughput_ratio: ratio(Some(s.throughput_per_s), Some(base.throughput_per_s)),
                memory_ratio: ratio(Some(s.mean_gpu_memory_mb), Some(base.mean_gpu_memory_mb)),
                per_function_mean_ratio: fn_ratio(|l| l.mean_ms),
                per_function_p99_ratio: fn_ratio(|l| l.p99_ms),
            }
        })
        .collect()
}
