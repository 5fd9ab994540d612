//! Invocation sources and the peak-throughput search.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{streams, RngStream, SimDuration, SimTime};
use crate::error::WorkloadError;
use crate::functions::SpecTable;

/// One invocation request of a named function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ArrivalRecord {
    pub at: SimTime,
    pub function: String,
}

impl ArrivalRecord {
    pub fn new(at: SimTime, function: impl Into<String>) -> Self {
        Self {
            at,
            function: function.into(),
        }
    }
}

/// Inline arrival as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineArrival {
    pub timestamp_ms: f64,
    pub function: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Open-loop Poisson arrivals.
    Poisson { rate: f64, duration_s: f64 },
    /// `concurrency` independent chains, each issuing its next request when
    /// the previous one finishes; `count` requests in total.
    ClosedLoop { concurrency: u32, count: u64 },
    /// Replay of a `timestamp_ms,function` CSV, timestamps multiplied by `time_scale`.
    Trace {
        path: PathBuf,
        #[serde(default = "one")]
        time_scale: f64,
    },
    /// Explicit arrival list.
    Arrivals { arrivals: Vec<InlineArrival> },
}

fn one() -> f64 {
    1.0
}

/// A generator plus the function mix it samples from. An empty mix means
/// uniform over every function in the function table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub generator: GeneratorKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mix: BTreeMap<String, f64>,
}

impl GeneratorSpec {
    pub fn poisson(rate: f64, duration_s: f64) -> Self {
        Self {
            generator: GeneratorKind::Poisson { rate, duration_s },
            mix: BTreeMap::new(),
        }
    }

    pub fn with_mix<I, S>(mut self, mix: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.mix = mix.into_iter().map(|(k, v)| (k.into(), v)).collect();
        self
    }

    /// Function names and normalized weights in a stable order.
    pub fn resolved_mix(&self, table: &SpecTable) -> Result<Vec<(String, f64)>, WorkloadError> {
        let raw: Vec<(String, f64)> = if self.mix.is_empty() {
            table.names().map(|n| (n.to_string(), 1.0)).collect()
        } else {
            self.mix.iter().map(|(k, v)| (k.clone(), *v)).collect()
        };
        if raw.is_empty() {
            return Err(WorkloadError::Invalid("function mix is empty".into()));
        }
        for (name, w) in &raw {
            if !(w.is_finite() && *w > 0.0) {
                return Err(WorkloadError::Invalid(format!(
                    "mix weight for `{name}` must be positive"
                )));
            }
            if table.get(name).is_none() {
                return Err(WorkloadError::Invalid(format!(
                    "unknown function `{name}` in mix"
                )));
            }
        }
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        Ok(raw.into_iter().map(|(n, w)| (n, w / total)).collect())
    }

    pub fn validate(&self, table: &SpecTable) -> Result<(), WorkloadError> {
        match &self.generator {
            GeneratorKind::Poisson { rate, duration_s } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(WorkloadError::Invalid("rate must be positive".into()));
                }
                if !(duration_s.is_finite() && *duration_s > 0.0) {
                    return Err(WorkloadError::Invalid("duration must be positive".into()));
                }
            }
            GeneratorKind::ClosedLoop { concurrency, .. } => {
                if *concurrency == 0 {
                    return Err(WorkloadError::Invalid(
                        "concurrency must be positive".into(),
                    ));
                }
            }
            GeneratorKind::Trace { time_scale, .. } => {
                if !(time_scale.is_finite() && *time_scale > 0.0) {
                    return Err(WorkloadError::Invalid("time_scale must be positive".into()));
                }
            }
            GeneratorKind::Arrivals { arrivals } => {
                for a in arrivals {
                    if table.get(&a.function).is_none() {
                        return Err(WorkloadError::Invalid(format!(
                            "unknown function `{}`",
                            a.function
                        )));
                    }
                    if !(a.timestamp_ms >= 0.0) {
                        return Err(WorkloadError::Invalid("negative arrival timestamp".into()));
                    }
                }
            }
        }
        self.resolved_mix(table).map(|_| ())
    }
}

/// Materializes an open-loop arrival stream. Closed-loop generators produce
/// arrivals during the run and return an empty list here.
pub fn generate(
    spec: &GeneratorSpec,
    table: &SpecTable,
    seed: u64,
) -> Result<Vec<ArrivalRecord>, WorkloadError> {
    spec.validate(table)?;
    match &spec.generator {
        GeneratorKind::Poisson { rate, duration_s } => {
            let mix = spec.resolved_mix(table)?;
            let weights: Vec<f64> = mix.iter().map(|(_, w)| *w).collect();
            let mut rng = RngStream::new(seed, streams::WORKLOAD);
            Ok(poisson_arrivals(
                &mut rng,
                *rate,
                *duration_s,
                &mix,
                &weights,
            ))
        }
        GeneratorKind::ClosedLoop { .. } => Ok(Vec::new()),
        GeneratorKind::Trace { path, time_scale } => {
            let mut v = parse_trace(path, Some(table))?;
            for a in v.iter_mut() {
                a.at = SimTime::from_us((a.at.as_us() as f64 * time_scale).round() as u64);
            }
            Ok(v)
        }
        GeneratorKind::Arrivals { arrivals } => {
            let mut v: Vec<ArrivalRecord> = arrivals
                .iter()
                .map(|a| {
                    ArrivalRecord::new(
                        SimTime::ZERO + SimDuration::from_ms_f64(a.timestamp_ms),
                        a.function.clone(),
                    )
                })
                .collect();
            v.sort_by_key(|a| a.at);
            Ok(v)
        }
    }
}

fn poisson_arrivals(
    rng: &mut RngStream,
    rate: f64,
    duration_s: f64,
    mix: &[(String, f64)],
    weights: &[f64],
) -> Vec<ArrivalRecord> {
    let mut out = Vec::with_capacity((rate * duration_s * 1.05) as usize + 16);
    let end = duration_s * 1e6;
    let mut t = 0.0f64;
    loop {
        t += rng.exponential(rate) * 1e6;
        if t >= end {
            break;
        }
        let f = rng.weighted_index(weights);
        out.push(ArrivalRecord::new(
            SimTime::from_us(t.round() as u64),
            mix[f].0.clone(),
        ));
    }
    out
}

/// Reads a `timestamp_ms,function` CSV and sorts it by timestamp (stable).
/// With `known`, rows naming functions outside the table are rejected.
pub fn parse_trace(
    path: &Path,
    known: Option<&SpecTable>,
) -> Result<Vec<ArrivalRecord>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    read_trace(file, known)
}

pub fn read_trace<R: Read>(
    reader: R,
    known: Option<&SpecTable>,
) -> Result<Vec<ArrivalRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut saw_header = false;
    for row in rdr.records() {
        let row = row.map_err(|e| WorkloadError::Trace {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if !saw_header {
            let fields: Vec<&str> = row.iter().map(str::trim).collect();
            if fields != ["timestamp_ms", "function"] {
                return Err(WorkloadError::Trace {
                    line,
                    message: "expected header `timestamp_ms,function`".into(),
                });
            }
            saw_header = true;
            continue;
        }
        if row.len() != 2 {
            return Err(WorkloadError::Trace {
                line,
                message: format!("expected 2 columns, found {}", row.len()),
            });
        }
        let ts: f64 = row[0].trim().parse().map_err(|_| WorkloadError::Trace {
            line,
            message: format!("bad timestamp `{}`", &row[0]),
        })?;
        if !ts.is_finite() || ts < 0.0 {
            return Err(WorkloadError::Trace {
                line,
                message: format!("negative timestamp {ts}"),
            });
        }
        let function = row[1].trim().to_string();
        if let Some(table) = known {
            if table.get(&function).is_none() {
                return Err(WorkloadError::Trace {
                    line,
                    message: format!("unknown function `{function}`"),
                });
            }
        }
        out.push(ArrivalRecord::new(
            SimTime::ZERO + SimDuration::from_ms_f64(ts),
            function,
        ));
    }
    out.sort_by_key(|a| a.at);
    Ok(out)
}

/// Invocations per function.
pub fn trace_totals(arrivals: &[ArrivalRecord]) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for a in arrivals {
        *m.entry(a.function.clone()).or_insert(0) += 1;
    }
    m
}

pub fn write_trace<W: Write>(out: W, arrivals: &[ArrivalRecord]) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| WorkloadError::Invalid(e.to_string());
    w.write_record(["timestamp_ms", "function"]).map_err(err)?;
    for a in arrivals {
        w.write_record([format_ms(a.at), a.function.clone()])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn format_ms(t: SimTime) -> String {
    let us = t.as_us();
    if us.is_multiple_of(1000) {
        format!("{}", us / 1000)
    } else {
        format!("{}.{:03}", us / 1000, us % 1000)
    }
}

const MINUTES_PER_DAY: usize = 1440;

/// Flattens a per-minute count table (one row per function, an id column and
/// minute columns `1..=1440`) into `timestamp_ms,function` rows. A count `c`
/// in minute `m` becomes `c` arrivals spaced `60000/c` ms apart from the
/// start of that minute. `id_column` defaults to `HashFunction` when present,
/// otherwise the first column.
pub fn flatten_minute_counts<R: Read>(
    reader: R,
    id_column: Option<&str>,
) -> Result<Vec<ArrivalRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        None => return Ok(Vec::new()),
        Some(h) => h.map_err(|e| WorkloadError::Trace {
            line: 1,
            message: e.to_string(),
        })?,
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let id_idx = match id_column {
        Some(c) => names
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| WorkloadError::Trace {
                line: 1,
                message: format!("no id column `{c}`"),
            })?,
        None => names.iter().position(|n| n == "HashFunction").unwrap_or(0),
    };
    let minute_cols: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.parse::<usize>().ok().map(|m| (i, m)))
        .filter(|(_, m)| (1..=MINUTES_PER_DAY).contains(m))
        .collect();
    if minute_cols.is_empty() {
        return Err(WorkloadError::Trace {
            line: 1,
            message: "no minute columns (expected headers 1..1440)".into(),
        });
    }

    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| WorkloadError::Trace {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != names.len() {
            return Err(WorkloadError::Trace {
                line,
                message: format!("expected {} columns, found {}", names.len(), row.len()),
            });
        }
        let function = row[id_idx].trim().to_string();
        for &(col, minute) in &minute_cols {
            let raw = row[col].trim();
            let count: u64 = if raw.is_empty() {
                0
            } else {
                raw.parse().map_err(|_| WorkloadError::Trace {
                    line,
                    message: format!("bad count `{raw}` in minute {minute}"),
                })?
            };
            let base_us = (minute as u64 - 1) * 60_000_000;
            for i in 0..count {
                let offset = i * 60_000_000 / count;
                out.push(ArrivalRecord::new(
                    SimTime::from_us(base_us + offset),
                    function.clone(),
                ));
            }
        }
    }
    out.sort_by_key(|a| a.at);
    Ok(out)
}

/// Observations from one probe run at a fixed rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub in_system_early: u64,
    pub in_system_end: u64,
    pub p99_first_quartile_ms: Option<f64>,
    pub p99_last_quartile_ms: Option<f64>,
    pub completed: u64,
}

/// Thresholds of the stability test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityCriteria {
    /// Allowed growth of the in-system count between the 10% mark and the end.
    #[serde(default = "default_queue_slack")]
    pub queue_slack: u64,
    /// Maximum ratio of last-quartile to first-quartile p99 latency.
    #[serde(default = "default_tail_ratio")]
    pub tail_ratio: f64,
}

fn default_queue_slack() -> u64 {
    10
}
fn default_tail_ratio() -> f64 {
    2.0
}

impl Default for StabilityCriteria {
    fn default() -> Self {
        Self {
            queue_slack: default_queue_slack(),
            tail_ratio: default_tail_ratio(),
        }
    }
}

impl StabilityCriteria {
    pub fn is_stable(&self, r: &StabilityReport) -> bool {
        if r.in_system_end > r.in_system_early + self.queue_slack {
            return false;
        }
        match (r.p99_first_quartile_ms, r.p99_last_quartile_ms) {
            (Some(first), Some(last)) => last <= self.tail_ratio * first,
            // Nothing finished in the last quartile while work was submitted.
            (Some(_), None) => false,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakSearch {
    pub min_rate: f64,
    pub max_rate: f64,
    /// Relative resolution of the final bracket.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub criteria: StabilityCriteria,
}

fn default_resolution() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePoint {
    pub rate: f64,
    pub stable: bool,
    pub report: StabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakResult {
    /// Largest rate found stable; 0 when even the minimum probe is unstable.
    pub rate: f64,
    /// The ceiling itself was stable; the true peak may be higher.
    pub hit_ceiling: bool,
    pub trajectory: Vec<ProbePoint>,
    pub diagnostic: Option<String>,
}

/// Binary search for the largest stable arrival rate. `probe` runs one
/// experiment at the given rate.
pub fn find_peak_throughput<E>(
    search: &PeakSearch,
    mut probe: impl FnMut(f64) -> Result<StabilityReport, E>,
) -> Result<PeakResult, E> {
    let mut trajectory = Vec::new();
    let mut run = |rate: f64, trajectory: &mut Vec<ProbePoint>| -> Result<bool, E> {
        if rate <= 0.0 {
            return Ok(true);
        }
        let report = probe(rate)?;
        let stable = search.criteria.is_stable(&report);
        trajectory.push(ProbePoint {
            rate,
            stable,
            report,
        });
        Ok(stable)
    };

    if !run(search.min_rate, &mut trajectory)? {
        return Ok(PeakResult {
            rate: 0.0,
            hit_ceiling: false,
            trajectory,
            diagnostic: Some(format!(
                "unstable at minimum probe rate {}",
                search.min_rate
            )),
        });
    }
    if run(search.max_rate, &mut trajectory)? {
        return Ok(PeakResult {
            rate: search.max_rate,
            hit_ceiling: true,
            trajectory,
            diagnostic: Some("stable at the rate ceiling".into()),
        });
    }
    let (mut lo, mut hi) = (search.min_rate.max(0.0), search.max_rate);
    while hi - lo > search.resolution * hi {
        let mid = 0.5 * (lo + hi);
        if run(mid, &mut trajectory)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(PeakResult {
        rate: lo,
        hit_ceiling: false,
        trajectory,
        diagnostic: None,
    })
}
