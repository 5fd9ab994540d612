//! Per-stage latency check for resnet50.
//!
//! One FixedGSL cold invocation gives the serial baseline; a SAGE arrival
//! sequence spaced to land in each exit stage gives the rest.

use serde::Serialize;

use crate::error::SimError;
use crate::functions::{SpecTable, WarmthClass};
use crate::policies::{PolicyConfig, PolicyName};
use crate::sim::{run, ClusterConfig, RunOptions, SimConfig};
use crate::workload::{GeneratorKind, GeneratorSpec, InlineArrival};

pub const FUNCTION: &str = "resnet50";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table5Row {
    pub label: &'static str,
    pub expected_ms: f64,
    pub simulated_ms: f64,
    pub warmth: Option<WarmthClass>,
}

impl Table5Row {
    pub fn error_ms(&self) -> f64 {
        (self.simulated_ms - self.expected_ms).abs()
    }
}

/// Published end-to-end latencies: baseline, stages 1 to 4, cold.
pub const EXPECTED_MS: [(&str, f64); 6] = [
    ("baseline", 399.4),
    ("stage1", 28.9),
    ("stage2", 49.7),
    ("stage3", 309.5),
    ("stage4", 309.5),
    ("cold", 310.5),
];

/// SAGE arrival times (ms). Gaps after the previous completion fall inside
/// the 30 s windows of stages 1, 2, 3 and 4, then past eviction.
pub const SAGE_ARRIVALS_MS: [f64; 6] = [0.0, 10_000.0, 60_000.0, 140_000.0, 250_000.0, 400_000.0];

fn arrivals(times: &[f64]) -> GeneratorSpec {
    GeneratorSpec {
        generator: GeneratorKind::Arrivals {
            arrivals: times
                .iter()
                .map(|t| InlineArrival {
                    timestamp_ms: *t,
                    function: FUNCTION.to_string(),
                })
                .collect(),
        },
        mix: Default::default(),
    }
}

fn latencies(
    specs: &SpecTable,
    cluster: &ClusterConfig,
    policy: PolicyName,
    times: &[f64],
) -> Result<Vec<(f64, Option<WarmthClass>)>, SimError> {
    let out = run(SimConfig {
        specs: specs.clone(),
        cluster: cluster.clone(),
        policy: PolicyConfig::preset(policy),
        workload: arrivals(times),
        options: RunOptions {
            check_invariants: true,
            ..Default::default()
        },
    })?;
    out.records
        .iter()
        .map(|r| {
            r.latency()
                .map(|d| (d.as_ms_f64(), r.warmth))
                .ok_or_else(|| SimError::Invariant(format!("invocation {} did not complete", r.id)))
        })
        .collect()
}

/// Simulates the six rows. The first SAGE arrival is cold, so its row is
/// reported last to match the published order.
pub fn table5(specs: &SpecTable, cluster: &ClusterConfig) -> Result<Vec<Table5Row>, SimError> {
    specs.require(FUNCTION)?;
    let baseline = latencies(specs, cluster, PolicyName::FixedGsl, &[0.0])?;
    let sage = latencies(specs, cluster, PolicyName::Sage, &SAGE_ARRIVALS_MS)?;
    let simulated = [baseline[0], sage[1], sage[2], sage[3], sage[4], sage[5]];
    Ok(EXPECTED_MS
        .iter()
        .zip(simulated)
        .map(|((label, expected_ms), (ms, warmth))| Table5Row {
            label,
            expected_ms: *expected_ms,
            simulated_ms: ms,
            warmth,
        })
        .collect())
}

/// Baseline latency divided by each warm-stage latency: `(mean, min)`.
pub fn warm_speedups(rows: &[Table5Row]) -> Option<(f64, f64)> {
    let baseline = rows.iter().find(|r| r.label == "baseline")?.simulated_ms;
    let speedups: Vec<f64> = rows
        .iter()
        .filter(|r| r.label.starts_with("stage"))
        .map(|r| baseline / r.simulated_ms)
        .collect();
    if speedups.is_empty() {
        return None;
    }
    let mean = speedups.iter().sum::<f64>() / speedups.len() as f64;
    let min = speedups.iter().copied().fold(f64::INFINITY, f64::min);
    Some((mean, min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::default_table;

    #[test]
    fn rows_match_within_a_tenth_of_a_millisecond() {
        let rows = table5(&default_table(), &ClusterConfig::default()).unwrap();
        for r in &rows {
            assert!(r.error_ms() <= 0.1, "{r:?}");
        }
        let warmth: Vec<_> = rows.iter().map(|r| r.warmth.unwrap()).collect();
        assert_eq!(
            warmth,
            [
                WarmthClass::Cold,
                WarmthClass::Stage1Hot,
                WarmthClass::Stage2,
                WarmthClass::Stage3,
                WarmthClass::Stage4,
                WarmthClass::Cold
            ]
        );
    }

    #[test]
    fn speedups() {
        let rows = table5(&default_table(), &ClusterConfig::default()).unwrap();
        let (mean, min) = warm_speedups(&rows).unwrap();
        assert!((mean - 6.1075).abs() < 1e-3, "{mean}");
        assert!((min - 1.2905).abs() < 1e-3, "{min}");
    }
}
