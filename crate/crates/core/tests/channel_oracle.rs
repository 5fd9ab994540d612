//! Fluid processor sharing against a 1 ms time-stepped reference.

use gsl_core::resources::simulate_transfers;
use gsl_core::{Megabytes, SimTime};
use proptest::prelude::*;

/// Time-stepped equal-share reference. Each 1 ms step hands out the step's
/// capacity by water-filling: every active transfer gets an equal share, and
/// whatever a finishing transfer does not need goes back to the others.
/// A completion is reported at the end of the step it happens in.
fn brute_force(bandwidth_mbps: f64, transfers: &[(u64, f64)]) -> Vec<f64> {
    let per_ms = bandwidth_mbps / 1000.0;
    let mut remaining: Vec<f64> = transfers.iter().map(|t| t.1).collect();
    let mut done = vec![f64::NAN; transfers.len()];
    let mut t = 0u64;
    while done.iter().any(|d| d.is_nan()) {
        let mut active: Vec<usize> = (0..transfers.len())
            .filter(|&i| transfers[i].0 <= t && done[i].is_nan())
            .collect();
        let mut capacity = per_ms;
        while !active.is_empty() && capacity > 1e-12 {
            let share = capacity / active.len() as f64;
            capacity = 0.0;
            let mut still = Vec::new();
            for &i in &active {
                if remaining[i] <= share + 1e-9 {
                    capacity += share - remaining[i];
                    remaining[i] = 0.0;
                    done[i] = (t + 1) as f64;
                } else {
                    remaining[i] -= share;
                    still.push(i);
                }
            }
            active = still;
        }
        t += 1;
    }
    done
}

fn scenario() -> impl Strategy<Value = (f64, Vec<(u64, f64)>)> {
    (
        prop_oneof![Just(1631.0), Just(5051.0), 100.0f64..10_000.0],
        prop::collection::vec((0u64..200, 0.01f64..400.0), 1..=10),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn completions_match_time_stepped_reference((bw, transfers) in scenario()) {
        let input: Vec<(SimTime, Megabytes)> = transfers
            .iter()
            .map(|(start, mb)| (SimTime::from_ms(*start), Megabytes::from_mb(*mb)))
            .collect();
        let exact = simulate_transfers(bw, &input).unwrap();
        // Feed the reference the same fixed-point sizes the channel sees.
        let sizes: Vec<(u64, f64)> = input
            .iter()
            .zip(&transfers)
            .map(|((_, mb), (start, _))| (*start, mb.as_mb()))
            .collect();
        let reference = brute_force(bw, &sizes);
        for (i, (e, r)) in exact.iter().zip(&reference).enumerate() {
            let diff = (e.as_ms_f64() - r).abs();
            prop_assert!(diff <= 2.0, "transfer {i}: exact {} ms, reference {r} ms", e.as_ms_f64());
        }
    }

    #[test]
    fn work_is_conserved((bw, transfers) in scenario()) {
        let input: Vec<(SimTime, Megabytes)> = transfers
            .iter()
            .map(|(start, mb)| (SimTime::from_ms(*start), Megabytes::from_mb(*mb)))
            .collect();
        let done = simulate_transfers(bw, &input).unwrap();
        // No transfer beats its solo time, and the last completion is no
        // earlier than total bytes over bandwidth after the first start.
        for ((start, mb), end) in input.iter().zip(&done) {
            let solo_ms = mb.as_mb() / bw * 1000.0;
            prop_assert!(end.since(*start).as_ms_f64() + 1e-3 >= solo_ms);
        }
        let first = input.iter().map(|t| t.0).min().unwrap();
        let last = *done.iter().max().unwrap();
        let total: f64 = input.iter().map(|t| t.1.as_mb()).sum();
        prop_assert!(last.since(first).as_ms_f64() + 1e-3 >= total / bw * 1000.0);
    }
}

#[test]
fn reference_agrees_on_hand_cases() {
    // Two equal 1000 MB transfers on 1000 MB/s finish together at 2 s.
    assert_eq!(
        brute_force(1000.0, &[(0, 1000.0), (0, 1000.0)]),
        vec![2000.0, 2000.0]
    );
    // A joiner at 500 ms: first has 500 MB left, both run at half rate.
    assert_eq!(
        brute_force(1000.0, &[(0, 1000.0), (500, 1000.0)]),
        vec![1500.0, 2000.0]
    );
}
