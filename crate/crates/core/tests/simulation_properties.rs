use gsl_core::functions::{default_table, StageKind, WarmthClass};
use gsl_core::metrics::Outcome;
use gsl_core::policies::{PolicyConfig, PolicyName, PolicyOverrides};
use gsl_core::sharing::classify_gap;
use gsl_core::sim::{run, ClusterConfig, RunOptions, SimConfig, Simulation};
use gsl_core::workload::{GeneratorKind, GeneratorSpec, InlineArrival};
use gsl_core::SimDuration;
use proptest::prelude::*;

const NAMES: [&str; 10] = [
    "bert",
    "deepspeech",
    "inception3",
    "nasnet",
    "resnet50",
    "seq2seq",
    "vgg11",
    "lbm",
    "mrif",
    "tpacf",
];

fn arrivals(list: &[(f64, usize)]) -> GeneratorSpec {
    GeneratorSpec {
        generator: GeneratorKind::Arrivals {
            arrivals: list
                .iter()
                .map(|(t, f)| InlineArrival {
                    timestamp_ms: *t,
                    function: NAMES[*f].to_string(),
                })
                .collect(),
        },
        mix: Default::default(),
    }
}

fn policy_strategy() -> impl Strategy<Value = PolicyConfig> {
    (
        prop::sample::select(PolicyName::ALL.to_vec()),
        prop::option::of(1.0f64..40.0),
        prop::option::of(0.5f64..20.0),
    )
        .prop_map(|(name, interval, ttl)| {
            PolicyConfig::preset(name).with_overrides(&PolicyOverrides {
                stage_interval_s: interval,
                dgsf_ctx_ttl: ttl.filter(|_| name == PolicyName::Dgsf),
                ..Default::default()
            })
        })
}

fn workload_strategy() -> impl Strategy<Value = Vec<(f64, usize)>> {
    prop::collection::vec((0.0f64..120_000.0, 0usize..10), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every event leaves residents holding exactly their state's set, and a
    /// drained run frees everything.
    #[test]
    fn holdings_and_teardown(
        policy in policy_strategy(),
        list in workload_strategy(),
        gpus in 1usize..4,
        mem in prop_oneof![Just(40960.0), 2500.0f64..8000.0],
        seed in any::<u64>(),
    ) {
        let cluster = ClusterConfig { gpus, gpu_mem_mb: mem, ..Default::default() };
        let out = run(SimConfig {
            specs: default_table(),
            cluster,
            policy,
            workload: arrivals(&list),
            options: RunOptions { seed, check_invariants: true, ..Default::default() },
        }).unwrap();
        prop_assert_eq!(out.records.len(), list.len());
        let finished = out.records.iter().filter(|r| r.outcome != Outcome::Pending).count();
        if finished == list.len() {
            prop_assert_eq!(out.leaked.clone(), Some(vec![]));
        }
        for r in &out.records {
            if r.outcome != Outcome::Completed {
                continue;
            }
            let start = r.start.unwrap();
            let end = r.completion.unwrap();
            prop_assert!(r.arrival <= start && start <= end);
            for (b, e) in r.stages.iter().flatten() {
                prop_assert!(start <= *b && b <= e && *e <= end);
            }
            let (cb, ce) = r.stage(StageKind::Compute).unwrap();
            let spec = default_table().require(&r.function).unwrap().clone();
            prop_assert_eq!(ce.since(cb), spec.compute_time);
        }
    }

    /// Stepping one event at a time gives the same records as `run`.
    #[test]
    fn stepping_matches_run(list in workload_strategy(), seed in any::<u64>()) {
        let cfg = SimConfig {
            specs: default_table(),
            cluster: ClusterConfig::default().with_gpus(2),
            policy: PolicyConfig::preset(PolicyName::Sage),
            workload: arrivals(&list),
            options: RunOptions { seed, ..Default::default() },
        };
        let a = run(cfg.clone()).unwrap();
        let mut sim = Simulation::new(cfg).unwrap();
        while sim.step().unwrap() {}
        let b = sim.finish().unwrap();
        prop_assert_eq!(a.records, b.records);
    }

    /// An arrival `gap` after the previous completion finds the warmth class
    /// the 30 s windows imply.
    #[test]
    fn arrival_gap_classifies(gap_us in 1u64..150_000_000) {
        prop_assume!(gap_us % 30_000_000 != 0);
        let first = 310.5;
        let second = first + gap_us as f64 / 1000.0;
        let out = run(SimConfig {
            specs: default_table(),
            cluster: ClusterConfig::default(),
            policy: PolicyConfig::preset(PolicyName::Sage),
            workload: arrivals(&[(0.0, 4), (second, 4)]),
            options: RunOptions::default(),
        }).unwrap();
        prop_assert_eq!(out.records[0].completion.unwrap().as_ms_f64(), first);
        let expected = classify_gap(SimDuration::from_us(gap_us), &[SimDuration::from_secs(30); 4]);
        prop_assert_eq!(out.records[1].warmth, Some(expected));
    }
}

#[test]
fn classify_gap_windows() {
    let w = [SimDuration::from_secs(30); 4];
    let at = |s: u64| classify_gap(SimDuration::from_secs(s), &w);
    assert_eq!(at(0), WarmthClass::Stage1Hot);
    assert_eq!(at(29), WarmthClass::Stage1Hot);
    assert_eq!(at(30), WarmthClass::Stage2);
    assert_eq!(at(89), WarmthClass::Stage3);
    assert_eq!(at(119), WarmthClass::Stage4);
    assert_eq!(at(120), WarmthClass::Cold);
}

/// SAGE with sharing, staged exit and parallel setup all disabled behaves
/// exactly like FixedGSL-F for solo invocations. Expected values are summed
/// by hand from the stage times and bandwidths.
#[test]
fn sage_without_mechanisms_is_fixed_gsl_f() {
    let table = default_table();
    let off = PolicyConfig::preset(PolicyName::Sage).with_overrides(&PolicyOverrides {
        plan_mode: Some(gsl_core::functions::PlanMode::Serial),
        ro_sharing: Some(false),
        ctx_sharing: Some(false),
        multi_stage_exit: Some(false),
        ..Default::default()
    });
    for (i, name) in NAMES.iter().enumerate() {
        let spec = table.require(name).unwrap();
        let host = (spec.ro_bytes_host + spec.input_bytes_host).as_mb();
        let pcie = (spec.ro_bytes_pcie + spec.input_bytes_pcie).as_mb();
        let us = |mb: f64, bw: f64| (mb * 1e6 / bw).ceil();
        let expected_us = 1000.0
            + us(host, 1631.0)
            + 285_100.0
            + us(pcie, 5051.0)
            + spec.compute_time.as_us() as f64
            + 100.0;
        for policy in [PolicyConfig::preset(PolicyName::FixedGslF), off.clone()] {
            let out = run(SimConfig {
                specs: table.clone(),
                cluster: ClusterConfig::default(),
                policy,
                workload: arrivals(&[(0.0, i), (200_000.0, i)]),
                options: RunOptions::default(),
            })
            .unwrap();
            for r in &out.records {
                assert_eq!(r.latency().unwrap().as_us() as f64, expected_us, "{name}");
            }
        }
    }
}
