use std::collections::BTreeSet;

use gradplan::optiontree::{
    enumerate_options, enumerate_table, gpu_only_options, validate_option, valid_successors,
    CompressionOption, OptionId, PathState, Slot, TaskKind, TreeConfig,
};
use gradplan::planner::{plan, PlanConfig, Planner};
use gradplan::costs::{scheme_comm_time, scheme_compression_time, CostRow, PhaseContext};
use gradplan::profile::{ClusterSpec, CurveKind, Device, GcAlgorithmSpec};
use gradplan::sim::simulate;
use gradplan::synth;
use proptest::prelude::*;
use rand::Rng;

fn small_tree() -> TreeConfig {
    TreeConfig { max_compressions_per_tensor: Some(1), ..TreeConfig::default() }
}

/// Replays `opt` step by step and checks each task is a valid successor of
/// the one before it.
fn walk_successors(opt: &CompressionOption) -> Result<(), TestCaseError> {
    use Slot::*;
    let mut state = PathState {
        compressed: false,
        next: if opt.pattern.is_hierarchical() { HierIntraFirst } else { FlatFirst },
    };
    for w in opt.tasks.windows(2) {
        let (prev, next) = (w[0].kind, w[1].kind);
        let allowed = valid_successors(prev, state).map_err(|e| TestCaseError::fail(e.0))?;
        prop_assert!(allowed.contains(&next), "{} -> {} not allowed in {opt}", prev.as_str(), next.as_str());
        state = match next {
            TaskKind::Comp => PathState { compressed: true, ..state },
            TaskKind::Decomp => PathState { compressed: false, ..state },
            TaskKind::Comm | TaskKind::CommComp => PathState {
                next: match state.next {
                    HierInterFirst => HierIntraSecond,
                    _ => Done,
                },
                ..state
            },
            TaskKind::Comm1 | TaskKind::Comm1Comp => PathState {
                next: match state.next {
                    FlatFirst => FlatSecond,
                    HierIntraFirst => HierInterFirst,
                    _ => HierInterSecond,
                },
                ..state
            },
            TaskKind::Comm2 | TaskKind::Comm2Comp => PathState {
                next: match state.next {
                    FlatSecond => Done,
                    HierInterSecond => HierIntraSecond,
                    _ => Done,
                },
                ..state
            },
            _ => state,
        };
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn enumeration_is_closed_and_unique(
        machines in 1u32..6,
        k in prop::sample::select(vec![1u32, 2, 4]),
        flat in any::<bool>(),
        hier in any::<bool>(),
        comp in any::<bool>(),
        div in any::<bool>(),
        cpu in any::<bool>(),
    ) {
        prop_assume!(flat || hier);
        let cluster = ClusterSpec { gpus_per_machine: k, ..ClusterSpec::flat(machines, 1_000_000_000) };
        let resources = if cpu { vec![Device::Gpu, Device::Cpu] } else { vec![Device::Gpu] };
        let cfg = TreeConfig {
            allow_flat: flat,
            allow_hierarchical: hier,
            allow_compression: comp,
            allow_divisible: div,
            resources,
            max_compressions_per_tensor: None,
        };
        let opts = enumerate_options(&cluster, &cfg);
        let unique: BTreeSet<_> = opts.iter().map(|o| o.tasks.clone()).collect();
        prop_assert_eq!(unique.len(), opts.len());
        for o in &opts {
            prop_assert!(validate_option(o).is_empty(), "{o}");
            prop_assert!(comp || !o.is_compressed());
            prop_assert!(hier || !o.pattern.is_hierarchical());
            prop_assert!(flat || o.pattern.is_hierarchical());
            prop_assert!(cluster.supports_hierarchical() || !o.pattern.is_hierarchical());
            prop_assert!(cpu || o.uses_only(Device::Gpu));
            // every CPU option has its GPU twin and vice versa
            let twin = o.on_device(if o.uses_only(Device::Gpu) { Device::Cpu } else { Device::Gpu });
            prop_assert!(!o.is_compressed() || !cpu || unique.contains(&twin.tasks));
        }
        prop_assert!(opts.is_empty() || !opts[0].is_compressed());
        let full: BTreeSet<_> = enumerate_options(&cluster, &TreeConfig::default()).into_iter().map(|o| o.tasks).collect();
        prop_assert!(unique.is_subset(&full));
        for o in &opts {
            walk_successors(o)?;
        }
    }

    #[test]
    fn planner_never_worse_than_baseline(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = synth::rng(seed);
        let profile = synth::random_profile(&mut rng, n);
        let cluster = synth::random_cluster(&mut rng);
        let gc = synth::random_gc(&mut rng);
        let table = enumerate_table(&cluster, &small_tree());
        let out = plan(&profile, &cluster, &gc, &table, &PlanConfig::default()).unwrap();
        prop_assert!(out.report.f_ns <= out.report.baseline_ns);
        prop_assert!(out.report.f_ns <= out.report.gpu_f_ns);
        let f = simulate(&profile, &cluster, &gc, &table, &out.strategy.options).unwrap().f;
        prop_assert_eq!(f, out.report.f_ns);
    }

    #[test]
    fn offload_count_is_product_of_groups(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = synth::rng(seed);
        let profile = synth::random_profile(&mut rng, n);
        let cluster = ClusterSpec { gpus_per_machine: 1, ..synth::random_cluster(&mut rng) };
        let gc = synth::random_gc(&mut rng);
        let table = enumerate_table(&cluster, &small_tree());
        let all: Vec<OptionId> = table.ids().collect();
        let gpu = gpu_only_options(&table, &all);
        let pool: Vec<OptionId> = gpu.iter().copied().filter(|&o| table.option(o).is_compressed()).take(2).collect();
        let mut planner = Planner::new(&profile, &cluster, &gc, &table).unwrap();
        let mut s = planner.baseline_strategy();
        for o in s.options.iter_mut() {
            if rng.gen_bool(0.7) {
                *o = pool[rng.gen_range(0..pool.len())];
            }
        }
        let out = planner.offload_cpu(&s, u128::MAX).unwrap();
        let expected: u64 = out.groups.iter().map(|g| g.members.len() as u64 + 1).product();
        prop_assert_eq!(out.evaluations, expected);
        let mut keyed = BTreeSet::new();
        for g in &out.groups {
            prop_assert!(keyed.insert((g.size_bytes, g.gpu_option)));
            for &m in &g.members {
                prop_assert_eq!(s.options[m], g.gpu_option);
                prop_assert_eq!(profile.tensors[m].size_bytes, g.size_bytes);
            }
        }
        let grouped: usize = out.groups.iter().map(|g| g.members.len()).sum();
        prop_assert_eq!(grouped, s.options.iter().filter(|&&o| o != planner.baseline).count());
    }
}

/// (comm time saved) / (compression time added) for one scheme row.
fn benefit_ratio(row: CostRow, size: u64, ctx: &PhaseContext, gc: &GcAlgorithmSpec) -> f64 {
    let saved = scheme_comm_time(CostRow::Allreduce, size, ctx) as f64
        - scheme_comm_time(row, gc.compressed_size(size), ctx) as f64;
    let cost = scheme_compression_time(
        row,
        size,
        ctx,
        Some(gc.curve(Device::Gpu, CurveKind::Compress)),
        Some(gc.curve(Device::Gpu, CurveKind::Decompress)),
    )
    .unwrap();
    saved / cost as f64
}

#[test]
fn benefit_ratio_grows_with_size() {
    let sparse_rows = [CostRow::Allgather, CostRow::AlltoallAllgatherSparse, CostRow::GatherBroadcastSparse];
    let quant_rows = [CostRow::Allgather, CostRow::AlltoallAllgatherQuantized, CostRow::GatherBroadcastQuantized];
    for (gc, rows) in [(synth::dgc(), sparse_rows), (synth::onebit(), quant_rows)] {
        for n in [2u32, 8, 64] {
            for bw in [1_250_000_000u64, 12_500_000_000] {
                let ctx = PhaseContext::flat(n, bw);
                for row in rows {
                    let r: Vec<f64> = (10..=28).map(|p| benefit_ratio(row, 1 << p, &ctx, &gc)).collect();
                    // a scheme that moves more bytes than Allreduce never pays off
                    if r.iter().all(|&x| x <= 0.0) {
                        continue;
                    }
                    for w in r.windows(2) {
                        assert!(w[1] >= w[0], "{} {row:?} n={n} bw={bw}: {r:?}", gc.name);
                    }
                }
            }
        }
    }
}

#[test]
fn plan_is_repeatable() {
    let profile = synth::random_profile(&mut synth::rng(11), 12);
    let cluster = synth::random_cluster(&mut synth::rng(11));
    let gc = synth::random_gc(&mut synth::rng(11));
    let table = enumerate_table(&cluster, &TreeConfig::default());
    let a = plan(&profile, &cluster, &gc, &table, &PlanConfig::default()).unwrap();
    let b = plan(&profile, &cluster, &gc, &table, &PlanConfig::default()).unwrap();
    assert_eq!(a.strategy.options, b.strategy.options);
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
}
