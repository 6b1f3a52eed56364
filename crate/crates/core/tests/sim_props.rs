use gradplan::costs::{scheme_comm_time, scheme_compression_time, CostRow, Phase, PhaseContext, Routine};
use gradplan::optiontree::{enumerate_table, ActionTask, OptionId, OptionTable, TaskKind, TreeConfig};
use gradplan::profile::{ClusterSpec, CurveKind, Device, GcAlgorithmSpec, GcFamily, LogLogCurve};
use gradplan::sim::{simulate, EventKind, ResourceId, Simulator, Timeline};
use gradplan::synth;
use gradplan::Nanos;
use proptest::prelude::*;
use rand::Rng;

fn random_assignment(rng: &mut impl Rng, table: &OptionTable, cluster: &ClusterSpec, n: usize) -> Vec<OptionId> {
    let ids: Vec<OptionId> = table
        .iter()
        .filter(|(_, o)| cluster.supports_hierarchical() || !o.pattern.is_hierarchical())
        .map(|(id, _)| id)
        .collect();
    (0..n).map(|_| ids[rng.gen_range(0..ids.len())]).collect()
}

fn check_invariants(t: &Timeline, cluster: &ClusterSpec, compute: &[Nanos]) {
    for r in [ResourceId::GpuCompute, ResourceId::IntraLink, ResourceId::InterLink] {
        let mut spans: Vec<_> = t.events.iter().filter(|e| e.resource == r).map(|e| (e.start, e.end)).collect();
        spans.sort();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlap on {r}: {w:?}");
        }
    }
    let mut points: Vec<(Nanos, i32)> = Vec::new();
    for e in t.events.iter().filter(|e| e.resource == ResourceId::CpuPool) {
        points.push((e.start, 1));
        points.push((e.end, -1));
    }
    points.sort();
    let mut live = 0;
    for (_, d) in points {
        live += d;
        assert!(live <= cluster.cpu_slots_per_machine.max(1) as i32);
    }
    for tensor in 0..compute.len() {
        let mine: Vec<_> = t.events.iter().filter(|e| e.tensor == tensor).collect();
        assert_eq!(mine[0].kind, EventKind::Compute);
        for w in mine.windows(2) {
            assert!(w[1].start >= w[0].end, "tensor {tensor} steps overlap");
        }
        assert!(mine.iter().all(|e| e.end >= e.start));
    }
    let computes: Vec<_> = t.events.iter().filter(|e| e.kind == EventKind::Compute).collect();
    assert_eq!(computes.len(), compute.len());
    for (i, w) in computes.windows(2).enumerate() {
        assert_eq!(w[0].tensor, i);
        assert!(w[1].start >= w[0].end);
    }
    let total: Nanos = compute.iter().sum();
    assert!(t.f >= total);
    let last = compute.len() - 1;
    let last_compute_end = computes[last].end;
    let sync: Nanos = t
        .events
        .iter()
        .filter(|e| e.tensor == last && e.kind != EventKind::Compute)
        .map(|e| e.duration())
        .sum();
    assert!(t.f >= last_compute_end + sync);
    assert_eq!(t.f, t.events.iter().map(|e| e.end).max().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn timeline_invariants(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = synth::rng(seed);
        let profile = synth::random_profile(&mut rng, n);
        let cluster = synth::random_cluster(&mut rng);
        let gc = synth::random_gc(&mut rng);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let a = random_assignment(&mut rng, &table, &cluster, n);
        let t = simulate(&profile, &cluster, &gc, &table, &a).unwrap();
        let compute: Vec<Nanos> = profile.tensors.iter().map(|t| t.compute_ns).collect();
        check_invariants(&t, &cluster, &compute);
        let again = simulate(&profile, &cluster, &gc, &table, &a).unwrap();
        prop_assert_eq!(serde_json::to_string(&t).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn uncompressed_matches_sweep(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = synth::rng(seed);
        let profile = synth::random_profile(&mut rng, n);
        let cluster = ClusterSpec { gpus_per_machine: 1, ..synth::random_cluster(&mut rng) };
        let gc = synth::random_gc(&mut rng);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let baseline = table.default_uncompressed().unwrap();
        let t = simulate(&profile, &cluster, &gc, &table, &vec![baseline; n]).unwrap();
        // wait-free backpropagation on one link
        let nodes = cluster.machines as u128;
        let mut clock: u128 = 0;
        let mut link: u128 = 0;
        for tensor in &profile.tensors {
            clock += tensor.compute_ns as u128;
            let num = 2 * (nodes - 1) * tensor.size_bytes as u128 * 1_000_000_000;
            let den = nodes * cluster.inter_bandwidth as u128;
            let comm = (2 * num + den) / (2 * den);
            link = link.max(clock) + comm;
        }
        prop_assert_eq!(t.f as u128, link.max(clock));
    }

    #[test]
    fn resumed_runs_match_fresh(seed in any::<u64>(), n in 2usize..10, steps in 2usize..12) {
        let mut rng = synth::rng(seed);
        let profile = synth::random_profile(&mut rng, n);
        let cluster = synth::random_cluster(&mut rng);
        let gc = synth::random_gc(&mut rng);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let mut sim = Simulator::new(&profile, &cluster, &gc, &table);
        if rng.gen_bool(0.5) {
            let cps: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
            sim.set_checkpoints(&cps);
        }
        let mut a = random_assignment(&mut rng, &table, &cluster, n);
        for _ in 0..steps {
            let fresh = simulate(&profile, &cluster, &gc, &table, &a).unwrap().f;
            if rng.gen_bool(0.3) {
                let bound = rng.gen_range(fresh / 2..=fresh + 1);
                let got = sim.iteration_time_below(&a, bound).unwrap();
                prop_assert_eq!(got, Some(fresh).filter(|&f| f < bound));
            } else {
                prop_assert_eq!(sim.iteration_time(&a).unwrap(), fresh);
            }
            // change a suffix, sometimes a single tensor
            let from = rng.gen_range(0..n);
            let fresh_tail = random_assignment(&mut rng, &table, &cluster, n);
            let to = if rng.gen_bool(0.5) { from + 1 } else { n };
            a[from..to].copy_from_slice(&fresh_tail[from..to]);
        }
    }
}

fn curve(base: Nanos, per_kib: Nanos) -> LogLogCurve {
    let samples: Vec<(u64, Nanos)> = (8..=28).map(|p| (1u64 << p, base + per_kib * (1u64 << p) / 1024)).collect();
    LogLogCurve::fit(&samples).unwrap()
}

fn gc(family: GcFamily) -> GcAlgorithmSpec {
    GcAlgorithmSpec::uniform("g", family, curve(5_000, 3), curve(2_000, 1)).unwrap()
}

fn flat_path(kinds: &[(TaskKind, Option<Routine>)]) -> Vec<ActionTask> {
    let mut tasks = vec![ActionTask::START];
    for &(k, r) in kinds {
        tasks.push(match k {
            TaskKind::Comp => ActionTask::comp(Device::Gpu),
            TaskKind::Decomp => ActionTask::decomp(Device::Gpu),
            _ => ActionTask::comm(k, r.unwrap(), Phase::Flat),
        });
    }
    tasks.push(ActionTask::END);
    tasks
}

/// Simulated per-tensor durations add up to the closed-form rows.
#[test]
fn lowering_composes_to_cost_rows() {
    use TaskKind::*;
    let sparse = gc(GcFamily::Sparsification { density: 1.0 / 64.0, element_bytes: 4, index_bytes: 4 });
    let quant = gc(GcFamily::Quantization { bits_per_element: 2, element_bytes: 4, header_bytes: 0 });
    let cases: Vec<(CostRow, &GcAlgorithmSpec, Vec<(TaskKind, Option<Routine>)>)> = vec![
        (CostRow::Allgather, &sparse, vec![(Comp, None), (CommComp, Some(Routine::Allgather)), (Decomp, None)]),
        (
            CostRow::AlltoallAllgatherSparse,
            &sparse,
            vec![(Comp, None), (Comm1Comp, Some(Routine::Alltoall)), (Comm2Comp, Some(Routine::Allgather)), (Decomp, None)],
        ),
        (
            CostRow::AlltoallAllgatherQuantized,
            &quant,
            vec![
                (Comp, None),
                (Comm1Comp, Some(Routine::Alltoall)),
                (Decomp, None),
                (Comp, None),
                (Comm2Comp, Some(Routine::Allgather)),
                (Decomp, None),
            ],
        ),
        (
            CostRow::GatherBroadcastSparse,
            &sparse,
            vec![(Comp, None), (Comm1Comp, Some(Routine::Gather)), (Comm2Comp, Some(Routine::Broadcast)), (Decomp, None)],
        ),
        (
            CostRow::GatherBroadcastQuantized,
            &quant,
            vec![
                (Comp, None),
                (Comm1Comp, Some(Routine::Gather)),
                (Decomp, None),
                (Comp, None),
                (Comm2Comp, Some(Routine::Broadcast)),
                (Decomp, None),
            ],
        ),
    ];
    let size: u64 = 1 << 26;
    for machines in [2u32, 4, 8] {
        for bw in [500_000_000u64, 1_000_000_000] {
            let cluster = ClusterSpec::flat(machines, bw);
            let table = enumerate_table(&cluster, &TreeConfig::default());
            let ctx = PhaseContext::flat(machines, bw);
            for (row, g, path) in &cases {
                let tasks = flat_path(path);
                let id = table.find(&tasks).unwrap_or_else(|| panic!("{row:?} path not enumerated"));
                let profile = gradplan::profile::ModelProfile::new(
                    "one",
                    vec![gradplan::profile::TensorSpec {
                        id: "t".into(),
                        size_bytes: size,
                        compute_ns: 1_000,
                        backward_index: 0,
                        layer_distance: 0,
                    }],
                )
                .unwrap();
                let t = simulate(&profile, &cluster, g, &table, &[id]).unwrap();
                let comm: Nanos = t.events.iter().filter(|e| e.kind == EventKind::Communicate).map(|e| e.duration()).sum();
                let comp: Nanos = t
                    .events
                    .iter()
                    .filter(|e| matches!(e.kind, EventKind::Compress | EventKind::Decompress))
                    .map(|e| e.duration())
                    .sum();
                let m = g.compressed_size(size);
                assert_eq!(comm, scheme_comm_time(*row, m, &ctx), "{row:?} comm n={machines}");
                let expected = scheme_compression_time(
                    *row,
                    size,
                    &ctx,
                    Some(g.curve(Device::Gpu, CurveKind::Compress)),
                    Some(g.curve(Device::Gpu, CurveKind::Decompress)),
                )
                .unwrap();
                assert_eq!(comp, expected, "{row:?} compression n={machines}");
            }
            let profile = synth::random_profile(&mut synth::rng(1), 1);
            let base = table.default_uncompressed().unwrap();
            let t = simulate(&profile, &cluster, &sparse, &table, &[base]).unwrap();
            let comm: Nanos = t.events.iter().filter(|e| e.kind == EventKind::Communicate).map(|e| e.duration()).sum();
            assert_eq!(comm, scheme_comm_time(CostRow::Allreduce, profile.tensors[0].size_bytes, &ctx));
        }
    }
}

#[test]
fn hierarchical_phases_use_both_links() {
    let cluster = ClusterSpec { gpus_per_machine: 4, ..ClusterSpec::flat(4, 1_000_000_000) };
    let table = enumerate_table(&cluster, &TreeConfig { allow_flat: false, allow_compression: false, ..TreeConfig::default() });
    let profile = synth::random_profile(&mut synth::rng(2), 3);
    let gc = synth::random_gc(&mut synth::rng(2));
    let id = table.default_uncompressed().unwrap();
    let t = simulate(&profile, &cluster, &gc, &table, &[id; 3]).unwrap();
    let phases: Vec<_> = t.events.iter().filter(|e| e.tensor == 0 && e.kind == EventKind::Communicate).map(|e| (e.resource, e.phase.unwrap())).collect();
    assert_eq!(
        phases,
        [
            (ResourceId::IntraLink, Phase::IntraFirst),
            (ResourceId::InterLink, Phase::Inter),
            (ResourceId::IntraLink, Phase::IntraSecond),
        ]
    );
    let sizes: Vec<_> = t.events.iter().filter(|e| e.tensor == 0 && e.kind == EventKind::Communicate).map(|e| e.message_size.unwrap()).collect();
    let m = profile.tensors[0].size_bytes;
    assert_eq!(sizes, [m, m / 4, m / 4]);
}
