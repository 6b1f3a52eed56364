//! Seeded synthetic inputs: model profiles, clusters and compression
//! algorithms for tests, benchmarks and the `synth` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::profile::{
    ClusterSpec, CostCurve, CurveKind, Device, GcAlgorithmSpec, GcFamily, LogLogCurve,
    ModelProfile, TensorSpec, DEFAULT_BUBBLE_EPSILON_NS,
};
use crate::Nanos;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameter tensors of a ResNet-101 in forward order: `(name, elements,
/// spatial positions the layer runs over)`.
fn resnet101_layers() -> Vec<(String, u64, u64)> {
    let mut layers = vec![
        ("conv1.weight".to_string(), 64 * 3 * 7 * 7, 112 * 112),
        ("bn1.weight".to_string(), 64, 112 * 112),
        ("bn1.bias".to_string(), 64, 112 * 112),
    ];
    let stages = [(3, 64, 56), (4, 128, 28), (23, 256, 14), (3, 512, 7)];
    let mut in_ch = 64u64;
    for (s, &(blocks, width, hw)) in stages.iter().enumerate() {
        let out_ch = width * 4;
        for b in 0..blocks {
            let p = format!("layer{}.{b}", s + 1);
            let pos = hw * hw;
            let convs = [
                (in_ch * width, width),
                (width * width * 9, width),
                (width * out_ch, out_ch),
            ];
            for (c, &(elems, ch)) in convs.iter().enumerate() {
                layers.push((format!("{p}.conv{}.weight", c + 1), elems, pos));
                layers.push((format!("{p}.bn{}.weight", c + 1), ch, pos));
                layers.push((format!("{p}.bn{}.bias", c + 1), ch, pos));
            }
            if b == 0 {
                layers.push((format!("{p}.downsample.0.weight"), in_ch * out_ch, pos));
                layers.push((format!("{p}.downsample.1.weight"), out_ch, pos));
                layers.push((format!("{p}.downsample.1.bias"), out_ch, pos));
            }
            in_ch = out_ch;
        }
    }
    layers.push(("fc.weight".to_string(), 2048 * 1000, 1));
    layers.push(("fc.bias".to_string(), 1000, 1));
    layers
}

/// A 314-tensor profile shaped like ResNet-101 with fp32 gradients. Backward
/// compute time follows layer work, scaled so the pass takes about
/// `total_ms`, with up to 10% seeded jitter per tensor.
pub fn resnet101_like(seed: u64, total_ms: f64) -> ModelProfile {
    let mut rng = rng(seed);
    let layers = resnet101_layers();
    let work: Vec<f64> = layers
        .iter()
        .map(|(_, elems, pos)| (*elems as f64) * (*pos as f64))
        .collect();
    let scale = total_ms * 1e6 / work.iter().sum::<f64>();
    let n = layers.len();
    let tensors = layers
        .into_iter()
        .zip(work)
        .rev()
        .enumerate()
        .map(|(i, ((id, elems, _), w))| {
            let jitter = rng.gen_range(0.9..1.1);
            TensorSpec {
                id,
                size_bytes: elems * 4,
                compute_ns: ((w * scale * jitter).round() as Nanos).max(1_000),
                backward_index: i,
                layer_distance: i as u32,
            }
        })
        .collect();
    let profile = ModelProfile::new(format!("resnet101-like-{seed}"), tensors)
        .expect("generated profile is valid");
    debug_assert_eq!(profile.len(), n);
    profile
}

/// A random profile of `n` tensors. Sizes are drawn from a small set so
/// that size groups form.
pub fn random_profile(rng: &mut impl Rng, n: usize) -> ModelProfile {
    const SIZES: [u64; 5] = [1 << 16, 1 << 20, 1 << 22, 1 << 24, 1 << 26];
    let tensors = (0..n)
        .map(|i| TensorSpec {
            id: format!("t{i}"),
            size_bytes: SIZES[rng.gen_range(0..SIZES.len())],
            compute_ns: rng.gen_range(1..=40) * 500_000,
            backward_index: i,
            layer_distance: i as u32,
        })
        .collect();
    ModelProfile::new("random", tensors).expect("generated profile is valid")
}

/// A random cluster of 2 to 8 machines with 1 to 4 GPUs each, 10 to 100
/// Gbps between machines and faster links inside them.
pub fn random_cluster(rng: &mut impl Rng) -> ClusterSpec {
    let inter = rng.gen_range(1..=10) * 1_250_000_000;
    ClusterSpec {
        machines: rng.gen_range(2..=8),
        gpus_per_machine: [1, 2, 4][rng.gen_range(0..3)],
        intra_bandwidth: inter * rng.gen_range(2..=8),
        inter_bandwidth: inter,
        cpu_slots_per_machine: rng.gen_range(1..=4),
        bubble_epsilon_ns: DEFAULT_BUBBLE_EPSILON_NS,
    }
}

/// A random compression algorithm with constant-floor, sub-linear curves;
/// CPU curves are slower than GPU curves by a random factor.
pub fn random_gc(rng: &mut impl Rng) -> GcAlgorithmSpec {
    let family = if rng.gen_bool(0.5) {
        GcFamily::Sparsification {
            density: [0.001, 0.01, 0.05][rng.gen_range(0..3)],
            element_bytes: 4,
            index_bytes: 4,
        }
    } else {
        GcFamily::Quantization {
            bits_per_element: [1, 2, 8][rng.gen_range(0..3)],
            element_bytes: 4,
            header_bytes: 0,
        }
    };
    let floor: Nanos = rng.gen_range(20..=200) * 1_000;
    let per_mib: Nanos = rng.gen_range(10..=200) * 1_000;
    let cpu_factor = rng.gen_range(2..=12);
    let dec = rng.gen_range(2..=4);
    let mut curves = Vec::new();
    for device in Device::ALL {
        let f = if device == Device::Cpu { cpu_factor } else { 1 };
        curves.push(CostCurve {
            device,
            kind: CurveKind::Compress,
            curve: linear_with_floor(floor * f, per_mib * f),
        });
        curves.push(CostCurve {
            device,
            kind: CurveKind::Decompress,
            curve: linear_with_floor(floor * f / dec, per_mib * f / dec),
        });
    }
    GcAlgorithmSpec::new("random", family, curves).expect("generated curves are valid")
}

/// Samples of `max(floor, per_mib * MiB)` from 1 KiB to 1 GiB, doubling.
fn linear_with_floor(floor: Nanos, per_mib: Nanos) -> LogLogCurve {
    let samples: Vec<(u64, Nanos)> = (10..=30)
        .map(|p| {
            let size = 1u64 << p;
            (size, floor.max((per_mib * size) >> 20).max(1))
        })
        .collect();
    LogLogCurve::fit(&samples).expect("samples are increasing")
}

/// Top-k sparsification keeping 1% of elements, with GPU and CPU curves
/// that have a launch-cost floor and grow sub-linearly.
pub fn dgc() -> GcAlgorithmSpec {
    const KIB: u64 = 1 << 10;
    const MIB: u64 = 1 << 20;
    let gpu_c = [(KIB, 100_000), (MIB, 150_000), (16 * MIB, 800_000), (256 * MIB, 12_000_000)];
    let gpu_d = [(KIB, 30_000), (MIB, 40_000), (16 * MIB, 200_000), (256 * MIB, 3_000_000)];
    let cpu_c = [(KIB, 20_000), (MIB, 2_000_000), (16 * MIB, 30_000_000), (256 * MIB, 480_000_000)];
    let cpu_d = [(KIB, 10_000), (MIB, 500_000), (16 * MIB, 8_000_000), (256 * MIB, 120_000_000)];
    let curve = |device, kind, s: &[(u64, Nanos)]| CostCurve {
        device,
        kind,
        curve: LogLogCurve::fit(s).expect("static samples"),
    };
    GcAlgorithmSpec::new(
        "dgc",
        GcFamily::Sparsification {
            density: 0.01,
            element_bytes: 4,
            index_bytes: 4,
        },
        vec![
            curve(Device::Gpu, CurveKind::Compress, &gpu_c),
            curve(Device::Gpu, CurveKind::Decompress, &gpu_d),
            curve(Device::Cpu, CurveKind::Compress, &cpu_c),
            curve(Device::Cpu, CurveKind::Decompress, &cpu_d),
        ],
    )
    .expect("static spec is valid")
}

/// One-bit sign quantization with the same curve shapes as [`dgc`] but
/// cheaper decompression.
pub fn onebit() -> GcAlgorithmSpec {
    const KIB: u64 = 1 << 10;
    const MIB: u64 = 1 << 20;
    let gpu_c = [(KIB, 60_000), (MIB, 80_000), (16 * MIB, 400_000), (256 * MIB, 6_000_000)];
    let gpu_d = [(KIB, 30_000), (MIB, 40_000), (16 * MIB, 250_000), (256 * MIB, 4_000_000)];
    let cpu_c = [(KIB, 10_000), (MIB, 1_000_000), (16 * MIB, 15_000_000), (256 * MIB, 240_000_000)];
    let cpu_d = [(KIB, 10_000), (MIB, 800_000), (16 * MIB, 12_000_000), (256 * MIB, 190_000_000)];
    let curve = |device, kind, s: &[(u64, Nanos)]| CostCurve {
        device,
        kind,
        curve: LogLogCurve::fit(s).expect("static samples"),
    };
    GcAlgorithmSpec::new(
        "onebit",
        GcFamily::Quantization {
            bits_per_element: 1,
            element_bytes: 4,
            header_bytes: 4,
        },
        vec![
            curve(Device::Gpu, CurveKind::Compress, &gpu_c),
            curve(Device::Gpu, CurveKind::Decompress, &gpu_d),
            curve(Device::Cpu, CurveKind::Compress, &cpu_c),
            curve(Device::Cpu, CurveKind::Decompress, &cpu_d),
        ],
    )
    .expect("static spec is valid")
}

/// Eight machines with eight GPUs each on a 100 Gbps network.
pub fn default_cluster() -> ClusterSpec {
    ClusterSpec {
        machines: 8,
        gpus_per_machine: 8,
        intra_bandwidth: 100_000_000_000,
        inter_bandwidth: 12_500_000_000,
        cpu_slots_per_machine: 4,
        bubble_epsilon_ns: DEFAULT_BUBBLE_EPSILON_NS,
    }
}
