//! Declarative inputs: model execution profiles, cluster descriptions and
//! gradient-compression cost profiles.
//!
//! All three files are JSON documents carrying a `schema_version` field.
//! Units are embedded in field names: sizes in bytes, bandwidths in bytes per
//! second, durations in nanoseconds.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Nanos;

pub const SCHEMA_VERSION: u32 = 1;

/// Iterations discarded from the front of every tensor's duration records.
pub const DEFAULT_WARMUP_ITERATIONS: usize = 10;

/// Default minimum idle gap on a link that counts as a bubble (1 µs).
pub const DEFAULT_BUBBLE_EPSILON_NS: Nanos = 1_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub id: String,
    pub size_bytes: u64,
    /// Mean backward-pass computation time.
    pub compute_ns: Nanos,
    /// Position in backward computation order; 0 computes first.
    pub backward_index: usize,
    /// Distance to the output layer.
    pub layer_distance: u32,
}

/// An ordered list of gradient tensors, sorted by `backward_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelProfile {
    pub name: String,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Gpu,
    Cpu,
}

impl Device {
    pub const ALL: [Device; 2] = [Device::Gpu, Device::Cpu];

    pub fn as_str(self) -> &'static str {
        match self {
            Device::Gpu => "gpu",
            Device::Cpu => "cpu",
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub machines: u32,
    pub gpus_per_machine: u32,
    pub intra_bandwidth: u64,
    pub inter_bandwidth: u64,
    /// Concurrent CPU compression jobs per machine.
    pub cpu_slots_per_machine: u32,
    pub bubble_epsilon_ns: Nanos,
}

impl ClusterSpec {
    pub fn flat(machines: u32, bandwidth: u64) -> Self {
        ClusterSpec {
            machines,
            gpus_per_machine: 1,
            intra_bandwidth: bandwidth,
            inter_bandwidth: bandwidth,
            cpu_slots_per_machine: 1,
            bubble_epsilon_ns: DEFAULT_BUBBLE_EPSILON_NS,
        }
    }

    pub fn total_gpus(&self) -> u32 {
        self.machines * self.gpus_per_machine
    }

    pub fn supports_hierarchical(&self) -> bool {
        self.gpus_per_machine > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Compress,
    Decompress,
}

/// Log-log piecewise-linear interpolation through profiled samples.
///
/// Below the smallest sample the value is clamped (kernel-launch floor);
/// above the largest it follows the last segment's log-log slope. Results
/// are rounded half-up to integer nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLogCurve {
    samples: Vec<(u64, Nanos)>,
}

pub fn fit_cost_curve(samples: &[(u64, Nanos)]) -> Result<LogLogCurve> {
    LogLogCurve::fit(samples)
}

impl LogLogCurve {
    pub fn fit(samples: &[(u64, Nanos)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cost curve", "no samples"));
        }
        for (i, &(size, dur)) in samples.iter().enumerate() {
            if size == 0 {
                return Err(Error::invalid("cost curve", format!("sample {i} has zero size")));
            }
            if dur == 0 {
                return Err(Error::invalid(
                    "cost curve",
                    format!("sample {i} has zero duration"),
                ));
            }
            if i > 0 && samples[i - 1].0 >= size {
                return Err(Error::invalid(
                    "cost curve",
                    format!("sample sizes must be strictly increasing (sample {i})"),
                ));
            }
        }
        Ok(LogLogCurve {
            samples: samples.to_vec(),
        })
    }

    /// A size-independent curve.
    pub fn constant(duration: Nanos) -> Self {
        LogLogCurve {
            samples: vec![(1, duration)],
        }
    }

    pub fn samples(&self) -> &[(u64, Nanos)] {
        &self.samples
    }

    pub fn eval(&self, size: u64) -> Nanos {
        let s = &self.samples;
        let (first_size, first_dur) = s[0];
        if size <= first_size {
            return first_dur;
        }
        let seg = match s.binary_search_by_key(&size, |&(x, _)| x) {
            Ok(i) => return s[i].1,
            Err(i) if i < s.len() => i - 1,
            Err(_) if s.len() == 1 => return first_dur,
            Err(_) => s.len() - 2,
        };
        let (x0, y0) = s[seg];
        let (x1, y1) = s[seg + 1];
        let (lx0, lx1, ly0, ly1) = (
            (x0 as f64).ln(),
            (x1 as f64).ln(),
            (y0 as f64).ln(),
            (y1 as f64).ln(),
        );
        let slope = (ly1 - ly0) / (lx1 - lx0);
        let v = (ly0 + slope * ((size as f64).ln() - lx0)).exp();
        round_half_up(v)
    }
}

pub(crate) fn round_half_up(v: f64) -> Nanos {
    if v <= 0.0 {
        0
    } else {
        (v + 0.5).floor() as Nanos
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    pub device: Device,
    pub kind: CurveKind,
    pub curve: LogLogCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorType {
    Sparse,
    Quantized,
    Allreducible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum GcFamily {
    Sparsification {
        /// Fraction of elements kept, in (0, 1].
        density: f64,
        #[serde(default = "default_element_bytes")]
        element_bytes: u32,
        #[serde(default = "default_index_bytes")]
        index_bytes: u32,
    },
    Quantization {
        bits_per_element: u32,
        #[serde(default = "default_element_bytes")]
        element_bytes: u32,
        #[serde(default)]
        header_bytes: u32,
    },
}

fn default_element_bytes() -> u32 {
    4
}

fn default_index_bytes() -> u32 {
    4
}

/// A gradient-compression algorithm: its output size rule plus compress and
/// decompress cost curves for each device class.
#[derive(Debug, Clone, PartialEq)]
pub struct GcAlgorithmSpec {
    pub name: String,
    pub family: GcFamily,
    curves: Vec<CostCurve>,
}

impl GcAlgorithmSpec {
    pub fn new(name: impl Into<String>, family: GcFamily, curves: Vec<CostCurve>) -> Result<Self> {
        validate_family(&family)?;
        for device in Device::ALL {
            for kind in [CurveKind::Compress, CurveKind::Decompress] {
                let n = curves
                    .iter()
                    .filter(|c| c.device == device && c.kind == kind)
                    .count();
                if n != 1 {
                    return Err(Error::invalid(
                        "gc profile",
                        format!("expected exactly one {device} {kind:?} curve, found {n}"),
                    ));
                }
            }
        }
        let spec = GcAlgorithmSpec {
            name: name.into(),
            family,
            curves,
        };
        if let Some(size) = spec.first_enlarging_size() {
            log::warn!(
                "gc `{}` enlarges {size}-byte tensors ({} bytes after compression)",
                spec.name,
                spec.compressed_size(size)
            );
        }
        Ok(spec)
    }

    /// Same compress/decompress curve on both devices.
    pub fn uniform(
        name: impl Into<String>,
        family: GcFamily,
        compress: LogLogCurve,
        decompress: LogLogCurve,
    ) -> Result<Self> {
        let mut curves = Vec::new();
        for device in Device::ALL {
            curves.push(CostCurve {
                device,
                kind: CurveKind::Compress,
                curve: compress.clone(),
            });
            curves.push(CostCurve {
                device,
                kind: CurveKind::Decompress,
                curve: decompress.clone(),
            });
        }
        Self::new(name, family, curves)
    }

    pub fn curve(&self, device: Device, kind: CurveKind) -> &LogLogCurve {
        // presence of all four curves is checked in `new`
        &self
            .curves
            .iter()
            .find(|c| c.device == device && c.kind == kind)
            .expect("validated curve set")
            .curve
    }

    pub fn curves(&self) -> &[CostCurve] {
        &self.curves
    }

    pub fn compress_ns(&self, device: Device, size: u64) -> Nanos {
        self.curve(device, CurveKind::Compress).eval(size)
    }

    pub fn decompress_ns(&self, device: Device, size: u64) -> Nanos {
        self.curve(device, CurveKind::Decompress).eval(size)
    }

    pub fn tensor_type(&self) -> TensorType {
        match self.family {
            GcFamily::Sparsification { .. } => TensorType::Sparse,
            GcFamily::Quantization { .. } => TensorType::Quantized,
        }
    }

    pub fn compressed_size(&self, size_bytes: u64) -> u64 {
        compressed_size(&self.family, size_bytes)
    }

    /// Smallest profiled sample size that the algorithm enlarges, if any.
    fn first_enlarging_size(&self) -> Option<u64> {
        self.curves
            .iter()
            .flat_map(|c| c.curve.samples().iter().map(|&(s, _)| s))
            .filter(|&s| self.compressed_size(s) > s)
            .min()
    }
}

fn validate_family(family: &GcFamily) -> Result<()> {
    match *family {
        GcFamily::Sparsification {
            density,
            element_bytes,
            ..
        } => {
            if !(density > 0.0 && density <= 1.0) {
                return Err(Error::invalid(
                    "gc profile",
                    format!("density {density} outside (0, 1]"),
                ));
            }
            if element_bytes == 0 {
                return Err(Error::invalid("gc profile", "element_bytes must be > 0"));
            }
        }
        GcFamily::Quantization {
            bits_per_element,
            element_bytes,
            ..
        } => {
            if bits_per_element == 0 || element_bytes == 0 {
                return Err(Error::invalid(
                    "gc profile",
                    "bits_per_element and element_bytes must be > 0",
                ));
            }
        }
    }
    Ok(())
}

/// Bytes on the wire after compressing a `size_bytes` tensor. Never below 1.
pub fn compressed_size(family: &GcFamily, size_bytes: u64) -> u64 {
    let out = match *family {
        GcFamily::Sparsification {
            density,
            element_bytes,
            index_bytes,
        } => {
            let elements = size_bytes.div_ceil(element_bytes as u64);
            let kept = ceil_tolerant(density * elements as f64);
            kept * (element_bytes as u64 + index_bytes as u64)
        }
        GcFamily::Quantization {
            bits_per_element,
            element_bytes,
            header_bytes,
        } => {
            let elements = size_bytes.div_ceil(element_bytes as u64) as u128;
            let bits = elements * bits_per_element as u128;
            bits.div_ceil(8) as u64 + header_bytes as u64
        }
    };
    out.max(1)
}

// Decimal densities such as 0.01 are not exact in binary; a product that is
// integral up to rounding noise must not be bumped to the next integer.
fn ceil_tolerant(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

// ---------------------------------------------------------------------------
// File schemas

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    warmup_iterations: Option<usize>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    id: String,
    size_bytes: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backward_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer_distance: Option<u32>,
    /// One entry per profiled iteration.
    compute_duration_ns: Vec<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterFile {
    schema_version: u32,
    machines: i64,
    gpus_per_machine: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intra_bandwidth_bytes_per_sec: Option<f64>,
    inter_bandwidth_bytes_per_sec: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cpu_slots_per_machine: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bubble_epsilon_ns: Option<i64>,
}

// `deny_unknown_fields` does not combine with `flatten`
#[derive(Debug, Serialize, Deserialize)]
struct GcFile {
    schema_version: u32,
    name: String,
    #[serde(flatten)]
    family: GcFamily,
    curves: Vec<CurveRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveRecord {
    device: Device,
    kind: CurveKind,
    /// `[size_bytes, duration_ns]` pairs.
    samples: Vec<(u64, Nanos)>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<'a, T: Deserialize<'a>>(text: &'a str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Parse {
        context: context.to_string(),
        source,
    })
}

fn check_version(found: u32, context: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            context: context.to_string(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// Mean of the records left after warm-up, rounded half-up.
///
/// When there are no more records than the warm-up count, all but the last
/// record are discarded.
fn steady_state_mean(records: &[u64], warmup: usize) -> Nanos {
    let skip = if records.len() > warmup {
        warmup
    } else {
        records.len() - 1
    };
    let kept = &records[skip..];
    let sum: u128 = kept.iter().map(|&d| d as u128).sum();
    let n = kept.len() as u128;
    ((2 * sum + n) / (2 * n)) as Nanos
}

pub fn load_model_profile(path: &Path) -> Result<ModelProfile> {
    let text = read(path)?;
    parse_model_profile(&text, &path.display().to_string())
}

pub fn parse_model_profile(text: &str, context: &str) -> Result<ModelProfile> {
    let file: ModelFile = parse(text, context)?;
    check_version(file.schema_version, context)?;
    let warmup = file.warmup_iterations.unwrap_or(DEFAULT_WARMUP_ITERATIONS);
    if file.tensors.is_empty() {
        return Err(Error::invalid("model profile", "tensor list is empty"));
    }
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(file.tensors.len());
    for (pos, rec) in file.tensors.into_iter().enumerate() {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateTensor(rec.id));
        }
        if rec.size_bytes <= 0 {
            return Err(Error::invalid(
                "model profile",
                format!("tensor `{}` has non-positive size {}", rec.id, rec.size_bytes),
            ));
        }
        if rec.compute_duration_ns.is_empty() {
            return Err(Error::invalid(
                "model profile",
                format!("tensor `{}` has no duration records", rec.id),
            ));
        }
        if let Some(&bad) = rec.compute_duration_ns.iter().find(|&&d| d <= 0) {
            return Err(Error::invalid(
                "model profile",
                format!("tensor `{}` has non-positive duration {bad}", rec.id),
            ));
        }
        let records: Vec<u64> = rec.compute_duration_ns.iter().map(|&d| d as u64).collect();
        let backward_index = rec.backward_index.unwrap_or(pos);
        tensors.push(TensorSpec {
            id: rec.id,
            size_bytes: rec.size_bytes as u64,
            compute_ns: steady_state_mean(&records, warmup),
            backward_index,
            layer_distance: rec.layer_distance.unwrap_or(backward_index as u32),
        });
    }
    ModelProfile::new(file.name, tensors)
}

impl ModelProfile {
    /// Sorts by backward index and checks the profile invariants.
    pub fn new(name: impl Into<String>, mut tensors: Vec<TensorSpec>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::invalid("model profile", "tensor list is empty"));
        }
        let mut seen = HashSet::new();
        for t in &tensors {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::DuplicateTensor(t.id.clone()));
            }
            if t.size_bytes == 0 || t.compute_ns == 0 {
                return Err(Error::invalid(
                    "model profile",
                    format!("tensor `{}` has zero size or duration", t.id),
                ));
            }
        }
        tensors.sort_by_key(|t| t.backward_index);
        for (i, t) in tensors.iter().enumerate() {
            if t.backward_index != i {
                return Err(Error::invalid(
                    "model profile",
                    format!(
                        "backward indices must be unique and contiguous from 0 (tensor `{}` has {})",
                        t.id, t.backward_index
                    ),
                ));
            }
        }
        Ok(ModelProfile {
            name: name.into(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_compute_ns(&self) -> Nanos {
        self.tensors.iter().map(|t| t.compute_ns).sum()
    }

    /// Serialized form; reloading it yields an identical profile.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            warmup_iterations: Some(0),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorRecord {
                    id: t.id.clone(),
                    size_bytes: t.size_bytes as i64,
                    backward_index: Some(t.backward_index),
                    layer_distance: Some(t.layer_distance),
                    compute_duration_ns: vec![t.compute_ns as i64],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }
}

pub fn load_cluster_spec(path: &Path) -> Result<ClusterSpec> {
    let text = read(path)?;
    parse_cluster_spec(&text, &path.display().to_string())
}

fn bandwidth(value: f64, field: &str) -> Result<u64> {
    if !(value.is_finite() && value >= 1.0) || value.fract() != 0.0 || value > u64::MAX as f64 {
        return Err(Error::invalid(
            "cluster spec",
            format!("{field} must be a positive whole number of bytes/second, got {value}"),
        ));
    }
    Ok(value as u64)
}

fn positive(value: i64, field: &str) -> Result<u32> {
    if value <= 0 || value > u32::MAX as i64 {
        return Err(Error::invalid(
            "cluster spec",
            format!("{field} must be positive, got {value}"),
        ));
    }
    Ok(value as u32)
}

pub fn parse_cluster_spec(text: &str, context: &str) -> Result<ClusterSpec> {
    let file: ClusterFile = parse(text, context)?;
    check_version(file.schema_version, context)?;
    let inter = bandwidth(file.inter_bandwidth_bytes_per_sec, "inter_bandwidth_bytes_per_sec")?;
    let intra = match file.intra_bandwidth_bytes_per_sec {
        Some(b) => bandwidth(b, "intra_bandwidth_bytes_per_sec")?,
        None => inter,
    };
    let epsilon = file
        .bubble_epsilon_ns
        .unwrap_or(DEFAULT_BUBBLE_EPSILON_NS as i64);
    if epsilon < 0 {
        return Err(Error::invalid("cluster spec", "bubble_epsilon_ns must be >= 0"));
    }
    Ok(ClusterSpec {
        machines: positive(file.machines, "machines")?,
        gpus_per_machine: positive(file.gpus_per_machine, "gpus_per_machine")?,
        intra_bandwidth: intra,
        inter_bandwidth: inter,
        cpu_slots_per_machine: positive(file.cpu_slots_per_machine.unwrap_or(1), "cpu_slots_per_machine")?,
        bubble_epsilon_ns: epsilon as Nanos,
    })
}

impl ClusterSpec {
    pub fn to_json(&self) -> String {
        let file = ClusterFile {
            schema_version: SCHEMA_VERSION,
            machines: self.machines as i64,
            gpus_per_machine: self.gpus_per_machine as i64,
            intra_bandwidth_bytes_per_sec: Some(self.intra_bandwidth as f64),
            inter_bandwidth_bytes_per_sec: self.inter_bandwidth as f64,
            cpu_slots_per_machine: Some(self.cpu_slots_per_machine as i64),
            bubble_epsilon_ns: Some(self.bubble_epsilon_ns as i64),
        };
        serde_json::to_string_pretty(&file).expect("cluster serializes")
    }
}

pub fn load_gc_spec(path: &Path) -> Result<GcAlgorithmSpec> {
    let text = read(path)?;
    parse_gc_spec(&text, &path.display().to_string())
}

pub fn parse_gc_spec(text: &str, context: &str) -> Result<GcAlgorithmSpec> {
    let file: GcFile = parse(text, context)?;
    check_version(file.schema_version, context)?;
    let curves = file
        .curves
        .into_iter()
        .map(|c| {
            Ok(CostCurve {
                device: c.device,
                kind: c.kind,
                curve: LogLogCurve::fit(&c.samples)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GcAlgorithmSpec::new(file.name, file.family, curves)
}

impl GcAlgorithmSpec {
    pub fn to_json(&self) -> String {
        let file = GcFile {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            family: self.family.clone(),
            curves: self
                .curves
                .iter()
                .map(|c| CurveRecord {
                    device: c.device,
                    kind: c.kind,
                    samples: c.curve.samples().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("gc spec serializes")
    }
}
