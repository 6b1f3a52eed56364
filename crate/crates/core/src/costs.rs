//! Closed-form communication and compression costs for collective routines.
//!
//! Communication times are bandwidth-only: no per-hop latency term. They are
//! evaluated exactly as rationals in nanoseconds and rounded half-up only at
//! the end, so algebraic identities between routines hold exactly before
//! rounding.
//!
//! Cost curves are indexed by the uncompressed byte count a (de)compression
//! kernel covers. A decompression of `c` received pieces each standing for
//! `e` uncompressed bytes costs `c * h2(e)`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{LogLogCurve, TensorType};
use crate::Nanos;

const NS_PER_SEC: u128 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routine {
    Allreduce,
    Allgather,
    ReduceScatter,
    Reduce,
    Broadcast,
    Alltoall,
    Gather,
}

impl Routine {
    pub const ALL: [Routine; 7] = [
        Routine::Allreduce,
        Routine::Allgather,
        Routine::ReduceScatter,
        Routine::Reduce,
        Routine::Broadcast,
        Routine::Alltoall,
        Routine::Gather,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Routine::Allreduce => "allreduce",
            Routine::Allgather => "allgather",
            Routine::ReduceScatter => "reduce_scatter",
            Routine::Reduce => "reduce",
            Routine::Broadcast => "broadcast",
            Routine::Alltoall => "alltoall",
            Routine::Gather => "gather",
        }
    }

    /// Time coefficient `(num, den)` such that the routine moving a per-node
    /// message of `M` bytes takes `num * M / (den * B)` seconds.
    fn coefficient(self, n: u128) -> (u128, u128) {
        match self {
            Routine::Allreduce => (2 * (n - 1), n),
            Routine::Allgather | Routine::Gather | Routine::Reduce => (n - 1, 1),
            Routine::ReduceScatter | Routine::Alltoall => (n - 1, n),
            Routine::Broadcast => (1, 1),
        }
    }
}

impl fmt::Display for Routine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Routine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Routine::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid("routine", format!("unknown routine `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Flat,
    IntraFirst,
    Inter,
    IntraSecond,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Flat => "flat",
            Phase::IntraFirst => "intra_first",
            Phase::Inter => "inter",
            Phase::IntraSecond => "intra_second",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Phase::Flat, Phase::IntraFirst, Phase::Inter, Phase::IntraSecond]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid("phase", format!("unknown phase `{s}`")))
    }
}

/// Participants and bandwidth of one communication phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseContext {
    pub n: u32,
    /// Bytes per second.
    pub bandwidth: u64,
    pub phase: Phase,
}

impl PhaseContext {
    pub fn new(n: u32, bandwidth: u64, phase: Phase) -> Self {
        assert!(n >= 1, "a phase needs at least one participant");
        assert!(bandwidth > 0, "bandwidth must be positive");
        PhaseContext {
            n,
            bandwidth,
            phase,
        }
    }

    pub fn flat(n: u32, bandwidth: u64) -> Self {
        Self::new(n, bandwidth, Phase::Flat)
    }
}

/// Exact duration in nanoseconds of `num * m / (den * B)` seconds.
fn exact(num: u128, den: u128, m: u64, bandwidth: u64) -> Ratio<u128> {
    Ratio::new(num * m as u128 * NS_PER_SEC, den * bandwidth as u128)
}

pub fn round_ratio(r: Ratio<u128>) -> Nanos {
    ((2 * r.numer() + r.denom()) / (2 * r.denom())) as Nanos
}

pub fn comm_time_exact(routine: Routine, m: u64, ctx: &PhaseContext) -> Ratio<u128> {
    if ctx.n == 1 {
        return Ratio::from_integer(0);
    }
    let (num, den) = routine.coefficient(ctx.n as u128);
    exact(num, den, m, ctx.bandwidth)
}

/// Time for `routine` on a per-node message of `m` bytes.
pub fn comm_time(routine: Routine, m: u64, ctx: &PhaseContext) -> Nanos {
    round_ratio(comm_time_exact(routine, m, ctx))
}

/// Per-node logical message size after the routine. Shards round up.
pub fn size_after(routine: Routine, m: u64, ctx: &PhaseContext) -> u64 {
    let n = ctx.n as u64;
    match routine {
        Routine::ReduceScatter => m.div_ceil(n),
        Routine::Allgather | Routine::Gather => n * m,
        Routine::Alltoall | Routine::Reduce | Routine::Broadcast | Routine::Allreduce => m,
    }
}

/// The rows of the flat-communication cost table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostRow {
    Allreduce,
    Allgather,
    AlltoallAllgatherSparse,
    AlltoallAllgatherQuantized,
    GatherBroadcastSparse,
    GatherBroadcastQuantized,
}

impl CostRow {
    pub const ALL: [CostRow; 6] = [
        CostRow::Allreduce,
        CostRow::Allgather,
        CostRow::AlltoallAllgatherSparse,
        CostRow::AlltoallAllgatherQuantized,
        CostRow::GatherBroadcastSparse,
        CostRow::GatherBroadcastQuantized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostRow::Allreduce => "allreduce",
            CostRow::Allgather => "allgather",
            CostRow::AlltoallAllgatherSparse => "alltoall_allgather_sparse",
            CostRow::AlltoallAllgatherQuantized => "alltoall_allgather_quantized",
            CostRow::GatherBroadcastSparse => "gather_broadcast_sparse",
            CostRow::GatherBroadcastQuantized => "gather_broadcast_quantized",
        }
    }

    /// Row for a routine scheme (`allreduce`, `allgather`, `alltoall_allgather`
    /// or `gather_broadcast`) applied to a tensor type.
    pub fn lookup(scheme: &str, tensor_type: TensorType) -> Result<CostRow> {
        use TensorType::*;
        let row = match (scheme, tensor_type) {
            ("allreduce", _) => CostRow::Allreduce,
            ("allgather", _) => CostRow::Allgather,
            ("alltoall_allgather", Sparse) => CostRow::AlltoallAllgatherSparse,
            ("alltoall_allgather", Quantized) => CostRow::AlltoallAllgatherQuantized,
            ("gather_broadcast", Sparse) => CostRow::GatherBroadcastSparse,
            ("gather_broadcast", Quantized) => CostRow::GatherBroadcastQuantized,
            _ => return Err(Error::UnknownRow(format!("{scheme}/{tensor_type:?}"))),
        };
        Ok(row)
    }

    fn comm_coefficient(self, n: u128) -> (u128, u128) {
        match self {
            CostRow::Allreduce | CostRow::AlltoallAllgatherQuantized => (2 * (n - 1), n),
            CostRow::Allgather => (n - 1, 1),
            CostRow::AlltoallAllgatherSparse => (n * n - 1, n),
            CostRow::GatherBroadcastSparse => (2 * n - 1, 1),
            CostRow::GatherBroadcastQuantized => (n, 1),
        }
    }
}

impl FromStr for CostRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostRow::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownRow(s.to_string()))
    }
}

pub fn scheme_comm_time_exact(row: CostRow, m: u64, ctx: &PhaseContext) -> Ratio<u128> {
    if ctx.n == 1 {
        return Ratio::from_integer(0);
    }
    let (num, den) = row.comm_coefficient(ctx.n as u128);
    exact(num, den, m, ctx.bandwidth)
}

/// Aggregate communication time of a table row on an `m`-byte message.
pub fn scheme_comm_time(row: CostRow, m: u64, ctx: &PhaseContext) -> Nanos {
    round_ratio(scheme_comm_time_exact(row, m, ctx))
}

/// Aggregate compression plus decompression time of a table row.
///
/// `m` is the curve argument; `m / n` rounds up. The quantized Gather/Broadcast
/// row uses `(n + 1) h2(m)`.
pub fn scheme_compression_time(
    row: CostRow,
    m: u64,
    ctx: &PhaseContext,
    h1: Option<&LogLogCurve>,
    h2: Option<&LogLogCurve>,
) -> Result<Nanos> {
    let h1 = h1.ok_or(Error::MissingCurve("compression"))?;
    let h2 = h2.ok_or(Error::MissingCurve("decompression"))?;
    let n = ctx.n as u64;
    let shard = m.div_ceil(n);
    let total = match row {
        CostRow::Allreduce => h1.eval(m) + h2.eval(m),
        CostRow::Allgather | CostRow::GatherBroadcastSparse => h1.eval(m) + n * h2.eval(m),
        CostRow::AlltoallAllgatherSparse => h1.eval(m) + n * n * h2.eval(shard),
        CostRow::AlltoallAllgatherQuantized => {
            h1.eval(m) + h1.eval(shard) + 2 * n * h2.eval(shard)
        }
        CostRow::GatherBroadcastQuantized => 2 * h1.eval(m) + (n + 1) * h2.eval(m),
    };
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivisiblePath {
    Alltoall,
    Gather,
}

/// Size ratio of the second compression in a divisible scheme that
/// decompresses, aggregates and recompresses between its two steps.
///
/// Quantized tensors recompress the aggregated `1/n` shard after Alltoall and
/// the full aggregate at the Gather root. Sparse tensors take the
/// single-compression path, where no second compression happens; 1 is
/// returned for them. `override_alpha` replaces the computed value.
pub fn second_compression_alpha(
    tensor_type: TensorType,
    path: DivisiblePath,
    n: u32,
    override_alpha: Option<f64>,
) -> f64 {
    if let Some(a) = override_alpha {
        return a;
    }
    match (tensor_type, path) {
        (TensorType::Quantized, DivisiblePath::Alltoall) => 1.0 / n.max(1) as f64,
        _ => 1.0,
    }
}
