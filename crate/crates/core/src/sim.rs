//! Discrete-event simulation of one training iteration's backward pass.
//!
//! The timeline is that of one representative GPU rank and its machine's CPU
//! pool. Backward computation and GPU compression share one serial
//! resource; intra- and inter-machine links are separate serial resources;
//! the CPU pool runs up to `cpu_slots_per_machine` jobs at once.
//!
//! Each option is lowered into a chain of steps by tracking the state of the
//! synchronized data. Plain data covers `region` uncompressed bytes. Packed
//! data is `pieces` compressed pieces of `piece_bytes` each, every piece
//! covering `piece_region` uncompressed bytes, the whole covering `region`.
//! Compression cost curves are indexed by the uncompressed bytes covered.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use serde::Serialize;
use serde_json::{json, Value};

use crate::costs::{comm_time, size_after, Phase, PhaseContext, Routine};
use crate::optiontree::{CompressionOption, OptionId, OptionTable, TaskKind};
use crate::profile::{ClusterSpec, CurveKind, Device, GcAlgorithmSpec, ModelProfile};
use crate::{Error, Nanos, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceId {
    GpuCompute,
    CpuPool,
    IntraLink,
    InterLink,
}

impl ResourceId {
    pub const ALL: [ResourceId; 4] = [
        ResourceId::GpuCompute,
        ResourceId::CpuPool,
        ResourceId::IntraLink,
        ResourceId::InterLink,
    ];

    pub fn is_link(self) -> bool {
        matches!(self, ResourceId::IntraLink | ResourceId::InterLink)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceId::GpuCompute => "gpu_compute",
            ResourceId::CpuPool => "cpu_pool",
            ResourceId::IntraLink => "intra_link",
            ResourceId::InterLink => "inter_link",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Compute,
    Compress,
    Decompress,
    Communicate,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Compress => "compress",
            EventKind::Decompress => "decompress",
            EventKind::Communicate => "communicate",
        }
    }
}

/// One lowered task of an option.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Step {
    pub kind: EventKind,
    pub resource: ResourceId,
    pub device: Option<Device>,
    pub routine: Option<Routine>,
    pub phase: Option<Phase>,
    pub duration: Nanos,
    pub message_size: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    /// Index of the tensor in backward order.
    pub tensor: usize,
    pub kind: EventKind,
    pub resource: ResourceId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<Device>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routine: Option<Routine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub start: Nanos,
    pub end: Nanos,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_size: Option<u64>,
}

impl Event {
    pub fn duration(&self) -> Nanos {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Timeline {
    pub tensor_ids: Vec<String>,
    /// Sorted by start, then resource, then tensor.
    pub events: Vec<Event>,
    /// When each tensor's last task finished.
    pub completion: Vec<Nanos>,
    pub f: Nanos,
    pub bubble_epsilon_ns: Nanos,
}

/// Iteration time: the end of the last event.
pub fn iteration_time(timeline: &Timeline) -> Nanos {
    timeline.f
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Drop every compress and decompress task, as if compression were free
    /// and ran off every simulated resource.
    pub free_compression: bool,
}

#[derive(Debug, Clone, Copy)]
enum Data {
    Plain {
        region: u64,
    },
    Packed {
        pieces: u64,
        piece_bytes: u64,
        piece_region: u64,
        region: u64,
    },
}

/// Lowers `option` for a tensor of `size` bytes into timed steps.
pub fn lower_option(
    size: u64,
    option: &CompressionOption,
    cluster: &ClusterSpec,
    gc: &GcAlgorithmSpec,
    opts: SimOptions,
) -> Result<Vec<Step>> {
    let incompatible = |reason: &str| Error::IncompatibleOption {
        option: option.to_string(),
        reason: reason.to_string(),
    };
    if option.pattern.is_hierarchical() && !cluster.supports_hierarchical() {
        return Err(incompatible(
            "hierarchical communication needs more than one GPU per machine",
        ));
    }
    let mut data = Data::Plain { region: size };
    let mut steps = Vec::with_capacity(option.tasks.len());
    for task in &option.tasks {
        match task.kind {
            TaskKind::Start | TaskKind::End => {}
            TaskKind::Comp => {
                let Data::Plain { region } = data else {
                    return Err(incompatible("compresses compressed data"));
                };
                let device = task.device.ok_or_else(|| incompatible("Comp without device"))?;
                data = Data::Packed {
                    pieces: 1,
                    piece_bytes: gc.compressed_size(region),
                    piece_region: region,
                    region,
                };
                if !opts.free_compression {
                    steps.push(compression_step(
                        EventKind::Compress,
                        device,
                        gc.compress_ns(device, region),
                        cluster,
                        option,
                    )?);
                }
            }
            TaskKind::Decomp => {
                let Data::Packed {
                    pieces,
                    piece_region,
                    region,
                    ..
                } = data
                else {
                    return Err(incompatible("decompresses uncompressed data"));
                };
                let device = task.device.ok_or_else(|| incompatible("Decomp without device"))?;
                data = Data::Plain { region };
                if !opts.free_compression {
                    let one = gc.curve(device, CurveKind::Decompress).eval(piece_region);
                    steps.push(compression_step(
                        EventKind::Decompress,
                        device,
                        one.saturating_mul(pieces),
                        cluster,
                        option,
                    )?);
                }
            }
            kind => {
                let routine = task.routine.ok_or_else(|| incompatible("missing routine"))?;
                let phase = task.phase.ok_or_else(|| incompatible("missing phase"))?;
                let (ctx, link) = phase_context(cluster, phase);
                let n = ctx.n as u64;
                let message = match data {
                    Data::Plain { region } => region,
                    Data::Packed {
                        pieces,
                        piece_bytes,
                        ..
                    } => pieces * piece_bytes,
                };
                let duration = comm_time(routine, message, &ctx);
                data = match data {
                    Data::Plain { region } => Data::Plain {
                        region: size_after(routine, region, &ctx),
                    },
                    Data::Packed {
                        pieces,
                        piece_bytes,
                        piece_region,
                        region,
                    } => match routine {
                        Routine::Alltoall => Data::Packed {
                            pieces: pieces * n,
                            piece_bytes: piece_bytes.div_ceil(n),
                            piece_region: piece_region.div_ceil(n),
                            region: region.div_ceil(n),
                        },
                        Routine::Gather => Data::Packed {
                            pieces: pieces * n,
                            piece_bytes,
                            piece_region,
                            region,
                        },
                        Routine::Allgather => Data::Packed {
                            pieces: pieces * n,
                            piece_bytes,
                            piece_region,
                            // a second step gathers shards; an indivisible
                            // scheme gathers whole tensors
                            region: if kind == TaskKind::Comm2Comp {
                                region * n
                            } else {
                                region
                            },
                        },
                        Routine::Broadcast => data,
                        Routine::Allreduce | Routine::ReduceScatter | Routine::Reduce => {
                            return Err(incompatible("compressed data needs a non-reducing routine"))
                        }
                    },
                };
                if ctx.n > 1 {
                    steps.push(Step {
                        kind: EventKind::Communicate,
                        resource: link,
                        device: None,
                        routine: Some(routine),
                        phase: Some(phase),
                        duration,
                        message_size: Some(message),
                    });
                }
            }
        }
    }
    if let Data::Packed { .. } = data {
        return Err(incompatible("ends with compressed data"));
    }
    Ok(steps)
}

fn compression_step(
    kind: EventKind,
    device: Device,
    duration: Nanos,
    cluster: &ClusterSpec,
    option: &CompressionOption,
) -> Result<Step> {
    let resource = match device {
        Device::Gpu => ResourceId::GpuCompute,
        Device::Cpu if cluster.cpu_slots_per_machine == 0 => {
            return Err(Error::IncompatibleOption {
                option: option.to_string(),
                reason: "the cluster has no CPU compression slots".into(),
            })
        }
        Device::Cpu => ResourceId::CpuPool,
    };
    Ok(Step {
        kind,
        resource,
        device: Some(device),
        routine: None,
        phase: None,
        duration,
        message_size: None,
    })
}

/// Participants, bandwidth and link of a communication phase. A flat phase
/// spans every GPU and runs over the inter-machine network when there is
/// more than one machine.
pub fn phase_context(cluster: &ClusterSpec, phase: Phase) -> (PhaseContext, ResourceId) {
    match phase {
        Phase::Flat if cluster.machines > 1 => (
            PhaseContext::new(cluster.total_gpus(), cluster.inter_bandwidth, phase),
            ResourceId::InterLink,
        ),
        Phase::Flat => (
            PhaseContext::new(cluster.total_gpus(), cluster.intra_bandwidth, phase),
            ResourceId::IntraLink,
        ),
        Phase::IntraFirst | Phase::IntraSecond => (
            PhaseContext::new(cluster.gpus_per_machine, cluster.intra_bandwidth, phase),
            ResourceId::IntraLink,
        ),
        Phase::Inter => (
            PhaseContext::new(cluster.machines, cluster.inter_bandwidth, phase),
            ResourceId::InterLink,
        ),
    }
}

/// Simulates strategies against fixed inputs, caching lowered options.
pub struct Simulator<'a> {
    pub profile: &'a ModelProfile,
    pub cluster: &'a ClusterSpec,
    pub gc: &'a GcAlgorithmSpec,
    pub table: &'a OptionTable,
    pub opts: SimOptions,
    lowered: Vec<Vec<Step>>,
    index: HashMap<(u64, OptionId), usize>,
    compute: Vec<Nanos>,
    engine: Engine,
    /// Assignment of the last run; the engine's snapshots and `current`
    /// belong to it.
    last: Vec<OptionId>,
    /// Lowered chain of every tensor under `last`.
    current: Vec<usize>,
    /// Tensors to snapshot at; all when `None`.
    checkpoints: Option<Vec<bool>>,
    checkpoint_list: Vec<usize>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        profile: &'a ModelProfile,
        cluster: &'a ClusterSpec,
        gc: &'a GcAlgorithmSpec,
        table: &'a OptionTable,
    ) -> Self {
        Self::with_options(profile, cluster, gc, table, SimOptions::default())
    }

    pub fn with_options(
        profile: &'a ModelProfile,
        cluster: &'a ClusterSpec,
        gc: &'a GcAlgorithmSpec,
        table: &'a OptionTable,
        opts: SimOptions,
    ) -> Self {
        Simulator {
            profile,
            cluster,
            gc,
            table,
            opts,
            lowered: Vec::new(),
            index: HashMap::new(),
            compute: profile.tensors.iter().map(|t| t.compute_ns).collect(),
            engine: Engine::default(),
            last: Vec::new(),
            current: Vec::new(),
            checkpoints: None,
            checkpoint_list: Vec::new(),
        }
    }

    /// Lowered steps of `option` on tensor `tensor`.
    pub fn steps(&mut self, tensor: usize, option: OptionId) -> Result<&[Step]> {
        let i = self.prepare(self.profile.tensors[tensor].size_bytes, option)?;
        Ok(&self.lowered[i])
    }

    fn prepare(&mut self, size: u64, option: OptionId) -> Result<usize> {
        if let Some(&i) = self.index.get(&(size, option)) {
            return Ok(i);
        }
        let opt = self
            .table
            .get(option)
            .ok_or_else(|| Error::MissingOption(format!("option {option}")))?;
        let steps = lower_option(size, opt, self.cluster, self.gc, self.opts)?;
        self.lowered.push(steps);
        self.index.insert((size, option), self.lowered.len() - 1);
        Ok(self.lowered.len() - 1)
    }

    /// Points `current` at the chains of `assignment`.
    fn load(&mut self, assignment: &[OptionId]) -> Result<()> {
        if assignment.len() != self.profile.len() {
            let missing = self
                .profile
                .tensors
                .get(assignment.len())
                .map_or_else(|| "(extra assignment)".to_string(), |t| t.id.clone());
            return Err(Error::MissingOption(missing));
        }
        let incremental = self.last.len() == assignment.len();
        if !incremental {
            self.current.clear();
            self.current.resize(assignment.len(), 0);
        }
        for (t, &o) in assignment.iter().enumerate() {
            if incremental && self.last[t] == o {
                continue;
            }
            match self.prepare(self.profile.tensors[t].size_bytes, o) {
                Ok(i) => self.current[t] = i,
                Err(e) => {
                    self.last.clear();
                    self.engine.snap_count = 0;
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// Restricts snapshots to runs that differ from earlier ones only in
    /// `tensors`. Snapshots cost time to take, so callers that know which
    /// assignments will change should say so.
    pub fn set_checkpoints(&mut self, tensors: &[usize]) {
        let mut mask = vec![false; self.profile.len()];
        for &t in tensors {
            mask[t] = true;
        }
        self.checkpoint_list = (0..mask.len()).filter(|&t| mask[t]).collect();
        self.checkpoints = Some(mask);
        self.engine.snap_count = 0;
    }

    /// Snapshot to resume from for `assignment`, if any.
    fn resume_point(&self, assignment: &[OptionId]) -> Option<usize> {
        if self.engine.snap_count == 0 || self.last.len() != assignment.len() {
            return None;
        }
        let first_diff = self
            .last
            .iter()
            .zip(assignment)
            .position(|(a, b)| a != b)
            .unwrap_or(assignment.len());
        let limit = first_diff.min(self.engine.snap_count - 1);
        match &self.checkpoints {
            None => Some(limit),
            Some(_) => {
                let i = self.checkpoint_list.partition_point(|&k| k <= limit);
                i.checked_sub(1).map(|i| self.checkpoint_list[i])
            }
        }
    }

    fn run(
        &mut self,
        assignment: &[OptionId],
        record: Option<&mut Vec<Event>>,
        bound: Option<Nanos>,
    ) -> Result<Option<Nanos>> {
        let resume = if record.is_some() {
            None
        } else {
            self.resume_point(assignment)
        };
        self.load(assignment)?;
        let chains = Chains {
            compute: &self.compute,
            lowered: &self.lowered,
            of: &self.current,
        };
        let f = self.engine.run(
            &chains,
            self.cluster.cpu_slots_per_machine,
            record,
            bound,
            resume,
            self.checkpoints.as_deref(),
        );
        self.last.clear();
        self.last.extend_from_slice(assignment);
        Ok(f)
    }

    /// Iteration time only; skips building the event list.
    pub fn iteration_time(&mut self, assignment: &[OptionId]) -> Result<Nanos> {
        Ok(self.run(assignment, None, None)?.expect("unbounded runs finish"))
    }

    /// Iteration time if it is below `bound`, otherwise `None`. Runs stop
    /// as soon as the clock reaches the bound.
    pub fn iteration_time_below(&mut self, assignment: &[OptionId], bound: Nanos) -> Result<Option<Nanos>> {
        self.run(assignment, None, Some(bound))
    }

    pub fn simulate(&mut self, assignment: &[OptionId]) -> Result<Timeline> {
        let mut events = Vec::new();
        self.run(assignment, Some(&mut events), None)?;
        let f = events.iter().map(|e| e.end).max().unwrap_or(0);
        events.sort_by_key(|e| (e.start, e.resource, e.tensor, e.end));
        let mut completion: Vec<Nanos> = vec![0; assignment.len()];
        for e in &events {
            completion[e.tensor] = completion[e.tensor].max(e.end);
        }
        Ok(Timeline {
            tensor_ids: self.profile.tensors.iter().map(|t| t.id.clone()).collect(),
            events,
            completion,
            f,
            bubble_epsilon_ns: self.cluster.bubble_epsilon_ns,
        })
    }
}

/// One-shot simulation of `assignment` (option per tensor, backward order).
pub fn simulate(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    gc: &GcAlgorithmSpec,
    table: &OptionTable,
    assignment: &[OptionId],
) -> Result<Timeline> {
    Simulator::new(profile, cluster, gc, table).simulate(assignment)
}

struct Chains<'s> {
    compute: &'s [Nanos],
    lowered: &'s [Vec<Step>],
    /// Index into `lowered` per tensor.
    of: &'s [usize],
}

impl Chains<'_> {
    fn len(&self) -> usize {
        self.compute.len()
    }

    fn steps(&self, tensor: u32) -> &[Step] {
        &self.lowered[self.of[tensor as usize]]
    }
}

/// Ready-queue key: enqueue time, then tensor, then job kind (compute
/// first), then stage.
type QueueKey = (Nanos, u32, u8, u32);

/// A running job: (end, tensor, stage, start).
type Running = (Nanos, u32, u32, Nanos);

#[derive(Default)]
struct State {
    now: Nanos,
    queues: [BinaryHeap<Reverse<QueueKey>>; 4],
    running: BinaryHeap<Reverse<Running>>,
    busy: [u32; 4],
    /// End time and tensor of the backward computation in progress.
    computing: Option<(Nanos, u32)>,
}

impl State {
    fn reset(&mut self) {
        self.now = 0;
        for q in &mut self.queues {
            q.clear();
        }
        self.running.clear();
        self.busy = [0; 4];
        self.computing = None;
    }

    fn copy_from(&mut self, other: &State) {
        self.now = other.now;
        for (q, o) in self.queues.iter_mut().zip(&other.queues) {
            q.clone_from(o);
        }
        self.running.clone_from(&other.running);
        self.busy = other.busy;
        self.computing = other.computing;
    }
}

/// The event loop. Before handling the completion of tensor `k`'s
/// computation the state may be saved as snapshot `k`; nothing about
/// tensors `k` and later has been decided at that point, so a run whose
/// options agree on tensors before `k` can resume from it.
#[derive(Default)]
struct Engine {
    state: State,
    snaps: Vec<State>,
    /// The last run got as far as the computation of tensor
    /// `snap_count - 1`; snapshots below that are valid for its chains.
    snap_count: usize,
}

impl Engine {
    fn run(
        &mut self,
        chains: &Chains<'_>,
        cpu_slots: u32,
        mut record: Option<&mut Vec<Event>>,
        bound: Option<Nanos>,
        resume: Option<usize>,
        checkpoints: Option<&[bool]>,
    ) -> Option<Nanos> {
        let below = |f: Nanos| bound.is_none_or(|b| f < b);
        if chains.len() == 0 {
            self.snap_count = 0;
            return Some(0).filter(|&f| below(f));
        }
        let capacity = [1, cpu_slots.max(1), 1, 1];
        let resource_of = |tensor: u32, stage: u32| -> ResourceId {
            if stage == 0 {
                ResourceId::GpuCompute
            } else {
                chains.steps(tensor)[stage as usize - 1].resource
            }
        };
        let duration_of = |tensor: u32, stage: u32| -> Nanos {
            if stage == 0 {
                chains.compute[tensor as usize]
            } else {
                chains.steps(tensor)[stage as usize - 1].duration
            }
        };
        let enqueue = |queues: &mut [BinaryHeap<Reverse<QueueKey>>; 4], now, tensor, stage| {
            let r = resource_of(tensor, stage);
            queues[r.index()].push(Reverse((now, tensor, (stage != 0) as u8, stage)));
        };

        let st = &mut self.state;
        let mut resumed = false;
        match resume {
            Some(k) => {
                debug_assert!(record.is_none() && k < self.snap_count);
                st.copy_from(&self.snaps[k]);
                self.snap_count = k + 1;
                resumed = true;
                if !below(st.now) {
                    return None;
                }
            }
            None => {
                st.reset();
                self.snap_count = 0;
                enqueue(&mut st.queues, 0, 0, 0);
            }
        }
        loop {
            if !resumed {
                for r in 0..4 {
                    while st.busy[r] < capacity[r] {
                        let Some(Reverse((_, tensor, _, stage))) = st.queues[r].pop() else {
                            break;
                        };
                        st.busy[r] += 1;
                        let end = st.now + duration_of(tensor, stage);
                        if stage == 0 {
                            st.computing = Some((end, tensor));
                        }
                        st.running.push(Reverse((end, tensor, stage, st.now)));
                    }
                }
                let Some(&Reverse((next, ..))) = st.running.peek() else {
                    break;
                };
                st.now = next;
                if !below(st.now) {
                    return None;
                }
                if let Some((end, k)) = st.computing {
                    let k = k as usize;
                    if end == st.now && checkpoints.is_none_or(|c| c[k]) {
                        if self.snaps.len() <= k {
                            self.snaps.resize_with(k + 1, State::default);
                        }
                        self.snaps[k].copy_from(st);
                    }
                    if end == st.now {
                        self.snap_count = k + 1;
                    }
                }
            }
            resumed = false;
            let now = st.now;
            while let Some(&Reverse((end, tensor, stage, start))) = st.running.peek() {
                if end != now {
                    break;
                }
                st.running.pop();
                let resource = resource_of(tensor, stage);
                st.busy[resource.index()] -= 1;
                if let Some(events) = record.as_deref_mut() {
                    let event = if stage == 0 {
                        Event {
                            tensor: tensor as usize,
                            kind: EventKind::Compute,
                            resource,
                            device: None,
                            routine: None,
                            phase: None,
                            start,
                            end,
                            message_size: None,
                        }
                    } else {
                        let s = &chains.steps(tensor)[stage as usize - 1];
                        Event {
                            tensor: tensor as usize,
                            kind: s.kind,
                            resource,
                            device: s.device,
                            routine: s.routine,
                            phase: s.phase,
                            start,
                            end,
                            message_size: s.message_size,
                        }
                    };
                    events.push(event);
                }
                if stage == 0 {
                    st.computing = None;
                    if (tensor as usize) + 1 < chains.len() {
                        enqueue(&mut st.queues, now, tensor + 1, 0);
                    }
                }
                if (stage as usize) < chains.steps(tensor).len() {
                    enqueue(&mut st.queues, now, tensor, stage + 1);
                }
            }
        }
        Some(st.now).filter(|&f| below(f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bubble {
    pub link: ResourceId,
    pub gap_start: Nanos,
    pub gap_end: Nanos,
    /// Tensor indices whose communication had fully finished when the gap
    /// opened.
    pub preceding: Vec<usize>,
}

/// Idle gaps longer than the bubble threshold between consecutive
/// communications on each link.
///
/// A tensor precedes a bubble when its last communication, on any link,
/// ended by the start of the gap. Predecessors are only recorded when the
/// gap waits on a tensor becoming ready to communicate: the event closing it
/// is that tensor's first communication, and at some instant inside the gap
/// every link is idle and every tensor that started communicating before the
/// gap has finished. Otherwise earlier traffic, or work it queued on a
/// device, still feeds the later communication and the set is empty.
pub fn detect_bubbles(timeline: &Timeline) -> Vec<Bubble> {
    let comms: Vec<&Event> = timeline
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Communicate)
        .collect();
    let mut last_comm_end: Vec<Option<Nanos>> = vec![None; timeline.tensor_ids.len()];
    let mut first_comm_start: Vec<Option<Nanos>> = vec![None; timeline.tensor_ids.len()];
    for e in &comms {
        let slot = &mut last_comm_end[e.tensor];
        *slot = Some(slot.map_or(e.end, |x| x.max(e.end)));
        let slot = &mut first_comm_start[e.tensor];
        *slot = Some(slot.map_or(e.start, |x| x.min(e.start)));
    }
    let busy = union(comms.iter().map(|e| (e.start, e.end)).collect());

    let mut out = Vec::new();
    for link in [ResourceId::IntraLink, ResourceId::InterLink] {
        let mut on_link: Vec<&Event> = comms.iter().copied().filter(|e| e.resource == link).collect();
        on_link.sort_by_key(|e| (e.start, e.end));
        for pair in on_link.windows(2) {
            let (gap_start, gap_end) = (pair[0].end, pair[1].start);
            if gap_end <= gap_start || gap_end - gap_start <= timeline.bubble_epsilon_ns {
                continue;
            }
            let settled = first_comm_start
                .iter()
                .zip(&timeline.completion)
                .filter(|(s, _)| s.is_some_and(|s| s <= gap_start))
                .map(|(_, &c)| c)
                .max()
                .unwrap_or(gap_start)
                .max(gap_start);
            let quiet = settled < gap_end && measure(&subtract(&[(settled, gap_end)], &busy)) > 0;
            let first = first_comm_start[pair[1].tensor] == Some(gap_end);
            let preceding = if quiet && first {
                last_comm_end
                    .iter()
                    .enumerate()
                    .filter(|(_, end)| end.is_some_and(|e| e <= gap_start))
                    .map(|(i, _)| i)
                    .collect()
            } else {
                Vec::new()
            };
            out.push(Bubble {
                link,
                gap_start,
                gap_end,
                preceding,
            });
        }
    }
    out
}

/// Union of the predecessors of every bubble, as tensor indices.
pub fn tensors_before_bubbles(timeline: &Timeline) -> BTreeSet<usize> {
    detect_bubbles(timeline)
        .into_iter()
        .flat_map(|b| b.preceding)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TensorOverhead {
    pub o_comm: Nanos,
    pub o_comp: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverheadReport {
    /// Communication time not overlapped by computation.
    pub o_comm: Nanos,
    /// Compression time not overlapped by computation or communication.
    pub o_comp: Nanos,
    pub per_tensor: Vec<TensorOverhead>,
}

pub fn overheads(timeline: &Timeline) -> OverheadReport {
    let spans = |pred: &dyn Fn(&Event) -> bool| -> Vec<(Nanos, Nanos)> {
        timeline
            .events
            .iter()
            .filter(|e| pred(e))
            .map(|e| (e.start, e.end))
            .collect()
    };
    let is_comp = |e: &Event| matches!(e.kind, EventKind::Compress | EventKind::Decompress);
    let compute = union(spans(&|e| e.kind == EventKind::Compute));
    let comm = union(spans(&|e| e.kind == EventKind::Communicate));
    let cover = union(compute.iter().chain(&comm).copied().collect());

    let per_tensor = (0..timeline.tensor_ids.len())
        .map(|t| {
            let mine_comm = union(spans(&|e| e.tensor == t && e.kind == EventKind::Communicate));
            let mine_comp = union(spans(&|e| e.tensor == t && is_comp(e)));
            TensorOverhead {
                o_comm: measure(&subtract(&mine_comm, &compute)),
                o_comp: measure(&subtract(&mine_comp, &cover)),
            }
        })
        .collect();
    OverheadReport {
        o_comm: measure(&subtract(&comm, &compute)),
        o_comp: measure(&subtract(&union(spans(&is_comp)), &cover)),
        per_tensor,
    }
}

/// Merges half-open intervals into a sorted disjoint list.
fn union(mut spans: Vec<(Nanos, Nanos)>) -> Vec<(Nanos, Nanos)> {
    spans.retain(|&(s, e)| e > s);
    spans.sort_unstable();
    let mut out: Vec<(Nanos, Nanos)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// `a \ b` for sorted disjoint lists.
fn subtract(a: &[(Nanos, Nanos)], b: &[(Nanos, Nanos)]) -> Vec<(Nanos, Nanos)> {
    let mut out = Vec::new();
    let mut j = 0;
    for &(s, e) in a {
        let mut cur = s;
        while j < b.len() && b[j].1 <= cur {
            j += 1;
        }
        let mut k = j;
        while cur < e {
            match b.get(k) {
                Some(&(bs, be)) if bs < e => {
                    if bs > cur {
                        out.push((cur, bs));
                    }
                    cur = cur.max(be);
                    k += 1;
                }
                _ => {
                    out.push((cur, e));
                    break;
                }
            }
        }
    }
    out
}

fn measure(spans: &[(Nanos, Nanos)]) -> Nanos {
    spans.iter().map(|(s, e)| e - s).sum()
}

/// The timeline in the trace-event JSON format, one thread per resource.
pub fn chrome_trace(timeline: &Timeline) -> Value {
    let mut events: Vec<Value> = ResourceId::ALL
        .iter()
        .map(|r| {
            json!({
                "name": "thread_name",
                "ph": "M",
                "pid": 0,
                "tid": r.index(),
                "args": {"name": r.as_str()},
            })
        })
        .collect();
    for e in &timeline.events {
        let id = &timeline.tensor_ids[e.tensor];
        let name = match e.routine {
            Some(r) => format!("{id} {r}"),
            None => format!("{id} {}", e.kind.as_str()),
        };
        let mut args = json!({"tensor": id, "kind": e.kind.as_str()});
        if let Some(p) = e.phase {
            args["phase"] = json!(p.as_str());
        }
        if let Some(d) = e.device {
            args["device"] = json!(d.as_str());
        }
        if let Some(m) = e.message_size {
            args["message_bytes"] = json!(m);
        }
        events.push(json!({
            "name": name,
            "cat": e.kind.as_str(),
            "ph": "X",
            "pid": 0,
            "tid": e.resource.index(),
            "ts": e.start as f64 / 1000.0,
            "dur": e.duration() as f64 / 1000.0,
            "args": args,
        }));
    }
    json!({"traceEvents": events, "displayTimeUnit": "ms"})
}

/// F, overheads and bubbles as one JSON record.
pub fn summary(timeline: &Timeline) -> Value {
    let o = overheads(timeline);
    let bubbles: Vec<Value> = detect_bubbles(timeline)
        .iter()
        .map(|b| {
            json!({
                "link": b.link.as_str(),
                "gap_start_ns": b.gap_start,
                "gap_end_ns": b.gap_end,
                "preceding_tensor_ids": b
                    .preceding
                    .iter()
                    .map(|&i| timeline.tensor_ids[i].as_str())
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "iteration_time_ns": timeline.f,
        "o_comm_ns": o.o_comm,
        "o_comp_ns": o.o_comp,
        "bubbles": bubbles,
    })
}
