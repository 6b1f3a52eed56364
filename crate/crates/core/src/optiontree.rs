//! The compression-option search space.
//!
//! A compression option is one Start→End path of action tasks describing how
//! a single gradient tensor is compressed, communicated and decompressed.
//! Paths are produced by a depth-first walk that only follows valid
//! connections between action tasks, places communication tasks in the
//! correct step of their scheme and pairs the two steps of every divisible
//! scheme.
//!
//! Communication happens in one of four patterns. Flat communication has a
//! single phase using either an indivisible scheme or a divisible one.
//! Hierarchical communication wraps an inter-machine phase (indivisible or
//! divisible) between the two steps of a divisible intra-machine scheme.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::costs::{Phase, Routine};
use crate::profile::{ClusterSpec, Device};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Start,
    Comp,
    Decomp,
    Comm,
    Comm1,
    Comm2,
    CommComp,
    Comm1Comp,
    Comm2Comp,
    End,
}

/// Order in which successors are explored; fixes the enumeration order.
const EXPLORE_ORDER: [TaskKind; 9] = [
    TaskKind::End,
    TaskKind::Comm,
    TaskKind::Comm1,
    TaskKind::Comm2,
    TaskKind::CommComp,
    TaskKind::Comm1Comp,
    TaskKind::Comm2Comp,
    TaskKind::Decomp,
    TaskKind::Comp,
];

impl TaskKind {
    pub fn is_comm(self) -> bool {
        matches!(
            self,
            TaskKind::Comm
                | TaskKind::Comm1
                | TaskKind::Comm2
                | TaskKind::CommComp
                | TaskKind::Comm1Comp
                | TaskKind::Comm2Comp
        )
    }

    /// Communication tasks that carry compressed data.
    pub fn is_compressed_comm(self) -> bool {
        matches!(
            self,
            TaskKind::CommComp | TaskKind::Comm1Comp | TaskKind::Comm2Comp
        )
    }

    fn step(self) -> Option<Step> {
        match self {
            TaskKind::Comm | TaskKind::CommComp => Some(Step::Indivisible),
            TaskKind::Comm1 | TaskKind::Comm1Comp => Some(Step::First),
            TaskKind::Comm2 | TaskKind::Comm2Comp => Some(Step::Second),
            _ => None,
        }
    }

    /// Routines a communication task may choose from, in table order.
    pub fn routine_space(self) -> &'static [Routine] {
        match self {
            TaskKind::Comm => &[Routine::Allreduce],
            TaskKind::Comm1 => &[Routine::ReduceScatter, Routine::Reduce],
            TaskKind::Comm2 => &[Routine::Allgather, Routine::Broadcast],
            TaskKind::CommComp => &[Routine::Allgather],
            TaskKind::Comm1Comp => &[Routine::Alltoall, Routine::Gather],
            TaskKind::Comm2Comp => &[Routine::Allgather, Routine::Broadcast],
            _ => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Start => "start",
            TaskKind::Comp => "comp",
            TaskKind::Decomp => "decomp",
            TaskKind::Comm => "comm",
            TaskKind::Comm1 => "comm1",
            TaskKind::Comm2 => "comm2",
            TaskKind::CommComp => "comm_comp",
            TaskKind::Comm1Comp => "comm1_comp",
            TaskKind::Comm2Comp => "comm2_comp",
            TaskKind::End => "end",
        }
    }
}

/// Valid direct connections between action tasks, before any phase or step
/// filtering. `End` is not listed; it follows any task once communication is
/// complete and the tensor is uncompressed.
pub fn base_connections(kind: TaskKind) -> &'static [TaskKind] {
    use TaskKind::*;
    match kind {
        Start => &[Comp, Comm, Comm1],
        Comp => &[CommComp, Comm1Comp, Comm2Comp],
        Decomp => &[Comp, Comm, Comm1, Comm2],
        Comm => &[Comp, Comm2],
        Comm1 => &[Comp, Comm, Comm1, Comm2],
        Comm2 => &[Comp, Comm2],
        CommComp => &[Decomp, Comm2Comp],
        Comm1Comp => &[Decomp, CommComp, Comm1Comp, Comm2Comp],
        Comm2Comp => &[Decomp, Comm2Comp],
        End => &[],
    }
}

/// Second-step routine required by a first-step routine.
pub fn paired_routine(first: Routine) -> Option<Routine> {
    match first {
        Routine::ReduceScatter | Routine::Alltoall => Some(Routine::Allgather),
        Routine::Reduce | Routine::Gather => Some(Routine::Broadcast),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Step {
    Indivisible,
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    FlatIndivisible,
    FlatDivisible,
    HierInterIndivisible,
    HierInterDivisible,
}

impl Pattern {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Pattern::HierInterIndivisible | Pattern::HierInterDivisible)
    }

    fn slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Pattern::FlatIndivisible => &[FlatFirst],
            Pattern::FlatDivisible => &[FlatFirst, FlatSecond],
            Pattern::HierInterIndivisible => &[HierIntraFirst, HierInterFirst, HierIntraSecond],
            Pattern::HierInterDivisible => &[
                HierIntraFirst,
                HierInterFirst,
                HierInterSecond,
                HierIntraSecond,
            ],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::FlatIndivisible => "flat_indivisible",
            Pattern::FlatDivisible => "flat_divisible",
            Pattern::HierInterIndivisible => "hier_inter_indivisible",
            Pattern::HierInterDivisible => "hier_inter_divisible",
        }
    }
}

/// The next communication step a path must take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Flat phase; indivisible scheme or the first step of a divisible one.
    FlatFirst,
    FlatSecond,
    HierIntraFirst,
    /// Inter-machine phase; indivisible scheme or first divisible step.
    HierInterFirst,
    HierInterSecond,
    HierIntraSecond,
    /// All communication done.
    Done,
}

impl Slot {
    fn phase(self) -> Option<Phase> {
        match self {
            Slot::FlatFirst | Slot::FlatSecond => Some(Phase::Flat),
            Slot::HierIntraFirst => Some(Phase::IntraFirst),
            Slot::HierInterFirst | Slot::HierInterSecond => Some(Phase::Inter),
            Slot::HierIntraSecond => Some(Phase::IntraSecond),
            Slot::Done => None,
        }
    }

    fn accepts(self, step: Step) -> bool {
        use Slot::*;
        match step {
            Step::Indivisible => matches!(self, FlatFirst | HierInterFirst),
            Step::First => matches!(self, FlatFirst | HierIntraFirst | HierInterFirst),
            Step::Second => matches!(self, FlatSecond | HierInterSecond | HierIntraSecond),
        }
    }

    fn after(self, step: Step) -> Slot {
        use Slot::*;
        match (self, step) {
            (FlatFirst, Step::Indivisible) => Done,
            (FlatFirst, _) => FlatSecond,
            (FlatSecond, _) => Done,
            (HierIntraFirst, _) => HierInterFirst,
            (HierInterFirst, Step::Indivisible) => HierIntraSecond,
            (HierInterFirst, _) => HierInterSecond,
            (HierInterSecond, _) => HierIntraSecond,
            (HierIntraSecond, _) | (Done, _) => Done,
        }
    }
}

/// Compression state and progress of a partially built path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathState {
    pub compressed: bool,
    pub next: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InconsistentState(pub String);

impl fmt::Display for InconsistentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Task kinds that may directly follow `task` in `state` (the state after
/// `task` executed): the base connection set filtered by step legality and
/// compression state.
pub fn valid_successors(
    task: TaskKind,
    state: PathState,
) -> Result<BTreeSet<TaskKind>, InconsistentState> {
    match task {
        TaskKind::Start if state.compressed => {
            return Err(InconsistentState("a path starts uncompressed".into()))
        }
        TaskKind::Start if matches!(state.next, Slot::Done) => {
            return Err(InconsistentState("a path starts before any communication".into()))
        }
        TaskKind::Comp if !state.compressed => {
            return Err(InconsistentState("state after Comp must be compressed".into()))
        }
        TaskKind::Decomp if state.compressed => {
            return Err(InconsistentState("state after Decomp must be uncompressed".into()))
        }
        TaskKind::End => return Ok(BTreeSet::new()),
        k if k.is_comm() && k.is_compressed_comm() != state.compressed => {
            return Err(InconsistentState(format!(
                "{} leaves the tensor {}",
                k.as_str(),
                if k.is_compressed_comm() { "compressed" } else { "uncompressed" }
            )))
        }
        _ => {}
    }
    let mut out: BTreeSet<TaskKind> = base_connections(task)
        .iter()
        .copied()
        .filter(|&next| admissible(next, state))
        .collect();
    if state.next == Slot::Done && !state.compressed {
        out.insert(TaskKind::End);
    }
    Ok(out)
}

fn admissible(next: TaskKind, state: PathState) -> bool {
    match next {
        // compression is only worth it ahead of communication
        TaskKind::Comp => !state.compressed && state.next != Slot::Done,
        TaskKind::Decomp => state.compressed,
        TaskKind::End => state.next == Slot::Done && !state.compressed,
        TaskKind::Start => false,
        k => {
            k.is_compressed_comm() == state.compressed
                && k.step().is_some_and(|s| state.next.accepts(s))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionTask {
    pub kind: TaskKind,
    /// Comp and Decomp only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<Device>,
    /// Communication tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routine: Option<Routine>,
    /// Communication tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl ActionTask {
    pub const START: ActionTask = ActionTask {
        kind: TaskKind::Start,
        device: None,
        routine: None,
        phase: None,
    };

    pub const END: ActionTask = ActionTask {
        kind: TaskKind::End,
        device: None,
        routine: None,
        phase: None,
    };

    pub fn comp(device: Device) -> Self {
        ActionTask {
            kind: TaskKind::Comp,
            device: Some(device),
            routine: None,
            phase: None,
        }
    }

    pub fn decomp(device: Device) -> Self {
        ActionTask {
            kind: TaskKind::Decomp,
            device: Some(device),
            routine: None,
            phase: None,
        }
    }

    pub fn comm(kind: TaskKind, routine: Routine, phase: Phase) -> Self {
        ActionTask {
            kind,
            device: None,
            routine: Some(routine),
            phase: Some(phase),
        }
    }
}

impl fmt::Display for ActionTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if let Some(d) = self.device {
            write!(f, "[{d}]")?;
        }
        if let (Some(r), Some(p)) = (self.routine, self.phase) {
            write!(f, "[{r}@{p}]")?;
        }
        Ok(())
    }
}

/// One Start→End path through the decision tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressionOption {
    pub tasks: Vec<ActionTask>,
    pub pattern: Pattern,
    /// Whether the tensor is compressed after each task.
    pub compressed: Vec<bool>,
}

impl CompressionOption {
    /// Builds an option from its task list, deriving the compression trace.
    pub fn new(tasks: Vec<ActionTask>, pattern: Pattern) -> Self {
        let mut state = false;
        let compressed = tasks
            .iter()
            .map(|t| {
                match t.kind {
                    TaskKind::Comp => state = true,
                    TaskKind::Decomp => state = false,
                    _ => {}
                }
                state
            })
            .collect();
        CompressionOption {
            tasks,
            pattern,
            compressed,
        }
    }

    pub fn is_compressed(&self) -> bool {
        self.tasks.iter().any(|t| t.kind == TaskKind::Comp)
    }

    /// Number of Comp and Decomp tasks.
    pub fn compression_task_count(&self) -> usize {
        self.tasks
            .iter()
            .filter(|t| matches!(t.kind, TaskKind::Comp | TaskKind::Decomp))
            .count()
    }

    pub fn compressions(&self) -> usize {
        self.tasks.iter().filter(|t| t.kind == TaskKind::Comp).count()
    }

    pub fn devices(&self) -> impl Iterator<Item = Device> + '_ {
        self.tasks.iter().filter_map(|t| t.device)
    }

    pub fn uses_only(&self, device: Device) -> bool {
        self.devices().all(|d| d == device)
    }

    /// The same path with every Comp and Decomp moved to `device`.
    pub fn on_device(&self, device: Device) -> CompressionOption {
        let tasks = self
            .tasks
            .iter()
            .map(|t| ActionTask {
                device: t.device.map(|_| device),
                ..*t
            })
            .collect();
        CompressionOption {
            tasks,
            pattern: self.pattern,
            compressed: self.compressed.clone(),
        }
    }

    /// The path with devices erased; options differing only in device
    /// placement share a shape.
    pub fn shape(&self) -> Vec<ActionTask> {
        self.tasks
            .iter()
            .map(|t| ActionTask { device: None, ..*t })
            .collect()
    }

    pub fn comm_tasks(&self) -> impl Iterator<Item = &ActionTask> {
        self.tasks.iter().filter(|t| t.kind.is_comm())
    }
}

impl fmt::Display for CompressionOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tasks.iter().enumerate() {
            if i > 0 {
                f.write_str(" > ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// User restrictions on the decision tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub allow_flat: bool,
    pub allow_hierarchical: bool,
    pub allow_compression: bool,
    /// Allow divisible schemes where a choice exists (flat and inter-machine
    /// phases). Intra-machine phases are always divisible.
    pub allow_divisible: bool,
    pub resources: Vec<Device>,
    pub max_compressions_per_tensor: Option<u32>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            allow_flat: true,
            allow_hierarchical: true,
            allow_compression: true,
            allow_divisible: true,
            resources: Device::ALL.to_vec(),
            max_compressions_per_tensor: None,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), crate::Error> {
        if !self.allow_flat && !self.allow_hierarchical {
            return Err(crate::Error::invalid(
                "tree config",
                "at least one of flat or hierarchical communication must be allowed",
            ));
        }
        if self.allow_compression && self.resources.is_empty() {
            return Err(crate::Error::invalid(
                "tree config",
                "compression needs at least one resource",
            ));
        }
        Ok(())
    }

    fn device_order(&self) -> Vec<Device> {
        Device::ALL
            .into_iter()
            .filter(|d| self.resources.contains(d))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OptionId(pub u32);

impl fmt::Display for OptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Interned options with stable ids in enumeration order.
#[derive(Debug, Clone, Default)]
pub struct OptionTable {
    options: Vec<CompressionOption>,
    index: HashMap<Vec<ActionTask>, OptionId>,
}

impl OptionTable {
    pub fn new(options: Vec<CompressionOption>) -> Self {
        let mut table = OptionTable::default();
        for opt in options {
            table.intern(opt);
        }
        table
    }

    pub fn intern(&mut self, option: CompressionOption) -> OptionId {
        if let Some(&id) = self.index.get(&option.tasks) {
            return id;
        }
        let id = OptionId(self.options.len() as u32);
        self.index.insert(option.tasks.clone(), id);
        self.options.push(option);
        id
    }

    pub fn get(&self, id: OptionId) -> Option<&CompressionOption> {
        self.options.get(id.0 as usize)
    }

    pub fn option(&self, id: OptionId) -> &CompressionOption {
        &self.options[id.0 as usize]
    }

    pub fn find(&self, tasks: &[ActionTask]) -> Option<OptionId> {
        self.index.get(tasks).copied()
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OptionId, &CompressionOption)> {
        self.options
            .iter()
            .enumerate()
            .map(|(i, o)| (OptionId(i as u32), o))
    }

    pub fn ids(&self) -> impl Iterator<Item = OptionId> {
        (0..self.options.len() as u32).map(OptionId)
    }

    /// First uncompressed option; tensors without an assignment use it.
    pub fn default_uncompressed(&self) -> Option<OptionId> {
        self.iter().find(|(_, o)| !o.is_compressed()).map(|(id, _)| id)
    }

    /// Distinct paths once device placement is ignored.
    pub fn shape_count(&self) -> usize {
        self.options
            .iter()
            .map(|o| o.shape())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Every option admitted by `cfg` on `cluster`, in deterministic
/// depth-first order: flat before hierarchical, uncompressed before
/// compressed, indivisible before divisible, GPU before CPU, and routines in
/// table order.
pub fn enumerate_options(cluster: &ClusterSpec, cfg: &TreeConfig) -> Vec<CompressionOption> {
    let mut walker = Walker {
        cfg,
        devices: cfg.device_order(),
        out: Vec::new(),
        tasks: vec![ActionTask::START],
    };
    let mut starts = Vec::new();
    if cfg.allow_flat {
        starts.push(Slot::FlatFirst);
    }
    if cfg.allow_hierarchical && cluster.supports_hierarchical() {
        starts.push(Slot::HierIntraFirst);
    }
    for next in starts {
        let state = PathState {
            compressed: false,
            next,
        };
        walker.walk(TaskKind::Start, state, Pairing::default(), 0);
    }
    walker.out
}

pub fn enumerate_table(cluster: &ClusterSpec, cfg: &TreeConfig) -> OptionTable {
    OptionTable::new(enumerate_options(cluster, cfg))
}

#[derive(Debug, Clone, Copy, Default)]
struct Pairing {
    intra: Option<Routine>,
    inter_or_flat: Option<Routine>,
    divisible_inter_or_flat: bool,
}

struct Walker<'a> {
    cfg: &'a TreeConfig,
    devices: Vec<Device>,
    out: Vec<CompressionOption>,
    tasks: Vec<ActionTask>,
}

impl Walker<'_> {
    fn walk(&mut self, last: TaskKind, state: PathState, pairing: Pairing, comps: u32) {
        let successors = valid_successors(last, state).expect("walker keeps states consistent");
        for kind in EXPLORE_ORDER {
            if !successors.contains(&kind) {
                continue;
            }
            match kind {
                TaskKind::End => {
                    self.tasks.push(ActionTask::END);
                    let pattern = pattern_of(&self.tasks, pairing);
                    self.out
                        .push(CompressionOption::new(self.tasks.clone(), pattern));
                    self.tasks.pop();
                }
                TaskKind::Comp => {
                    if !self.cfg.allow_compression
                        || self
                            .cfg
                            .max_compressions_per_tensor
                            .is_some_and(|m| comps >= m)
                    {
                        continue;
                    }
                    let next = PathState {
                        compressed: true,
                        ..state
                    };
                    for d in self.devices.clone() {
                        self.tasks.push(ActionTask::comp(d));
                        self.walk(kind, next, pairing, comps + 1);
                        self.tasks.pop();
                    }
                }
                TaskKind::Decomp => {
                    let next = PathState {
                        compressed: false,
                        ..state
                    };
                    for d in self.devices.clone() {
                        self.tasks.push(ActionTask::decomp(d));
                        self.walk(kind, next, pairing, comps);
                        self.tasks.pop();
                    }
                }
                k => self.walk_comm(k, state, pairing, comps),
            }
        }
    }

    fn walk_comm(&mut self, kind: TaskKind, state: PathState, pairing: Pairing, comps: u32) {
        let step = kind.step().expect("communication task");
        let slot = state.next;
        if !self.cfg.allow_divisible
            && step == Step::First
            && matches!(slot, Slot::FlatFirst | Slot::HierInterFirst)
        {
            return;
        }
        let phase = slot.phase().expect("communication needs a phase");
        let next = PathState {
            compressed: state.compressed,
            next: slot.after(step),
        };
        for &routine in kind.routine_space() {
            let mut p = pairing;
            match (step, slot) {
                (Step::First, Slot::HierIntraFirst) => p.intra = Some(routine),
                (Step::First, _) => {
                    p.inter_or_flat = Some(routine);
                    p.divisible_inter_or_flat = true;
                }
                (Step::Second, Slot::HierIntraSecond) => {
                    if p.intra.and_then(paired_routine) != Some(routine) {
                        continue;
                    }
                }
                (Step::Second, _) => {
                    if p.inter_or_flat.and_then(paired_routine) != Some(routine) {
                        continue;
                    }
                }
                (Step::Indivisible, _) => {}
            }
            self.tasks.push(ActionTask::comm(kind, routine, phase));
            self.walk(kind, next, p, comps);
            self.tasks.pop();
        }
    }
}

fn pattern_of(tasks: &[ActionTask], pairing: Pairing) -> Pattern {
    let hierarchical = tasks.iter().any(|t| t.phase == Some(Phase::IntraFirst));
    match (hierarchical, pairing.divisible_inter_or_flat) {
        (false, false) => Pattern::FlatIndivisible,
        (false, true) => Pattern::FlatDivisible,
        (true, false) => Pattern::HierInterIndivisible,
        (true, true) => Pattern::HierInterDivisible,
    }
}

/// Options whose every Comp and Decomp runs on the GPU, excluding
/// uncompressed options. Input order is preserved.
pub fn gpu_only_options(table: &OptionTable, ids: &[OptionId]) -> Vec<OptionId> {
    ids.iter()
        .copied()
        .filter(|&id| {
            let o = table.option(id);
            o.is_compressed() && o.uses_only(Device::Gpu)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Path must start with Start, end with End, and carry well-formed tasks.
    Structure,
    /// Consecutive tasks must be valid connections.
    Connection,
    /// Communication tasks must sit in the correct step and phase.
    Step,
    /// First and second steps of a divisible scheme must pair.
    Pairing,
    /// Compressed data never enters an uncompressed-data routine and vice versa.
    CompressedComm,
    /// No compression of compressed data, no decompression of uncompressed data.
    CompressionState,
    /// The path ends with the full tensor uncompressed.
    FinalState,
    /// The recorded compression trace disagrees with the task list.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub position: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at task {}: {}", self.rule, self.position, self.message)
    }
}

/// Checks an option against every pruning rule, independently of the
/// enumeration walk. Returns all violations found; empty means valid.
pub fn validate_option(opt: &CompressionOption) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |rule, position, message: String| {
        v.push(Violation {
            rule,
            position,
            message,
        })
    };
    let tasks = &opt.tasks;
    if tasks.first().map(|t| t.kind) != Some(TaskKind::Start) {
        push(Rule::Structure, 0, "path must begin with Start".into());
    }
    if tasks.last().map(|t| t.kind) != Some(TaskKind::End) {
        push(Rule::Structure, tasks.len().saturating_sub(1), "path must finish with End".into());
    }

    let slots = opt.pattern.slots();
    let mut slot_iter = slots.iter().copied();
    let mut compressed = false;
    let mut first_routines: HashMap<Phase, Routine> = HashMap::new();
    let mut comms_seen = 0usize;

    for (i, t) in tasks.iter().enumerate() {
        if i > 0 && (t.kind == TaskKind::Start) {
            push(Rule::Structure, i, "Start inside a path".into());
        }
        if i + 1 < tasks.len() && t.kind == TaskKind::End {
            push(Rule::Structure, i, "End inside a path".into());
        }
        if i > 0 {
            let prev = tasks[i - 1].kind;
            let ok = base_connections(prev).contains(&t.kind) || t.kind == TaskKind::End;
            if !ok {
                push(
                    Rule::Connection,
                    i,
                    format!("{} cannot follow {}", t.kind.as_str(), prev.as_str()),
                );
            }
        }
        match t.kind {
            TaskKind::Comp | TaskKind::Decomp => {
                if t.device.is_none() {
                    push(Rule::Structure, i, "compression task without a device".into());
                }
                if t.routine.is_some() || t.phase.is_some() {
                    push(Rule::Structure, i, "compression task with a routine".into());
                }
                if t.kind == TaskKind::Comp {
                    if compressed {
                        push(
                            Rule::CompressionState,
                            i,
                            "tensor is already compressed and cannot be compressed again".into(),
                        );
                    }
                    if comms_seen == slots.len() {
                        push(
                            Rule::Connection,
                            i,
                            "compression after the last communication".into(),
                        );
                    }
                    compressed = true;
                } else {
                    if !compressed {
                        push(
                            Rule::CompressionState,
                            i,
                            "cannot decompress an uncompressed tensor".into(),
                        );
                    }
                    compressed = false;
                }
            }
            k if k.is_comm() => {
                if k.is_compressed_comm() != compressed {
                    let msg = if compressed {
                        format!(
                            "compressed data cannot use {} ({})",
                            t.routine.map_or("?", |r| r.as_str()),
                            k.as_str()
                        )
                    } else {
                        format!("{} expects compressed data", k.as_str())
                    };
                    push(Rule::CompressedComm, i, msg);
                }
                let Some(routine) = t.routine else {
                    push(Rule::Structure, i, "communication task without a routine".into());
                    comms_seen += 1;
                    continue;
                };
                if !k.routine_space().contains(&routine) {
                    push(
                        Rule::Structure,
                        i,
                        format!("{routine} is outside the search space of {}", k.as_str()),
                    );
                }
                let step = k.step().expect("communication task");
                match slot_iter.next() {
                    None => push(
                        Rule::Step,
                        i,
                        format!("more communication steps than {} allows", opt.pattern.as_str()),
                    ),
                    Some(slot) => {
                        if !slot.accepts(step) || !step_matches_pattern(opt.pattern, slot, step) {
                            push(
                                Rule::Step,
                                i,
                                format!("{} is not valid as step {:?}", k.as_str(), slot),
                            );
                        }
                        if t.phase != slot.phase() {
                            push(
                                Rule::Step,
                                i,
                                format!(
                                    "phase {} where {} was expected",
                                    t.phase.map_or("none", |p| p.as_str()),
                                    slot.phase().map_or("none", |p| p.as_str())
                                ),
                            );
                        }
                        let group = match slot.phase() {
                            Some(Phase::IntraFirst | Phase::IntraSecond) => Phase::IntraFirst,
                            Some(p) => p,
                            None => Phase::Flat,
                        };
                        match step {
                            Step::First => {
                                first_routines.insert(group, routine);
                            }
                            Step::Second => {
                                let expected =
                                    first_routines.get(&group).copied().and_then(paired_routine);
                                if expected != Some(routine) {
                                    push(
                                        Rule::Pairing,
                                        i,
                                        format!(
                                            "{routine} does not pair with first step {}",
                                            first_routines
                                                .get(&group)
                                                .map_or("(none)", |r| r.as_str())
                                        ),
                                    );
                                }
                            }
                            Step::Indivisible => {}
                        }
                    }
                }
                comms_seen += 1;
            }
            _ => {}
        }
        if opt.compressed.get(i).copied() != Some(compressed) {
            push(Rule::Trace, i, "compression trace mismatch".into());
        }
    }
    if slot_iter.next().is_some() {
        push(
            Rule::Step,
            tasks.len().saturating_sub(1),
            format!("missing communication steps for {}", opt.pattern.as_str()),
        );
    }
    if compressed {
        push(
            Rule::FinalState,
            tasks.len().saturating_sub(1),
            "path ends with compressed data".into(),
        );
    }
    if opt.compressed.len() != tasks.len() {
        push(Rule::Trace, tasks.len(), "compression trace length mismatch".into());
    }
    v
}

fn step_matches_pattern(pattern: Pattern, slot: Slot, step: Step) -> bool {
    // the slot list alone cannot tell an indivisible first slot from a
    // divisible one
    match (pattern, slot) {
        (Pattern::FlatIndivisible, Slot::FlatFirst)
        | (Pattern::HierInterIndivisible, Slot::HierInterFirst) => step == Step::Indivisible,
        (Pattern::FlatDivisible, Slot::FlatFirst)
        | (Pattern::HierInterDivisible, Slot::HierInterFirst) => step == Step::First,
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::ClusterSpec;
    use TaskKind::*;

    fn hier_cluster() -> ClusterSpec {
        ClusterSpec {
            gpus_per_machine: 8,
            ..ClusterSpec::flat(8, 12_500_000_000)
        }
    }

    fn kinds(set: &[TaskKind]) -> BTreeSet<TaskKind> {
        set.iter().copied().collect()
    }

    #[test]
    fn start_successors() {
        let s = valid_successors(
            Start,
            PathState {
                compressed: false,
                next: Slot::FlatFirst,
            },
        )
        .unwrap();
        assert_eq!(s, kinds(&[Comp, Comm, Comm1]));
    }

    #[test]
    fn comp_connections() {
        assert_eq!(kinds(base_connections(Comp)), kinds(&[CommComp, Comm1Comp, Comm2Comp]));
        let flat = PathState {
            compressed: true,
            next: Slot::FlatFirst,
        };
        assert_eq!(valid_successors(Comp, flat).unwrap(), kinds(&[CommComp, Comm1Comp]));
        let second = PathState {
            compressed: true,
            next: Slot::FlatSecond,
        };
        assert_eq!(valid_successors(Comp, second).unwrap(), kinds(&[Comm2Comp]));
    }

    #[test]
    fn flat_special_cases() {
        let done_c = PathState {
            compressed: true,
            next: Slot::Done,
        };
        let done_u = PathState {
            compressed: false,
            next: Slot::Done,
        };
        assert_eq!(valid_successors(CommComp, done_c).unwrap(), kinds(&[Decomp]));
        assert_eq!(valid_successors(Comm2Comp, done_c).unwrap(), kinds(&[Decomp]));
        assert_eq!(valid_successors(Comm, done_u).unwrap(), kinds(&[End]));
        assert_eq!(valid_successors(Comm2, done_u).unwrap(), kinds(&[End]));
        let second_u = PathState {
            compressed: false,
            next: Slot::FlatSecond,
        };
        let second_c = PathState {
            compressed: true,
            next: Slot::FlatSecond,
        };
        assert_eq!(valid_successors(Comm1, second_u).unwrap(), kinds(&[Comp, Comm2]));
        assert_eq!(
            valid_successors(Comm1Comp, second_c).unwrap(),
            kinds(&[Decomp, Comm2Comp])
        );
    }

    #[test]
    fn hierarchical_connections() {
        // inter Allreduce may hand over to the intra second step or compress first
        let s = PathState {
            compressed: false,
            next: Slot::HierIntraSecond,
        };
        assert_eq!(valid_successors(Comm, s).unwrap(), kinds(&[Comp, Comm2]));
        let s = PathState {
            compressed: true,
            next: Slot::HierIntraSecond,
        };
        assert_eq!(valid_successors(CommComp, s).unwrap(), kinds(&[Decomp, Comm2Comp]));
    }

    #[test]
    fn inconsistent_states() {
        let bad = PathState {
            compressed: true,
            next: Slot::FlatFirst,
        };
        assert!(valid_successors(Start, bad).is_err());
        assert!(valid_successors(Comm, bad).is_err());
        let bad = PathState {
            compressed: false,
            next: Slot::FlatFirst,
        };
        assert!(valid_successors(Comp, bad).is_err());
    }

    #[test]
    fn flat_uncompressed_has_three_options() {
        let cfg = TreeConfig {
            allow_hierarchical: false,
            allow_compression: false,
            ..TreeConfig::default()
        };
        let opts = enumerate_options(&hier_cluster(), &cfg);
        let rendered: Vec<String> = opts.iter().map(|o| o.to_string()).collect();
        assert_eq!(
            rendered,
            [
                "start > comm[allreduce@flat] > end",
                "start > comm1[reduce_scatter@flat] > comm2[allgather@flat] > end",
                "start > comm1[reduce@flat] > comm2[broadcast@flat] > end",
            ]
        );
    }

    #[test]
    fn flat_indivisible_single_resource() {
        let cfg = TreeConfig {
            allow_hierarchical: false,
            allow_divisible: false,
            resources: vec![Device::Gpu],
            ..TreeConfig::default()
        };
        let opts = enumerate_options(&hier_cluster(), &cfg);
        let rendered: Vec<String> = opts.iter().map(|o| o.to_string()).collect();
        assert_eq!(
            rendered,
            [
                "start > comm[allreduce@flat] > end",
                "start > comp[gpu] > comm_comp[allgather@flat] > decomp[gpu] > end",
            ]
        );
        let both = TreeConfig {
            resources: Device::ALL.to_vec(),
            ..cfg
        };
        // one uncompressed path plus 2 x 2 device placements
        assert_eq!(enumerate_options(&hier_cluster(), &both).len(), 5);
    }

    #[test]
    fn full_tree_count() {
        let table = enumerate_table(&hier_cluster(), &TreeConfig::default());
        assert_eq!(table.len(), 4341);
        assert_eq!(table.shape_count(), 174);
    }

    #[test]
    fn hierarchical_needs_multiple_gpus() {
        let opts = enumerate_options(&ClusterSpec::flat(8, 1), &TreeConfig::default());
        assert!(opts.iter().all(|o| !o.pattern.is_hierarchical()));
        assert_eq!(opts.len(), 63);
    }

    #[test]
    fn max_compressions() {
        let cfg = TreeConfig {
            allow_hierarchical: false,
            max_compressions_per_tensor: Some(1),
            resources: vec![Device::Gpu],
            ..TreeConfig::default()
        };
        let opts = enumerate_options(&hier_cluster(), &cfg);
        assert!(opts.iter().all(|o| o.compressions() <= 1));
        // 12 flat shapes minus the two that recompress
        assert_eq!(opts.len(), 10);
    }

    fn gpu_ag() -> Vec<ActionTask> {
        vec![
            ActionTask::START,
            ActionTask::comp(Device::Gpu),
            ActionTask::comm(CommComp, Routine::Allgather, Phase::Flat),
            ActionTask::decomp(Device::Gpu),
            ActionTask::END,
        ]
    }

    #[test]
    fn validate_examples() {
        let ok = CompressionOption::new(gpu_ag(), Pattern::FlatIndivisible);
        assert!(validate_option(&ok).is_empty(), "{:?}", validate_option(&ok));

        let allreduce_compressed = CompressionOption::new(
            vec![
                ActionTask::START,
                ActionTask::comp(Device::Gpu),
                ActionTask::comm(Comm, Routine::Allreduce, Phase::Flat),
                ActionTask::END,
            ],
            Pattern::FlatIndivisible,
        );
        let v = validate_option(&allreduce_compressed);
        assert!(v
            .iter()
            .any(|x| x.rule == Rule::CompressedComm && x.position == 2));

        let double = CompressionOption::new(
            vec![
                ActionTask::START,
                ActionTask::comp(Device::Gpu),
                ActionTask::comp(Device::Cpu),
                ActionTask::comm(CommComp, Routine::Allgather, Phase::Flat),
                ActionTask::decomp(Device::Gpu),
                ActionTask::END,
            ],
            Pattern::FlatIndivisible,
        );
        let v = validate_option(&double);
        assert!(v
            .iter()
            .any(|x| x.rule == Rule::CompressionState && x.position == 2));
    }

    #[test]
    fn validate_pairing_and_steps() {
        let mismatched = CompressionOption::new(
            vec![
                ActionTask::START,
                ActionTask::comp(Device::Gpu),
                ActionTask::comm(Comm1Comp, Routine::Alltoall, Phase::Flat),
                ActionTask::comm(Comm2Comp, Routine::Broadcast, Phase::Flat),
                ActionTask::decomp(Device::Gpu),
                ActionTask::END,
            ],
            Pattern::FlatDivisible,
        );
        assert!(validate_option(&mismatched)
            .iter()
            .any(|x| x.rule == Rule::Pairing));

        let wrong_step = CompressionOption::new(
            vec![
                ActionTask::START,
                ActionTask::comm(Comm2, Routine::Allgather, Phase::Flat),
                ActionTask::END,
            ],
            Pattern::FlatIndivisible,
        );
        assert!(validate_option(&wrong_step).iter().any(|x| x.rule == Rule::Step));

        let unfinished = CompressionOption::new(
            vec![
                ActionTask::START,
                ActionTask::comp(Device::Gpu),
                ActionTask::comm(CommComp, Routine::Allgather, Phase::Flat),
                ActionTask::END,
            ],
            Pattern::FlatIndivisible,
        );
        assert!(validate_option(&unfinished)
            .iter()
            .any(|x| x.rule == Rule::FinalState));
    }

    #[test]
    fn gpu_only_filter() {
        let table = enumerate_table(
            &hier_cluster(),
            &TreeConfig {
                allow_hierarchical: false,
                allow_divisible: false,
                ..TreeConfig::default()
            },
        );
        let ids: Vec<_> = table.ids().collect();
        let gpu = gpu_only_options(&table, &ids);
        assert_eq!(gpu.len(), 1);
        assert_eq!(table.option(gpu[0]).tasks, gpu_ag());

        let uncompressed: Vec<_> = table
            .iter()
            .filter(|(_, o)| !o.is_compressed())
            .map(|(id, _)| id)
            .collect();
        assert!(gpu_only_options(&table, &uncompressed).is_empty());
    }

    #[test]
    fn gpu_only_preserves_order() {
        let table = enumerate_table(
            &hier_cluster(),
            &TreeConfig {
                allow_hierarchical: false,
                ..TreeConfig::default()
            },
        );
        let ids: Vec<_> = table.ids().take(10).collect();
        let gpu = gpu_only_options(&table, &ids);
        let expected: Vec<_> = ids
            .iter()
            .copied()
            .filter(|&id| table.option(id).is_compressed() && table.option(id).uses_only(Device::Gpu))
            .collect();
        assert_eq!(gpu, expected);
        assert!(gpu.windows(2).all(|w| w[0] < w[1]));
    }
}
