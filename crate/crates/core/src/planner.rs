//! Strategy selection: greedy GPU compression, optimal CPU offloading,
//! the free-compression bound and an exhaustive oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::optiontree::{CompressionOption, OptionId, OptionTable, TreeConfig};
use crate::profile::{ClusterSpec, Device, GcAlgorithmSpec, ModelProfile, SCHEMA_VERSION};
use crate::sim::{tensors_before_bubbles, EventKind, SimOptions, Simulator, Step};
use crate::{Error, Nanos, Result};

pub const DEFAULT_BRUTE_FORCE_CAP: u128 = 1_000_000;
pub const DEFAULT_OFFLOAD_CAP: u128 = 100_000;

/// Tensor indices grouped by size, largest first. Within a group tensors
/// closer to the output layer come first.
pub fn group_and_order(profile: &ModelProfile) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<std::cmp::Reverse<u64>, Vec<usize>> = BTreeMap::new();
    for (i, t) in profile.tensors.iter().enumerate() {
        groups.entry(std::cmp::Reverse(t.size_bytes)).or_default().push(i);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|&a, &b| {
                let (x, y) = (&profile.tensors[a], &profile.tensors[b]);
                (x.layer_distance, x.backward_index, &x.id).cmp(&(y.layer_distance, y.backward_index, &y.id))
            });
            g
        })
        .collect()
}

/// One option per tensor, in backward order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategy {
    pub options: Vec<OptionId>,
    /// How each assignment came about.
    pub notes: Vec<String>,
}

impl Strategy {
    pub fn uniform(len: usize, option: OptionId, note: &str) -> Self {
        Strategy {
            options: vec![option; len],
            notes: vec![note.to_string(); len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub stage: String,
    pub tensors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<OptionId>,
    pub f_ns: Nanos,
}

/// Total compression tasks of a strategy, the secondary tie-break.
fn compression_tasks(table: &OptionTable, options: &[OptionId]) -> usize {
    options
        .iter()
        .map(|&o| table.option(o).compression_task_count())
        .sum()
}

/// A candidate evaluated by [`select_best`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scored {
    pub option: OptionId,
    pub f: Nanos,
    pub compression_tasks: usize,
}

/// Argmin over candidates by iteration time, preferring the incumbent, then
/// fewer compression tasks, then the lower option id.
pub fn select_best(incumbent: OptionId, candidates: &[Scored]) -> Option<Scored> {
    candidates
        .iter()
        .copied()
        .min_by_key(|c| (c.f, c.option != incumbent, c.compression_tasks, c.option))
}

/// Shared state of one planning run.
pub struct Planner<'a> {
    pub sim: Simulator<'a>,
    pub table: &'a OptionTable,
    pub baseline: OptionId,
    ordered: HashMap<u64, Vec<OptionId>>,
    /// Simulations run so far.
    pub evaluations: u64,
}

impl<'a> Planner<'a> {
    pub fn new(
        profile: &'a ModelProfile,
        cluster: &'a ClusterSpec,
        gc: &'a GcAlgorithmSpec,
        table: &'a OptionTable,
    ) -> Result<Self> {
        if profile.is_empty() {
            return Err(Error::invalid("model profile", "no tensors to plan"));
        }
        let baseline = table.default_uncompressed().ok_or_else(|| {
            Error::invalid("option universe", "needs at least one uncompressed option")
        })?;
        Ok(Planner {
            sim: Simulator::new(profile, cluster, gc, table),
            table,
            baseline,
            ordered: HashMap::new(),
            evaluations: 0,
        })
    }

    fn profile(&self) -> &'a ModelProfile {
        self.sim.profile
    }

    pub fn evaluate(&mut self, options: &[OptionId]) -> Result<Nanos> {
        self.evaluations += 1;
        self.sim.iteration_time(options)
    }

    fn evaluate_below(&mut self, options: &[OptionId], bound: Nanos) -> Result<Option<Nanos>> {
        self.evaluations += 1;
        self.sim.iteration_time_below(options, bound)
    }

    pub fn baseline_strategy(&self) -> Strategy {
        Strategy::uniform(self.profile().len(), self.baseline, "uncompressed")
    }

    /// GPU compression candidates for `tensor` in tie-break order, with
    /// options that lower to identical steps collapsed onto the first.
    fn gpu_candidates(&mut self, tensor: usize) -> Result<Vec<OptionId>> {
        let size = self.profile().tensors[tensor].size_bytes;
        if let Some(c) = self.ordered.get(&size) {
            return Ok(c.clone());
        }
        let all: Vec<OptionId> = self.table.ids().collect();
        let mut gpu = crate::optiontree::gpu_only_options(self.table, &all);
        gpu.sort_by_key(|&o| (self.table.option(o).compression_task_count(), o));
        let mut seen: HashSet<Vec<Step>> = HashSet::new();
        let mut out = Vec::new();
        for o in gpu {
            let steps = match self.sim.steps(tensor, o) {
                Ok(s) => s.to_vec(),
                Err(Error::IncompatibleOption { .. }) => continue,
                Err(e) => return Err(e),
            };
            if seen.insert(steps) {
                out.push(o);
            }
        }
        self.ordered.insert(size, out.clone());
        Ok(out)
    }

    /// The best option for `tensor` among the incumbent and `candidates`
    /// (tried in tie-break order), holding every other assignment fixed.
    /// Returns the chosen option and its iteration time.
    pub fn get_best_option(
        &mut self,
        options: &mut [OptionId],
        f_incumbent: Nanos,
        tensor: usize,
        candidates: &[OptionId],
    ) -> Result<(OptionId, Nanos)> {
        let incumbent = options[tensor];
        let mut best = (incumbent, f_incumbent);
        for &c in candidates {
            if c == incumbent {
                continue;
            }
            options[tensor] = c;
            if let Some(f) = self.evaluate_below(options, best.1)? {
                best = (c, f);
            }
        }
        options[tensor] = best.0;
        Ok(best)
    }

    /// Greedy GPU compression over size groups, skipping uncompressed
    /// tensors whose communication finishes before a bubble.
    pub fn plan_gpu(&mut self, log: &mut Vec<Decision>) -> Result<(Strategy, Nanos)> {
        let mut strategy = self.baseline_strategy();
        let mut f = self.evaluate(&strategy.options)?;
        let mut removed = BTreeSet::new();
        self.remove(&strategy.options, &mut removed, f, log)?;
        for group in group_and_order(self.profile()) {
            for tensor in group {
                if removed.contains(&tensor) {
                    continue;
                }
                let candidates = self.gpu_candidates(tensor)?;
                self.sim.set_checkpoints(&[tensor]);
                let before = f;
                let (choice, f_new) =
                    self.get_best_option(&mut strategy.options, f, tensor, &candidates)?;
                if f_new < before {
                    f = f_new;
                    strategy.notes[tensor] = "gpu compression".to_string();
                    log.push(Decision {
                        stage: "gpu".into(),
                        tensors: vec![self.profile().tensors[tensor].id.clone()],
                        option: Some(choice),
                        f_ns: f,
                    });
                    self.remove(&strategy.options, &mut removed, f, log)?;
                }
            }
        }
        Ok((strategy, f))
    }

    fn remove(
        &mut self,
        options: &[OptionId],
        removed: &mut BTreeSet<usize>,
        f: Nanos,
        log: &mut Vec<Decision>,
    ) -> Result<()> {
        let timeline = self.sim.simulate(options)?;
        let fresh: Vec<usize> = tensors_before_bubbles(&timeline)
            .into_iter()
            .filter(|&t| !self.table.option(options[t]).is_compressed() && removed.insert(t))
            .collect();
        if !fresh.is_empty() {
            log.push(Decision {
                stage: "remove".into(),
                tensors: fresh
                    .iter()
                    .map(|&t| self.profile().tensors[t].id.clone())
                    .collect(),
                option: None,
                f_ns: f,
            });
        }
        Ok(())
    }

    /// Offload groups: tensors compressed purely on the GPU whose option has
    /// a CPU twin, grouped by (size, option) and ordered by readiness.
    pub fn offload_groups(&mut self, options: &[OptionId]) -> Result<Vec<OffloadGroup>> {
        let timeline = self.sim.simulate(options)?;
        let mut ready = vec![0; options.len()];
        for e in &timeline.events {
            if e.kind == EventKind::Compute {
                ready[e.tensor] = e.end;
            }
        }
        let mut groups: BTreeMap<(std::cmp::Reverse<u64>, OptionId), OffloadGroup> = BTreeMap::new();
        for (t, &o) in options.iter().enumerate() {
            let opt = self.table.option(o);
            if !opt.is_compressed() || !opt.uses_only(Device::Gpu) {
                continue;
            }
            let Some(cpu) = self.table.find(&opt.on_device(Device::Cpu).tasks) else {
                continue;
            };
            let size = self.profile().tensors[t].size_bytes;
            groups
                .entry((std::cmp::Reverse(size), o))
                .or_insert_with(|| OffloadGroup {
                    size_bytes: size,
                    gpu_option: o,
                    cpu_option: cpu,
                    members: Vec::new(),
                })
                .members
                .push(t);
        }
        let mut out: Vec<OffloadGroup> = groups.into_values().collect();
        for g in &mut out {
            g.members.sort_by_key(|&t| (ready[t], t));
        }
        Ok(out)
    }

    /// Exhaustive search over offload vectors: for every group, offload the
    /// compression of its first `u_i` members to the CPU.
    pub fn offload_cpu(&mut self, strategy: &Strategy, cap: u128) -> Result<OffloadOutcome> {
        let groups = self.offload_groups(&strategy.options)?;
        let needed = groups
            .iter()
            .try_fold(1u128, |acc, g| acc.checked_mul(g.members.len() as u128 + 1))
            .unwrap_or(u128::MAX);
        if needed > cap {
            return Err(Error::CapExceeded { needed, cap });
        }
        let members: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
        self.sim.set_checkpoints(&members);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&i| (groups[i].members.iter().min().copied(), i));
        let mut u = vec![0usize; groups.len()];
        let mut best: Option<(Nanos, usize, Vec<usize>)> = None;
        let mut evaluations = 0u64;
        let mut options = strategy.options.clone();
        loop {
            apply_offload(&groups, &u, &strategy.options, &mut options);
            evaluations += 1;
            let total: usize = u.iter().sum();
            let f = match &best {
                // strictly worse runs can stop early; equal ones still need
                // the tie-break
                Some((bf, ..)) => self.sim.iteration_time_below(&options, bf + 1)?,
                None => Some(self.sim.iteration_time(&options)?),
            };
            self.evaluations += 1;
            if let Some(f) = f {
                let key = (f, total, u.clone());
                if best.as_ref().is_none_or(|b| key < *b) {
                    best = Some(key);
                }
            }
            // odometer; the group whose earliest member is latest in
            // backward order turns fastest so most runs resume late
            let mut p = order.len();
            loop {
                if p == 0 {
                    break;
                }
                p -= 1;
                let i = order[p];
                if u[i] < groups[i].members.len() {
                    u[i] += 1;
                    break;
                }
                u[i] = 0;
            }
            if u.iter().all(|&x| x == 0) {
                break;
            }
        }
        let (f, _, u) = best.expect("at least the zero vector is evaluated");
        let mut result = strategy.clone();
        apply_offload(&groups, &u, &strategy.options, &mut result.options);
        for (g, &k) in groups.iter().zip(&u) {
            for &t in &g.members[..k] {
                result.notes[t] = "cpu compression".to_string();
            }
        }
        Ok(OffloadOutcome {
            strategy: result,
            f,
            u,
            groups,
            evaluations,
        })
    }

    /// Exhaustive argmin over all assignments drawn from `candidates`.
    pub fn brute_force(&mut self, candidates: &[OptionId], cap: u128) -> Result<(Strategy, Nanos, u64)> {
        let n = self.profile().len();
        let needed = (candidates.len() as u128)
            .checked_pow(n as u32)
            .unwrap_or(u128::MAX);
        if needed > cap {
            return Err(Error::CapExceeded { needed, cap });
        }
        if candidates.is_empty() {
            return Err(Error::invalid("brute force", "no candidate options"));
        }
        let mut digits = vec![0usize; n];
        let mut options = vec![candidates[0]; n];
        let mut best: Option<(Nanos, usize, Vec<OptionId>)> = None;
        let mut evaluations = 0;
        loop {
            for (slot, &d) in options.iter_mut().zip(&digits) {
                *slot = candidates[d];
            }
            evaluations += 1;
            let f = match &best {
                Some((bf, ..)) => self.evaluate_below(&options, bf + 1)?,
                None => Some(self.evaluate(&options)?),
            };
            if let Some(f) = f {
                let key = (f, compression_tasks(self.table, &options), options.clone());
                if best.as_ref().is_none_or(|b| key < *b) {
                    best = Some(key);
                }
            }
            let mut i = n;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                digits[i] += 1;
                if digits[i] < candidates.len() {
                    break;
                }
                digits[i] = 0;
            }
            if digits.iter().all(|&d| d == 0) {
                break;
            }
        }
        let (f, _, options) = best.expect("at least one assignment");
        let notes = vec!["brute force".to_string(); n];
        Ok((Strategy { options, notes }, f, evaluations))
    }
}

fn apply_offload(groups: &[OffloadGroup], u: &[usize], base: &[OptionId], out: &mut [OptionId]) {
    out.copy_from_slice(base);
    for (g, &k) in groups.iter().zip(u) {
        for &t in &g.members[..k] {
            out[t] = g.cpu_option;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OffloadGroup {
    pub size_bytes: u64,
    pub gpu_option: OptionId,
    pub cpu_option: OptionId,
    /// Tensor indices, earliest ready first.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OffloadOutcome {
    pub strategy: Strategy,
    pub f: Nanos,
    pub u: Vec<usize>,
    pub groups: Vec<OffloadGroup>,
    /// Offload vectors simulated; the product of `|G_i| + 1`.
    pub evaluations: u64,
}

/// Iteration time with every tensor sent through the compressed option of
/// least standalone communication time and compression made free.
pub fn upper_bound(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    gc: &GcAlgorithmSpec,
    table: &OptionTable,
) -> Result<Nanos> {
    let mut sim = Simulator::with_options(
        profile,
        cluster,
        gc,
        table,
        SimOptions {
            free_compression: true,
        },
    );
    let compressed: Vec<OptionId> = table
        .iter()
        .filter(|(_, o)| o.is_compressed())
        .map(|(id, _)| id)
        .collect();
    let pool: Vec<OptionId> = if compressed.is_empty() {
        table.ids().collect()
    } else {
        compressed
    };
    let mut chosen = Vec::with_capacity(profile.len());
    for t in 0..profile.len() {
        let mut best: Option<(Nanos, OptionId)> = None;
        for &o in &pool {
            let steps = match sim.steps(t, o) {
                Ok(s) => s,
                Err(Error::IncompatibleOption { .. }) => continue,
                Err(e) => return Err(e),
            };
            let comm: Nanos = steps
                .iter()
                .filter(|s| s.kind == EventKind::Communicate)
                .map(|s| s.duration)
                .sum();
            if best.is_none_or(|b| (comm, o) < b) {
                best = Some((comm, o));
            }
        }
        let (_, o) = best.ok_or_else(|| {
            Error::invalid("option universe", "no option is compatible with the cluster")
        })?;
        chosen.push(o);
    }
    sim.iteration_time(&chosen)
}

/// Throughput efficiency `T_n / (n T)`.
pub fn scaling_factor(single_device_throughput: f64, n: u32, measured_throughput: f64) -> f64 {
    if measured_throughput == 0.0 {
        return 0.0;
    }
    measured_throughput / (n as f64 * single_device_throughput)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanConfig {
    pub offload: bool,
    pub offload_cap: u128,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            offload: true,
            offload_cap: DEFAULT_OFFLOAD_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub schema_version: u32,
    pub model: String,
    pub gc: String,
    pub tensors: usize,
    pub gpus: u32,
    pub option_universe: usize,
    pub f_ns: Nanos,
    pub baseline_ns: Nanos,
    pub upper_bound_ns: Nanos,
    pub speedup: f64,
    pub gap_to_upper_bound: f64,
    pub scaling_factor: f64,
    pub baseline_scaling_factor: f64,
    pub compressed_tensors: usize,
    pub offloaded_tensors: usize,
    pub gpu_f_ns: Nanos,
    pub offload_vector: Vec<usize>,
    pub offload_evaluations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offload_skipped: Option<String>,
    pub simulations: u64,
    pub decisions: Vec<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planning_time_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub strategy: Strategy,
    pub report: PlanReport,
}

/// Greedy GPU planning followed by CPU offloading.
pub fn plan(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    gc: &GcAlgorithmSpec,
    table: &OptionTable,
    cfg: &PlanConfig,
) -> Result<PlanOutcome> {
    let mut planner = Planner::new(profile, cluster, gc, table)?;
    let baseline_strategy = planner.baseline_strategy();
    let baseline = planner.evaluate(&baseline_strategy.options)?;
    let ub = upper_bound(profile, cluster, gc, table)?;

    let mut decisions = Vec::new();
    let (gpu_strategy, gpu_f) = planner.plan_gpu(&mut decisions)?;
    log::info!(
        "gpu planning: {} -> {} ns after {} simulations",
        baseline,
        gpu_f,
        planner.evaluations
    );

    let mut strategy = gpu_strategy;
    let mut f = gpu_f;
    let mut offload_vector = Vec::new();
    let mut offload_evaluations = 0;
    let mut offload_skipped = None;
    if cfg.offload {
        match planner.offload_cpu(&strategy, cfg.offload_cap) {
            Ok(out) => {
                offload_evaluations = out.evaluations;
                offload_vector = out.u.clone();
                if out.f < f {
                    for (g, &k) in out.groups.iter().zip(&out.u) {
                        if k > 0 {
                            decisions.push(Decision {
                                stage: "offload".into(),
                                tensors: g.members[..k]
                                    .iter()
                                    .map(|&t| profile.tensors[t].id.clone())
                                    .collect(),
                                option: Some(g.cpu_option),
                                f_ns: out.f,
                            });
                        }
                    }
                }
                strategy = out.strategy;
                f = out.f;
            }
            Err(Error::CapExceeded { needed, cap }) => {
                let msg = format!("{needed} offload vectors exceed the cap of {cap}");
                log::warn!("skipping cpu offloading: {msg}");
                offload_skipped = Some(msg);
            }
            Err(e) => return Err(e),
        }
    } else {
        offload_skipped = Some("disabled".into());
    }

    let compute = profile.total_compute_ns();
    let ratio = |x: Nanos| if x == 0 { 1.0 } else { compute as f64 / x as f64 };
    let report = PlanReport {
        schema_version: SCHEMA_VERSION,
        model: profile.name.clone(),
        gc: gc.name.clone(),
        tensors: profile.len(),
        gpus: cluster.total_gpus(),
        option_universe: table.len(),
        f_ns: f,
        baseline_ns: baseline,
        upper_bound_ns: ub,
        speedup: if f == 0 { 1.0 } else { baseline as f64 / f as f64 },
        gap_to_upper_bound: gap(f, ub),
        scaling_factor: ratio(f),
        baseline_scaling_factor: ratio(baseline),
        compressed_tensors: strategy
            .options
            .iter()
            .filter(|&&o| table.option(o).is_compressed())
            .count(),
        offloaded_tensors: strategy
            .options
            .iter()
            .filter(|&&o| table.option(o).devices().any(|d| d == Device::Cpu))
            .count(),
        gpu_f_ns: gpu_f,
        offload_vector,
        offload_evaluations,
        offload_skipped,
        simulations: planner.evaluations,
        decisions,
        planning_time_ms: None,
    };
    Ok(PlanOutcome { strategy, report })
}

/// Relative distance of `f` above the bound.
pub fn gap(f: Nanos, bound: Nanos) -> f64 {
    if bound == 0 {
        return 0.0;
    }
    (f as f64 - bound as f64) / bound as f64
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyFile {
    schema_version: u32,
    model: String,
    tree: TreeConfig,
    tensors: Vec<StrategyRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyRecord {
    id: String,
    option_id: OptionId,
    option: CompressionOption,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    note: String,
}

/// Serializes a strategy with full option paths so it can be checked
/// against the tree it was planned on.
pub fn strategy_to_json(
    strategy: &Strategy,
    profile: &ModelProfile,
    table: &OptionTable,
    tree: &TreeConfig,
) -> String {
    let file = StrategyFile {
        schema_version: SCHEMA_VERSION,
        model: profile.name.clone(),
        tree: tree.clone(),
        tensors: profile
            .tensors
            .iter()
            .zip(&strategy.options)
            .zip(&strategy.notes)
            .map(|((t, &o), note)| StrategyRecord {
                id: t.id.clone(),
                option_id: o,
                option: table.option(o).clone(),
                note: note.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("strategy serializes");
    s.push('\n');
    s
}

/// A strategy file checked against `profile`: every tensor assigned once,
/// every option valid and present in the tree the file names.
#[derive(Debug, Clone)]
pub struct LoadedStrategy {
    pub tree: TreeConfig,
    pub table: OptionTable,
    pub strategy: Strategy,
}

pub fn parse_strategy(
    text: &str,
    context: &str,
    profile: &ModelProfile,
    cluster: &ClusterSpec,
) -> Result<LoadedStrategy> {
    let file: StrategyFile = serde_json::from_str(text).map_err(|source| Error::Parse {
        context: context.to_string(),
        source,
    })?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            context: context.to_string(),
            found: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    file.tree.validate()?;
    let table = crate::optiontree::enumerate_table(cluster, &file.tree);
    let mut by_id: HashMap<&str, &StrategyRecord> = HashMap::new();
    for r in &file.tensors {
        if by_id.insert(&r.id, r).is_some() {
            return Err(Error::DuplicateTensor(r.id.clone()));
        }
    }
    if by_id.len() != profile.len() {
        let unknown = file
            .tensors
            .iter()
            .find(|r| !profile.tensors.iter().any(|t| t.id == r.id));
        if let Some(r) = unknown {
            return Err(Error::invalid(
                "strategy",
                format!("tensor `{}` is not in the model", r.id),
            ));
        }
    }
    let mut options = Vec::with_capacity(profile.len());
    let mut notes = Vec::with_capacity(profile.len());
    for t in &profile.tensors {
        let r = by_id
            .get(t.id.as_str())
            .ok_or_else(|| Error::MissingOption(t.id.clone()))?;
        let violations = crate::optiontree::validate_option(&r.option);
        if let Some(v) = violations.first() {
            return Err(Error::invalid(
                "strategy",
                format!("option of tensor `{}` is invalid: {v}", t.id),
            ));
        }
        match table.find(&r.option.tasks) {
            Some(id) if id == r.option_id => {}
            Some(id) => {
                return Err(Error::invalid(
                    "strategy",
                    format!(
                        "tensor `{}` names option {} but its path is option {}",
                        t.id, r.option_id, id
                    ),
                ))
            }
            None => {
                return Err(Error::invalid(
                    "strategy",
                    format!("option of tensor `{}` is outside the configured tree", t.id),
                ))
            }
        }
        options.push(r.option_id);
        notes.push(r.note.clone());
    }
    Ok(LoadedStrategy {
        tree: file.tree,
        table,
        strategy: Strategy { options, notes },
    })
}

pub fn load_strategy(
    path: &std::path::Path,
    profile: &ModelProfile,
    cluster: &ClusterSpec,
) -> Result<LoadedStrategy> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_strategy(&text, &path.display().to_string(), profile, cluster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optiontree::enumerate_table;
    use crate::profile::{GcFamily, LogLogCurve, TensorSpec};

    const MS: Nanos = 1_000_000;

    fn profile(spec: &[(u64, Nanos, u32)]) -> ModelProfile {
        let tensors = spec
            .iter()
            .enumerate()
            .map(|(i, &(size, compute, dist))| TensorSpec {
                id: format!("t{i}"),
                size_bytes: size,
                compute_ns: compute,
                backward_index: i,
                layer_distance: dist,
            })
            .collect();
        ModelProfile::new("m", tensors).unwrap()
    }

    fn gc(compress: Nanos, decompress: Nanos) -> GcAlgorithmSpec {
        GcAlgorithmSpec::uniform(
            "topk",
            GcFamily::Sparsification {
                density: 0.05,
                element_bytes: 4,
                index_bytes: 4,
            },
            LogLogCurve::constant(compress),
            LogLogCurve::constant(decompress),
        )
        .unwrap()
    }

    fn two_tensors() -> ModelProfile {
        profile(&[(10_000_000, 10 * MS, 1), (10_000_000, 10 * MS, 0)])
    }

    #[test]
    fn grouping() {
        let p = profile(&[(8, 1, 2), (8, 1, 1), (4, 1, 0)]);
        assert_eq!(group_and_order(&p), vec![vec![1, 0], vec![2]]);
        let p = profile(&[(8, 1, 0), (8, 1, 0)]);
        assert_eq!(group_and_order(&p), vec![vec![0, 1]]);
        let p = profile(&[(8, 1, 0)]);
        assert_eq!(group_and_order(&p), vec![vec![0]]);
    }

    #[test]
    fn cheap_compression_on_last_tensor() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = two_tensors();
        let g = gc(MS / 10, MS / 10);
        let out = plan(&p, &cluster, &g, &table, &PlanConfig::default()).unwrap();
        assert_eq!(out.report.baseline_ns, 30 * MS);
        assert_eq!(out.report.f_ns, 21_300_000);
        assert!(!table.option(out.strategy.options[0]).is_compressed());
        assert!(table.option(out.strategy.options[1]).is_compressed());
        assert_eq!(out.report.upper_bound_ns, 21 * MS);

        let mut planner = Planner::new(&p, &cluster, &g, &table).unwrap();
        let all: Vec<_> = table.ids().collect();
        let (_, bf, evals) = planner.brute_force(&all, u128::MAX).unwrap();
        assert_eq!(bf, 21_300_000);
        assert_eq!(evals, (all.len() * all.len()) as u64);
    }

    #[test]
    fn prohibitive_compression() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = two_tensors();
        let out = plan(&p, &cluster, &gc(100 * MS, 100 * MS), &table, &PlanConfig::default()).unwrap();
        assert_eq!(out.report.f_ns, out.report.baseline_ns);
        assert!(out
            .strategy
            .options
            .iter()
            .all(|&o| !table.option(o).is_compressed()));
    }

    #[test]
    fn bubble_tensor_left_alone() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = profile(&[(2_000_000, 10 * MS, 1), (4_000_000, 10 * MS, 0)]);
        // free compression would help any tensor if it were considered
        let out = plan(&p, &cluster, &gc(0, 0), &table, &PlanConfig::default()).unwrap();
        assert!(!table.option(out.strategy.options[0]).is_compressed());
        assert_eq!(out.report.decisions[0].stage, "remove");
        assert_eq!(out.report.decisions[0].tensors, ["t0"]);
    }

    #[test]
    fn selection_tie_breaks() {
        let inc = OptionId(0);
        let c = |o, f, k| Scored {
            option: OptionId(o),
            f,
            compression_tasks: k,
        };
        assert_eq!(select_best(inc, &[c(0, 30, 0), c(1, 30, 2)]).unwrap().option, inc);
        assert_eq!(select_best(inc, &[c(0, 30, 0), c(1, 29, 2)]).unwrap().option, OptionId(1));
        let best = select_best(inc, &[c(0, 30, 0), c(5, 28, 2), c(7, 28, 4)]).unwrap();
        assert_eq!(best.option, OptionId(5));
        let best = select_best(inc, &[c(0, 30, 0), c(7, 28, 4), c(5, 28, 4)]).unwrap();
        assert_eq!(best.option, OptionId(5));
    }

    #[test]
    fn offload_counts() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = profile(&[(8_000_000, MS, 0), (8_000_000, MS, 0), (4_000_000, MS, 0)]);
        let g = gc(MS, MS);
        let mut planner = Planner::new(&p, &cluster, &g, &table).unwrap();
        let gpu_ag = table
            .iter()
            .find(|(_, o)| o.is_compressed() && o.uses_only(Device::Gpu))
            .map(|(id, _)| id)
            .unwrap();
        let s = Strategy::uniform(3, gpu_ag, "test");
        let out = planner.offload_cpu(&s, u128::MAX).unwrap();
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.evaluations, 6);
        let none = planner.baseline_strategy();
        let out = planner.offload_cpu(&none, u128::MAX).unwrap();
        assert_eq!(out.evaluations, 1);
        assert_eq!(out.strategy, none);
        assert!(matches!(
            planner.offload_cpu(&s, 5),
            Err(Error::CapExceeded { needed: 6, cap: 5 })
        ));
    }

    #[test]
    fn brute_force_cap() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = profile(&[(1000, MS, 0), (1000, MS, 0), (1000, MS, 0)]);
        let g = gc(MS, MS);
        let mut planner = Planner::new(&p, &cluster, &g, &table).unwrap();
        let four: Vec<_> = table.ids().take(4).collect();
        assert!(matches!(
            planner.brute_force(&four, 10),
            Err(Error::CapExceeded { needed: 64, cap: 10 })
        ));
        let p1 = profile(&[(1000, MS, 0)]);
        let mut planner = Planner::new(&p1, &cluster, &g, &table).unwrap();
        let three: Vec<_> = table.ids().take(3).collect();
        assert_eq!(planner.brute_force(&three, 10).unwrap().2, 3);
    }

    #[test]
    fn scaling() {
        assert_eq!(scaling_factor(100.0, 4, 400.0), 1.0);
        assert!((scaling_factor(100.0, 4, 232.0) - 0.58).abs() < 1e-12);
        assert_eq!(scaling_factor(100.0, 4, 0.0), 0.0);
    }

    #[test]
    fn upper_bound_single_gpu() {
        let cluster = ClusterSpec::flat(1, 1_000_000_000);
        let table = enumerate_table(&cluster, &TreeConfig::default());
        let p = two_tensors();
        assert_eq!(upper_bound(&p, &cluster, &gc(MS, MS), &table).unwrap(), 20 * MS);
    }

    #[test]
    fn strategy_round_trip() {
        let cluster = ClusterSpec::flat(2, 1_000_000_000);
        let tree = TreeConfig::default();
        let table = enumerate_table(&cluster, &tree);
        let p = two_tensors();
        let out = plan(&p, &cluster, &gc(MS / 10, MS / 10), &table, &PlanConfig::default()).unwrap();
        let text = strategy_to_json(&out.strategy, &p, &table, &tree);
        let back = parse_strategy(&text, "s", &p, &cluster).unwrap();
        assert_eq!(back.strategy, out.strategy);
        let tampered = text.replacen("\"option_id\": 0", "\"option_id\": 1", 1);
        assert!(parse_strategy(&tampered, "s", &p, &cluster).is_err());
    }
}
