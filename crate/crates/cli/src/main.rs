use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use gradplan::optiontree::{enumerate_table, OptionId, OptionTable, TreeConfig};
use gradplan::planner::{
    load_strategy, plan, strategy_to_json, PlanConfig, PlanReport, Planner, Strategy,
    DEFAULT_BRUTE_FORCE_CAP, DEFAULT_OFFLOAD_CAP,
};
use gradplan::profile::{
    load_cluster_spec, load_gc_spec, load_model_profile, ClusterSpec, CostCurve, CurveKind,
    Device, GcAlgorithmSpec, GcFamily, LogLogCurve, ModelProfile,
};
use gradplan::sim::{chrome_trace, simulate, summary};
use gradplan::synth;

#[derive(Parser)]
#[command(name = "gradplan", version, about = "Plan gradient compression for data-parallel training")]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a gc profile from raw compression timings.
    Fit(FitArgs),
    /// List the compression options of the decision tree, one JSON record per line.
    Enumerate(EnumerateArgs),
    /// Simulate one iteration under a strategy and print its summary.
    Simulate(SimulateArgs),
    /// Select a compression strategy.
    Plan(PlanArgs),
    /// Exhaustively search all assignments on a small instance.
    Oracle(OracleArgs),
    /// Tabulate plan reports as CSV.
    Report(ReportArgs),
    /// Write a seeded synthetic model, cluster and gc profile.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Inputs {
    /// Model profile (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Cluster spec (JSON).
    #[arg(long)]
    cluster: PathBuf,
    /// Compression algorithm profile (JSON).
    #[arg(long)]
    gc: PathBuf,
}

impl Inputs {
    fn load(&self) -> Result<(ModelProfile, ClusterSpec, GcAlgorithmSpec), Failure> {
        Ok((
            load_model_profile(&self.model)?,
            load_cluster_spec(&self.cluster)?,
            load_gc_spec(&self.gc)?,
        ))
    }
}

#[derive(Args)]
struct TreeFlags {
    /// Only flat (single-phase) communication.
    #[arg(long, conflicts_with = "hierarchical_only")]
    flat_only: bool,
    /// Only hierarchical (intra, inter, intra) communication.
    #[arg(long)]
    hierarchical_only: bool,
    /// Only uncompressed options.
    #[arg(long)]
    no_compression: bool,
    /// No divisible schemes on flat and inter-machine phases.
    #[arg(long)]
    no_divisible: bool,
    /// Compress and decompress on GPUs only.
    #[arg(long)]
    gpu_only: bool,
    /// Upper limit on Comp tasks per option.
    #[arg(long, value_name = "N")]
    max_compressions: Option<u32>,
}

impl TreeFlags {
    fn config(&self) -> TreeConfig {
        TreeConfig {
            allow_flat: !self.hierarchical_only,
            allow_hierarchical: !self.flat_only,
            allow_compression: !self.no_compression,
            allow_divisible: !self.no_divisible,
            resources: if self.gpu_only {
                vec![Device::Gpu]
            } else {
                Device::ALL.to_vec()
            },
            max_compressions_per_tensor: self.max_compressions,
        }
    }

    fn table(&self, cluster: &ClusterSpec) -> Result<(TreeConfig, OptionTable), Failure> {
        let cfg = self.config();
        cfg.validate()?;
        let table = enumerate_table(cluster, &cfg);
        if table.is_empty() {
            return Err(Failure::Invalid(
                "the tree flags leave no options for this cluster".into(),
            ));
        }
        Ok((cfg, table))
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("family").required(true).args(["sparsification", "quantization"])))]
struct FitArgs {
    /// CSV with columns device,kind,size_bytes,duration_ns; repeated sizes
    /// are averaged.
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    name: String,
    /// Sparsifier keeping this fraction of elements.
    #[arg(long, value_name = "DENSITY")]
    sparsification: Option<f64>,
    /// Quantizer with this many bits per element.
    #[arg(long, value_name = "BITS")]
    quantization: Option<u32>,
    #[arg(long, default_value_t = 4)]
    element_bytes: u32,
    #[arg(long, default_value_t = 4)]
    index_bytes: u32,
    #[arg(long, default_value_t = 0)]
    header_bytes: u32,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    /// Cluster spec; defaults to 8 machines with 8 GPUs each.
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[command(flatten)]
    tree: TreeFlags,
    /// Print only the option and shape counts.
    #[arg(long)]
    count: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Strategy file written by `plan`; all tensors uncompressed when absent.
    #[arg(long)]
    strategy: Option<PathBuf>,
    /// Write the timeline in trace-event format.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    tree: TreeFlags,
    /// Skip CPU offloading.
    #[arg(long)]
    no_offload: bool,
    /// Largest number of offload vectors to search.
    #[arg(long, default_value_t = DEFAULT_OFFLOAD_CAP)]
    offload_cap: u128,
    /// Where to write the strategy file.
    #[arg(long)]
    strategy_out: Option<PathBuf>,
    /// Where to write the plan report; stdout when absent.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Record wall-clock planning time in the report.
    #[arg(long)]
    timing: bool,
    /// Cross-check against exhaustive search.
    #[arg(long)]
    oracle: bool,
    /// State cap for the cross-check.
    #[arg(long, default_value_t = DEFAULT_BRUTE_FORCE_CAP)]
    max_states: u128,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    tree: TreeFlags,
    /// Refuse instances with more assignments than this.
    #[arg(long, default_value_t = DEFAULT_BRUTE_FORCE_CAP)]
    max_states: u128,
    /// Where to write the optimal strategy file.
    #[arg(long)]
    strategy_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Plan reports written by `plan`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthGc {
    Dgc,
    Onebit,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthCluster {
    Default,
    Random,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Directory for model.json, cluster.json and gc.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Random profile with this many tensors instead of the ResNet-like one.
    #[arg(long)]
    tensors: Option<usize>,
    /// Backward pass length of the ResNet-like profile.
    #[arg(long, default_value_t = 150.0)]
    compute_ms: f64,
    #[arg(long, value_enum, default_value_t = SynthGc::Dgc)]
    gc: SynthGc,
    #[arg(long = "cluster-kind", value_enum, default_value_t = SynthCluster::Default)]
    cluster_kind: SynthCluster,
}

/// Exit 1 for bad input, 2 for anything else.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Internal(String),
}

impl From<gradplan::Error> for Failure {
    fn from(e: gradplan::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Enumerate(a) => cmd_enumerate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_file(path, contents),
        None => match std::io::stdout().write_all(contents.as_bytes()) {
            // reader went away, e.g. piped into head
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => r.map_err(|e| Failure::Internal(format!("cannot write to stdout: {e}"))),
        },
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

#[derive(Deserialize)]
struct Measurement {
    device: Device,
    kind: CurveKind,
    size_bytes: u64,
    duration_ns: u64,
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    let bad = |e: csv::Error| Failure::Invalid(format!("{}: {e}", a.measurements.display()));
    let mut reader = csv::Reader::from_path(&a.measurements).map_err(bad)?;
    let mut groups: BTreeMap<(Device, u8, u64), Vec<u64>> = BTreeMap::new();
    for row in reader.deserialize() {
        let m: Measurement = row.map_err(bad)?;
        let kind = match m.kind {
            CurveKind::Compress => 0,
            CurveKind::Decompress => 1,
        };
        groups.entry((m.device, kind, m.size_bytes)).or_default().push(m.duration_ns);
    }
    let mut curves = Vec::new();
    for device in Device::ALL {
        for (k, kind) in [CurveKind::Compress, CurveKind::Decompress].into_iter().enumerate() {
            let samples: Vec<(u64, u64)> = groups
                .iter()
                .filter(|((d, kk, _), _)| *d == device && *kk as usize == k)
                .map(|((_, _, size), durs)| {
                    let n = durs.len() as u128;
                    let sum: u128 = durs.iter().map(|&d| d as u128).sum();
                    (*size, ((2 * sum + n) / (2 * n)) as u64)
                })
                .collect();
            if samples.is_empty() {
                return Err(Failure::Invalid(format!(
                    "{}: no {} {kind:?} measurements",
                    a.measurements.display(),
                    device.as_str()
                )));
            }
            log::info!("{} {kind:?}: {} sizes", device.as_str(), samples.len());
            curves.push(CostCurve {
                device,
                kind,
                curve: LogLogCurve::fit(&samples)?,
            });
        }
    }
    let family = match (a.sparsification, a.quantization) {
        (Some(density), _) => GcFamily::Sparsification {
            density,
            element_bytes: a.element_bytes,
            index_bytes: a.index_bytes,
        },
        (_, Some(bits)) => GcFamily::Quantization {
            bits_per_element: bits,
            element_bytes: a.element_bytes,
            header_bytes: a.header_bytes,
        },
        _ => unreachable!("clap requires one family"),
    };
    let spec = GcAlgorithmSpec::new(a.name.clone(), family, curves)?;
    emit(a.out.as_deref(), &(spec.to_json() + "\n"))
}

fn cmd_enumerate(a: &EnumerateArgs) -> Result<(), Failure> {
    let cluster = match &a.cluster {
        Some(p) => load_cluster_spec(p)?,
        None => synth::default_cluster(),
    };
    let (_, table) = a.tree.table(&cluster)?;
    let mut out = String::new();
    if a.count {
        out += &pretty(&json!({"options": table.len(), "shapes": table.shape_count()}));
    } else {
        for (id, o) in table.iter() {
            let record = json!({
                "id": id.0,
                "pattern": o.pattern.as_str(),
                "path": o.to_string(),
                "compressions": o.compressions(),
                "tasks": o.tasks,
            });
            out += &record.to_string();
            out.push('\n');
        }
    }
    log::info!("{} options, {} without device choice", table.len(), table.shape_count());
    emit(None, &out)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let (profile, cluster, gc) = a.inputs.load()?;
    let (table, options) = match &a.strategy {
        Some(path) => {
            let loaded = load_strategy(path, &profile, &cluster)?;
            (loaded.table, loaded.strategy.options)
        }
        None => {
            let table = enumerate_table(&cluster, &TreeConfig::default());
            let base = table.default_uncompressed().expect("default tree has an uncompressed option");
            (table, vec![base; profile.len()])
        }
    };
    let timeline = simulate(&profile, &cluster, &gc, &table, &options)?;
    if let Some(path) = &a.trace_out {
        write_file(path, &pretty(&chrome_trace(&timeline)))?;
    }
    emit(None, &pretty(&summary(&timeline)))
}

fn cmd_plan(a: &PlanArgs) -> Result<(), Failure> {
    let (profile, cluster, gc) = a.inputs.load()?;
    let (tree, table) = a.tree.table(&cluster)?;
    let cfg = PlanConfig {
        offload: !a.no_offload,
        offload_cap: a.offload_cap,
    };
    let started = Instant::now();
    let mut outcome = plan(&profile, &cluster, &gc, &table, &cfg)?;
    if a.timing {
        outcome.report.planning_time_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    if a.oracle {
        let mut planner = Planner::new(&profile, &cluster, &gc, &table)?;
        let all: Vec<OptionId> = table.ids().collect();
        let (_, best, _) = planner.brute_force(&all, a.max_states)?;
        let f = outcome.report.f_ns;
        eprintln!(
            "oracle: optimum {best} ns, plan {f} ns ({:+.2}%)",
            (f as f64 - best as f64) / best.max(1) as f64 * 100.0
        );
    }
    if let Some(path) = &a.strategy_out {
        write_file(path, &strategy_to_json(&outcome.strategy, &profile, &table, &tree))?;
    }
    emit(a.report_out.as_deref(), &pretty(&outcome.report))
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), Failure> {
    let (profile, cluster, gc) = a.inputs.load()?;
    let (tree, table) = a.tree.table(&cluster)?;
    let mut planner = Planner::new(&profile, &cluster, &gc, &table)?;
    let baseline = planner.evaluate(&planner.baseline_strategy().options)?;
    let all: Vec<OptionId> = table.ids().collect();
    let (best, f, evaluations): (Strategy, _, _) = planner.brute_force(&all, a.max_states)?;
    if let Some(path) = &a.strategy_out {
        write_file(path, &strategy_to_json(&best, &profile, &table, &tree))?;
    }
    let assignment: Vec<_> = profile
        .tensors
        .iter()
        .zip(&best.options)
        .map(|(t, &o)| json!({"id": t.id, "option_id": o.0, "path": table.option(o).to_string()}))
        .collect();
    let out = json!({
        "f_ns": f,
        "baseline_ns": baseline,
        "evaluations": evaluations,
        "assignment": assignment,
    });
    emit(None, &pretty(&out))
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| Failure::Internal(e.to_string());
    w.write_record([
        "model",
        "gc",
        "gpus",
        "f_ms",
        "baseline_ms",
        "upper_bound_ms",
        "gap_to_upper_bound_pct",
        "speedup",
        "scaling_factor",
    ])
    .map_err(internal)?;
    for path in &a.reports {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let r: PlanReport = serde_json::from_str(&text)
            .map_err(|e| Failure::Invalid(format!("cannot parse {}: {e}", path.display())))?;
        let ms = |ns: u64| format!("{:.3}", ns as f64 / 1e6);
        w.write_record([
            r.model.clone(),
            r.gc.clone(),
            r.gpus.to_string(),
            ms(r.f_ns),
            ms(r.baseline_ns),
            ms(r.upper_bound_ns),
            format!("{:.1}", r.gap_to_upper_bound * 100.0),
            format!("{:.2}", r.speedup),
            format!("{:.3}", r.scaling_factor),
        ])
        .map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Internal(e.to_string()))?;
    emit(None, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut rng = synth::rng(a.seed);
    let model = match a.tensors {
        Some(0) => return Err(Failure::Invalid("--tensors must be positive".into())),
        Some(n) => synth::random_profile(&mut rng, n),
        None => synth::resnet101_like(a.seed, a.compute_ms),
    };
    let cluster = match a.cluster_kind {
        SynthCluster::Default => synth::default_cluster(),
        SynthCluster::Random => synth::random_cluster(&mut rng),
    };
    let gc = match a.gc {
        SynthGc::Dgc => synth::dgc(),
        SynthGc::Onebit => synth::onebit(),
        SynthGc::Random => synth::random_gc(&mut rng),
    };
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::Internal(format!("cannot create {}: {e}", a.out_dir.display())))?;
    write_file(&a.out_dir.join("model.json"), &(model.to_json() + "\n"))?;
    write_file(&a.out_dir.join("cluster.json"), &(cluster.to_json() + "\n"))?;
    write_file(&a.out_dir.join("gc.json"), &(gc.to_json() + "\n"))?;
    Ok(())
}
