use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use adj_core::cluster::ClusterOptions;
use adj_core::engine::{self, Calibration, EngineConfig, Mode, PlanSummary};
use adj_core::ghd::GhdLimits;
use adj_core::hcube::HashFamily;
use adj_core::relational::{load_tuples, parse_query, write_tuples, Database, QuerySpec};
use adj_core::sampler::{estimate_cardinality, SampleConfig, DEFAULT_SAMPLES};
use adj_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "adj", version, about = "Multi-way joins with co-optimized pre-computing, shuffling and LeapFrog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose a plan and print it with its estimated costs.
    Plan(PlanArgs),
    /// Plan and execute a query on the simulated cluster.
    Run(RunArgs),
    /// Estimate the result size by sampling.
    Estimate(EstimateArgs),
    /// Measure the cost-model constants for this host.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Query file in rule syntax, e.g. `Q(a,b,c) :- R(a,b), S(b,c), T(a,c).`
    #[arg(long)]
    query: PathBuf,
    /// Bind a relation to a whitespace-separated tuple file.
    #[arg(long = "bind", value_name = "R=PATH")]
    bind: Vec<String>,
    /// Bind every atom to a copy of one edge list.
    #[arg(long, value_name = "PATH")]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum HashArg {
    Mod,
    Msw,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Per-worker budget of pulled tuples.
    #[arg(long)]
    memory_tuples: Option<u64>,
    #[arg(long, value_enum, default_value = "msw")]
    hash: HashArg,
    /// Milliseconds added when serving each block.
    #[arg(long, default_value_t = 0.0)]
    latency_per_block: f64,
    /// Calibrate now if no cached constants exist for this host.
    #[arg(long)]
    calibrate: bool,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, conflicts_with = "table")]
    json: bool,
    /// Human-readable cost table instead of JSON.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value = "adj", value_parser = ["adj", "hcube-lf"])]
    mode: String,
    /// Also print the hypertree.
    #[arg(long)]
    explain: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value = "adj", value_parser = ["adj", "hcube-lf", "oracle"])]
    mode: String,
    /// Write result tuples, tab-separated, to this file.
    #[arg(long, value_name = "PATH")]
    materialize: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Attribute order, comma-separated; the first one is sampled.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    /// Enumerate every value instead of sampling.
    #[arg(long, conflicts_with = "force_sampling")]
    exhaustive: bool,
    /// Sample even when every value could be enumerated.
    #[arg(long)]
    force_sampling: bool,
    /// Also run with each of these sample counts and report the error
    /// against the exact count.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recalibrate even if a cached result exists.
    #[arg(long)]
    force: bool,
    /// Tuples shipped per alpha measurement.
    #[arg(long, default_value_t = 1_000_000)]
    tuples: usize,
    /// Seeks timed per beta ladder entry.
    #[arg(long, default_value_t = 200_000)]
    seeks: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Syntax { .. } | Error::InvalidQuery(_) | Error::Io { .. } | Error::EdgeList { .. } | Error::Order(_) | Error::Schema(_) => 1,
            Error::MissingRelation(_) | Error::Infeasible(_) | Error::Limits(_) | Error::Config(_) | Error::Stats(_) => 2,
            Error::Cluster(_) | Error::MemoryBudget { .. } | Error::Wire(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Run(a) => cmd_run(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("adj: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_query(path: &Path) -> Result<QuerySpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_query(&text)?)
}

/// Builds the database from `--bind` and `--graph`; every atom must end up bound.
fn load_database(q: &QuerySpec, data: &DataArgs) -> Result<Database, Failure> {
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for b in &data.bind {
        let (name, path) = b
            .split_once('=')
            .ok_or_else(|| usage(format!("--bind expects R=PATH, got `{b}`")))?;
        files.insert(name.to_string(), PathBuf::from(path));
    }
    let mut db = Database::new();
    for (i, atom) in q.atoms().iter().enumerate() {
        if db.get(&atom.relation).is_ok() {
            continue;
        }
        let path = match (files.get(&atom.relation), &data.graph) {
            (Some(p), _) => p,
            (None, Some(g)) => g,
            (None, None) => return Err(Error::MissingRelation(atom.relation.clone()).into()),
        };
        db.insert(load_tuples(path, &atom.relation, q.atom_schema(i))?);
    }
    Ok(db)
}

fn cache_dir() -> PathBuf {
    if let Some(d) = std::env::var_os("ADJ_CACHE_DIR") {
        return PathBuf::from(d);
    }
    if let Some(d) = std::env::var_os("XDG_CACHE_HOME") {
        return PathBuf::from(d).join("adj");
    }
    match std::env::var_os("HOME") {
        Some(h) => PathBuf::from(h).join(".cache").join("adj"),
        None => std::env::temp_dir().join("adj-cache"),
    }
}

fn host_fingerprint() -> String {
    let host = std::fs::read_to_string("/proc/sys/kernel/hostname")
        .ok()
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into());
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let raw = format!("{}-{}-{}-{}cpu", host.trim(), std::env::consts::OS, std::env::consts::ARCH, cpus);
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn cache_path(workers: usize) -> PathBuf {
    cache_dir().join(format!("calibration-{}-w{}.json", host_fingerprint(), workers))
}

fn read_cache(workers: usize) -> Option<Calibration> {
    let text = std::fs::read_to_string(cache_path(workers)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_cache(c: &Calibration) -> Result<PathBuf, Failure> {
    let path = cache_path(c.workers);
    let dir = path.parent().unwrap();
    std::fs::create_dir_all(dir).map_err(|e| Failure { code: 3, message: format!("cannot create {}: {e}", dir.display()) })?;
    let json = serde_json::to_string_pretty(c).unwrap();
    std::fs::write(&path, json).map_err(|e| Failure { code: 3, message: format!("cannot write {}: {e}", path.display()) })?;
    Ok(path)
}

fn cluster_options(c: &ClusterArgs, seed: u64) -> Result<ClusterOptions, Failure> {
    if c.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    if !(c.latency_per_block >= 0.0) {
        return Err(usage("--latency-per-block must be non-negative"));
    }
    Ok(ClusterOptions {
        hash: match c.hash {
            HashArg::Mod => HashFamily::Modulo,
            HashArg::Msw => HashFamily::MultiplyShift { seed },
        },
        memory_tuples: c.memory_tuples,
        latency_per_block: Duration::from_secs_f64(c.latency_per_block / 1000.0),
        ..ClusterOptions::new(c.workers, seed)
    })
}

fn calibration_for(c: &ClusterArgs, options: &ClusterOptions) -> Result<Calibration, Failure> {
    if let Some(cal) = read_cache(c.workers) {
        return Ok(cal);
    }
    if !c.calibrate {
        return Err(Failure {
            code: 2,
            message: format!(
                "no calibration for {} workers on this host; run `adj calibrate --workers {}` or pass --calibrate",
                c.workers, c.workers
            ),
        });
    }
    let cal = engine::calibrate(options, 200_000, 50_000)?;
    write_cache(&cal)?;
    Ok(cal)
}

fn engine_config(mode: &str, data: &DataArgs, c: &ClusterArgs) -> Result<EngineConfig, Failure> {
    let options = cluster_options(c, data.seed)?;
    let calibration = calibration_for(c, &options)?;
    Ok(EngineConfig {
        mode: mode.parse()?,
        cluster: options,
        samples: SampleConfig::new(data.samples, data.seed)?,
        calibration,
        limits: GhdLimits::default(),
    })
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).unwrap());
}

fn cost_table(rows: &[(&str, adj_core::optimizer::CostBreakdown)]) -> String {
    let mut out = format!(
        "{:<12} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "", "Optimization", "Pre-Computing", "Communication", "Computation", "Total"
    );
    for (label, b) in rows {
        out += &format!(
            "{:<12} {:>14.4} {:>14.4} {:>14.4} {:>14.4} {:>14.4}\n",
            label, b.optimization, b.pre_computing, b.communication, b.computation, b.total
        );
    }
    out
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    query: &'a str,
    workers: usize,
    plan: PlanSummary,
}

fn cmd_plan(a: PlanArgs) -> Result<(), Failure> {
    let q = load_query(&a.data.query)?;
    let db = load_database(&q, &a.data)?;
    let cfg = engine_config(&a.mode, &a.data, &a.cluster)?;
    let plan = engine::plan_query(&q, &db, &cfg)?;
    let summary = PlanSummary::of(&plan, cfg.mode);
    if a.output.table {
        println!("query {} on {} workers, mode {}", q.name(), cfg.cluster.workers, cfg.mode.as_str());
        println!("candidates: {}", summary.candidates.join(", "));
        println!("pre-computed: {}", if summary.precomputed.is_empty() { "none".to_string() } else { summary.precomputed.join(", ") });
        println!("attribute order: {}", summary.attribute_order.join(" < "));
        let shares: Vec<String> = summary.share.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("shares: {} ({} hypercubes)", shares.join(" "), summary.hypercubes);
        print!("{}", cost_table(&[("estimated", summary.estimate), ("no pre-comp", summary.baseline_estimate)]));
    } else {
        print_json(&PlanOutput { query: q.name(), workers: cfg.cluster.workers, plan: summary });
    }
    if a.explain {
        eprint!("{}", plan.tree.explain(&plan.query));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunOutput<'a> {
    query: &'a str,
    mode: Mode,
    workers: usize,
    cardinality: u64,
    costs: adj_core::optimizer::CostBreakdown,
    plan: Option<PlanSummary>,
    execution: adj_core::cluster::ExecutionReport,
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let q = load_query(&a.data.query)?;
    let db = load_database(&q, &a.data)?;
    let cfg = if a.mode == "oracle" {
        let options = cluster_options(&a.cluster, a.data.seed)?;
        EngineConfig {
            mode: Mode::Oracle,
            calibration: Calibration {
                alpha: 1.0,
                beta: adj_core::optimizer::BetaTable::new(vec![(1, 1.0)])?,
                workers: options.workers,
            },
            cluster: options,
            samples: SampleConfig::new(a.data.samples, a.data.seed)?,
            limits: GhdLimits::default(),
        }
    } else {
        engine_config(&a.mode, &a.data, &a.cluster)?
    };
    let out = engine::run_query(&q, &db, &cfg, a.materialize.is_some())?;
    if let (Some(path), Some(result)) = (&a.materialize, &out.result) {
        let file = std::fs::File::create(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        write_tuples(&mut w, result)
            .and_then(|_| w.flush())
            .map_err(|e| Failure { code: 3, message: format!("cannot write {}: {e}", path.display()) })?;
    }
    let report = RunOutput {
        query: q.name(),
        mode: out.mode,
        workers: out.report.workers,
        cardinality: out.report.cardinality,
        costs: out.report.breakdown,
        plan: out.plan,
        execution: out.report,
    };
    if a.output.table {
        println!("query {} on {} workers, mode {}: {} tuples", q.name(), report.workers, out.mode.as_str(), report.cardinality);
        print!("{}", cost_table(&[("measured (s)", report.costs)]));
    } else {
        print_json(&report);
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    query: String,
    attribute_order: Vec<String>,
    k: usize,
    estimate: f64,
    val_count: usize,
    samples_used: usize,
    exhaustive: bool,
    /// Uses the largest observed sample as the range bound, so only indicative.
    heuristic_interval: (f64, f64),
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Sweep>,
}

#[derive(Serialize)]
struct Sweep {
    truth: u64,
    runs: Vec<SweepRun>,
}

#[derive(Serialize)]
struct SweepRun {
    k: usize,
    estimate: f64,
    /// max(est, truth) / min(est, truth).
    d: f64,
    seconds: f64,
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), Failure> {
    let q = load_query(&a.data.query)?;
    let db = load_database(&q, &a.data)?;
    let ord = match &a.order {
        Some(names) => q.order_from_names(names)?,
        None => (0..q.num_attributes()).collect(),
    };
    let mut cfg = SampleConfig::new(if a.exhaustive { usize::MAX } else { a.data.samples }, a.data.seed)?;
    cfg.force_sampling = a.force_sampling;
    let est = estimate_cardinality(&q, &db, &cfg, &ord)?;
    let sweep = match &a.sweep {
        None => None,
        Some(ks) => {
            let exact = SampleConfig::new(usize::MAX, a.data.seed)?;
            let truth = estimate_cardinality(&q, &db, &exact, &ord)?.estimate.round() as u64;
            let mut runs = Vec::new();
            for &k in ks {
                let mut c = SampleConfig::new(k, a.data.seed)?;
                c.force_sampling = true;
                let start = Instant::now();
                let e = estimate_cardinality(&q, &db, &c, &ord)?;
                let (hi, lo) = if e.estimate > truth as f64 { (e.estimate, truth as f64) } else { (truth as f64, e.estimate) };
                runs.push(SweepRun {
                    k,
                    estimate: e.estimate,
                    d: if hi == 0.0 { 1.0 } else if lo == 0.0 { f64::INFINITY } else { hi / lo },
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            Some(Sweep { truth, runs })
        }
    };
    print_json(&EstimateOutput {
        query: q.name().to_string(),
        attribute_order: ord.iter().map(|&i| q.attr_name(i).to_string()).collect(),
        k: cfg.k,
        estimate: est.estimate,
        val_count: est.val_count,
        samples_used: est.samples_used,
        exhaustive: est.exhaustive,
        heuristic_interval: est.interval,
        seconds: est.seconds,
        sweep,
    });
    Ok(())
}

#[derive(Serialize)]
struct CalibrateOutput {
    cache: PathBuf,
    reused: bool,
    calibration: Calibration,
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    if !a.force {
        if let Some(cal) = read_cache(a.workers) {
            print_json(&CalibrateOutput { cache: cache_path(a.workers), reused: true, calibration: cal });
            return Ok(());
        }
    }
    let cal = engine::calibrate(&ClusterOptions::new(a.workers, a.seed), a.tuples, a.seeks)?;
    let path = write_cache(&cal)?;
    print_json(&CalibrateOutput { cache: path, reused: false, calibration: cal });
    Ok(())
}
