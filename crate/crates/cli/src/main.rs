use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use odequery::harness::{
    build_test_set, compare_strategies, emit_plot_data, evaluate_on_test, load_candidates,
    run_discovery, CompareConfig, RunConfig,
};
use odequery::oracle::{resolve_dataset, BUILTIN_DATASETS};
use odequery::sketcher::QueryStrategy;
use odequery::symbolic::parse_system;

#[derive(Parser)]
#[command(name = "odequery", version, about = "Active discovery of ODE systems from a simulated oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the discovery loop and write a JSON report.
    Discover(DiscoverArgs),
    /// Score a fitted system on held-out trajectories of the truth.
    Evaluate(EvaluateArgs),
    /// Rank a fixed candidate set with each query strategy.
    Compare(CompareArgs),
    /// Inspect the benchmark registry.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
}

#[derive(Subcommand)]
enum RegistryAction {
    /// List records of one dataset, or of every built-in dataset.
    List {
        #[arg(long)]
        dataset: Option<String>,
    },
}

/// Ground-truth and data overrides shared by every subcommand.
#[derive(Args, Default)]
struct TruthArgs {
    /// Built-in dataset name or registry file.
    #[arg(long)]
    dataset: Option<String>,
    /// Record id within the dataset.
    #[arg(long)]
    id: Option<String>,
    /// Explicit truth, e.g. "x1 ; -0.9*sin(x0)". Overrides dataset/id.
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiscoverArgs {
    /// TOML file mirroring the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    truth: TruthArgs,
    /// Comma separated operators, e.g. "+,*,sin".
    #[arg(long)]
    operators: Option<String>,
    #[arg(long)]
    strategy: Option<QueryStrategy>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sequences sampled per epoch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    query_batch: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    region_width: Option<f64>,
    #[arg(long)]
    sketch_points: Option<usize>,
    #[arg(long)]
    sketch_horizon: Option<f64>,
    #[arg(long)]
    sketch_top_m: Option<usize>,
    #[arg(long)]
    fit_restarts: Option<usize>,
    #[arg(long)]
    fit_max_evals: Option<usize>,
    #[arg(long)]
    fit_parallelism: Option<usize>,
    /// Directory for the report and plot data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted system, e.g. "0.23*x0".
    #[arg(long)]
    system: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    truth: TruthArgs,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    test_horizon: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// One fitted system per line.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    truth: TruthArgs,
    /// Comma separated strategies; defaults to all four.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    reference_count: Option<usize>,
    /// Also print the comparison as JSON.
    #[arg(long)]
    json: bool,
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn apply_truth(
    args: &TruthArgs,
    truth: &mut odequery::harness::TruthConfig,
    data: &mut odequery::harness::DataConfig,
    seed: &mut u64,
) {
    if let Some(d) = &args.dataset {
        truth.dataset = d.clone();
        truth.expression = None;
    }
    if let Some(id) = &args.id {
        truth.id = id.clone();
        truth.expression = None;
    }
    if let Some(t) = &args.truth {
        truth.expression = Some(t.clone());
    }
    if let Some(v) = args.sigma2 {
        data.sigma2 = v;
    }
    if let Some(v) = args.alpha {
        data.alpha = v;
    }
    if let Some(v) = args.seed {
        *seed = v;
    }
}

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn discover(args: DiscoverArgs) -> Result<ExitCode> {
    let mut cfg: RunConfig = read_toml(args.config.as_deref())?;
    apply_truth(&args.truth, &mut cfg.truth, &mut cfg.data, &mut cfg.seed);
    if let Some(ops) = args.operators {
        cfg.grammar.operators = ops;
    }
    set(&mut cfg.strategy, args.strategy);
    set(&mut cfg.decoder.epochs, args.epochs);
    set(&mut cfg.decoder.batch, args.batch);
    set(&mut cfg.decoder.lr, args.lr);
    set(&mut cfg.decoder.max_len, args.max_len);
    set(&mut cfg.data.query_batch, args.query_batch);
    set(&mut cfg.sketch.regions, args.regions);
    set(&mut cfg.sketch.relative_width, args.region_width);
    set(&mut cfg.sketch.points, args.sketch_points);
    set(&mut cfg.sketch.horizon, args.sketch_horizon);
    set(&mut cfg.sketch_top_m, args.sketch_top_m);
    set(&mut cfg.fit.restarts, args.fit_restarts);
    set(&mut cfg.fit.max_evals, args.fit_max_evals);
    set(&mut cfg.fit.parallelism, args.fit_parallelism);
    if args.out.is_some() {
        cfg.output_dir = args.out;
    }

    let report = run_discovery(&cfg)?;
    let json = report.to_json()?;
    match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("report.json"), &json)?;
            let files = emit_plot_data(&report, dir)?;
            log::info!("event=written report={} plots={}", dir.join("report.json").display(), files.len());
        }
        None => println!("{json}"),
    }
    match (&report.best_system, &report.test) {
        (Some(best), Some(test)) => {
            eprintln!("best: {best}");
            eprintln!("test nmse {:.4e}  r2 {:.6}", test.nmse, test.r2_display);
            Ok(ExitCode::SUCCESS)
        }
        _ => {
            eprintln!("no system discovered");
            Ok(ExitCode::from(2))
        }
    }
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let mut cfg: RunConfig = read_toml(args.config.as_deref())?;
    apply_truth(&args.truth, &mut cfg.truth, &mut cfg.data, &mut cfg.seed);
    set(&mut cfg.test.count, args.test_count);
    set(&mut cfg.test.horizon, args.test_horizon);
    let system = parse_system(&args.system)?;
    if system.n_constants > 0 {
        bail!("system `{}` has unfitted constant slots", args.system);
    }
    let system = system.with_coefficients(Vec::new());
    let test = build_test_set(&cfg)?;
    let score = evaluate_on_test(&system, &test, cfg.test.dt)?;
    println!("{}", serde_json::to_string_pretty(&score)?);
    Ok(ExitCode::SUCCESS)
}

fn compare(args: CompareArgs) -> Result<ExitCode> {
    let mut cfg: CompareConfig = read_toml(args.config.as_deref())?;
    apply_truth(&args.truth, &mut cfg.truth, &mut cfg.data, &mut cfg.seed);
    set(&mut cfg.budget, args.budget);
    set(&mut cfg.reference_count, args.reference_count);
    let strategies: Vec<QueryStrategy> = match &args.strategies {
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()?,
        None => QueryStrategy::ALL.to_vec(),
    };
    let candidates = load_candidates(&args.candidates)?;
    let cmp = compare_strategies(&cfg, &candidates, &strategies)?;
    print!("{}", cmp.table());
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cmp)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn registry_list(dataset: Option<String>) -> Result<ExitCode> {
    let names: Vec<String> = match dataset {
        Some(d) => vec![d],
        None => BUILTIN_DATASETS.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let mut out = std::io::stdout().lock();
    for name in names {
        for e in resolve_dataset(&name)? {
            let domain = e
                .domain_or_default()
                .bounds()
                .iter()
                .map(|(a, b)| format!("[{a},{b}]"))
                .collect::<Vec<_>>()
                .join("x");
            writeln!(out, "{name}\t{}\t{}\t{}\t{domain}", e.id, e.name, e.system.render_registry())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(buf, "level={} target={} {}", record.level(), record.target(), record.args())
        })
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Discover(a) => discover(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Registry { action: RegistryAction::List { dataset } } => registry_list(dataset),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
