use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;

use dtrace_core::baselines::Solver;
use dtrace_core::dtrace::{lambda_max, CovarianceFactor};
use dtrace_core::evalkit::{
    bench_protocol, cross_validate, linear_grid, run_solver_path, write_cv_csv, BenchConfig, CvConfig, LambdaChoice,
    Mode, PathPoint, SolverConfigs,
};
use dtrace_core::reduction::write_coordinate;
use dtrace_core::sieving::{solve_path, write_path_dir, MarsConfig, PathSpec};
use dtrace_core::synth::{
    build_theta, load_csv, make_factor, sample_gaussian, standardize, write_dataset_csv, write_theta, ModelSpec,
};
use dtrace_core::Error as CoreError;

#[derive(Parser, Debug)]
#[command(name = "dtrace", version, about = "Sparse precision matrix estimation with the l1-penalized D-trace loss")]
struct Cli {
    /// Seed for data generation, fold assignment and benchmarks.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for CV folds and benchmark cells (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Target relative KKT residual.
    #[arg(long, global = true, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// File of `key = value` lines naming long flags; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its true precision matrix.
    Gen(GenArgs),
    /// Solve at a single lambda.
    Solve(SolveArgs),
    /// Solve along a decreasing lambda path.
    Path(PathArgs),
    /// K-fold cross-validation over a lambda grid.
    Cv(CvArgs),
    /// Timing and accuracy benchmark over synthetic models.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    model: u8,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    n: usize,
    /// File stem for `<out>.csv` and `<out>_theta.coo` inside --out-dir.
    #[arg(long, default_value = "data")]
    out: String,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Samples as CSV (rows = samples).
    #[arg(long, conflicts_with = "factor")]
    data: Option<PathBuf>,
    /// Covariance factor A as CSV (p rows, n columns) with AAᵀ = Σ̂.
    #[arg(long)]
    factor: Option<PathBuf>,
    /// The CSV has a header row.
    #[arg(long)]
    header: bool,
    /// Use the data as is instead of standardizing every column.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value = "mars")]
    solver: String,
}

#[derive(Args, Debug)]
struct PathArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Comma-separated decreasing lambdas.
    #[arg(long, conflicts_with = "grid")]
    lambdas: Option<String>,
    /// `min:max:count`, equally spaced from max down to min.
    #[arg(long)]
    grid: Option<String>,
    /// Solve every lambda from scratch.
    #[arg(long, conflicts_with = "warm")]
    cold: bool,
    /// Warm-start each lambda from the previous one (default).
    #[arg(long)]
    warm: bool,
    #[arg(long, default_value = "mars")]
    solver: String,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    no_standardize: bool,
    /// `min:max:count`
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Small,
    PaperDesk,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "small")]
    suite: Suite,
    /// Comma-separated solver names; defaults to the suite's list.
    #[arg(long)]
    solvers: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated model ids; defaults to the suite's list.
    #[arg(long)]
    models: Option<String>,
    /// `PxN` problem size; defaults to the suite's.
    #[arg(long)]
    dims: Option<String>,
    /// Also run cold-started paths.
    #[arg(long)]
    cold: bool,
    /// Iteration limit of the ADMM baselines.
    #[arg(long)]
    max_admm_iter: Option<usize>,
    /// Exit with status 3 when a benchmark gate fails.
    #[arg(long)]
    gate: bool,
}

/// Bad input detected before any solving.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct GateFailed;

impl std::fmt::Display for GateFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("benchmark gate failed")
    }
}

impl std::error::Error for GateFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GateFailed>().is_some() {
        return 3;
    }
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<CoreError>() {
        Some(
            CoreError::InvalidDimension(_)
            | CoreError::InvalidParameter(_)
            | CoreError::UnknownSolver(_)
            | CoreError::Parse { .. }
            | CoreError::RaggedRows { .. }
            | CoreError::DegenerateVariable { .. }
            | CoreError::DimensionMismatch(_)
            | CoreError::MemoryCapExceeded { .. }
            | CoreError::File { .. },
        ) => 2,
        _ => 1,
    }
}

/// Reads `key = value` lines; `#` starts a comment.
fn read_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected `key = value`", path.display(), k + 1)))?;
        out.push((key.trim().trim_start_matches("--").to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn explicitly_set(m: &ArgMatches, id: &str) -> bool {
    let here = m
        .try_contains_id(id)
        .ok()
        .filter(|&b| b)
        .and_then(|_| m.value_source(id))
        == Some(ValueSource::CommandLine);
    here || m.subcommand().is_some_and(|(_, sub)| explicitly_set(sub, id))
}

/// Parses argv, then appends flags from `--config` that were not given on
/// the command line and parses again.
fn parse_args() -> Result<(Cli, Vec<String>), clap::Error> {
    let args: Vec<String> = std::env::args().collect();
    let matches = Cli::command().try_get_matches_from(&args)?;
    let mut cli = Cli::from_arg_matches(&matches)?;
    let Some(path) = cli.config.clone() else {
        return Ok((cli, args));
    };
    let entries = read_config(&path).map_err(|e| Cli::command().error(clap::error::ErrorKind::Io, e.to_string()))?;
    let mut extended = args.clone();
    for (key, value) in entries {
        let id = key.replace('-', "_");
        if explicitly_set(&matches, &id) {
            continue;
        }
        match value.as_str() {
            "true" => extended.push(format!("--{key}")),
            "false" => {}
            _ => {
                extended.push(format!("--{key}"));
                extended.push(value);
            }
        }
    }
    cli = Cli::try_parse_from(&extended)?;
    Ok((cli, extended))
}

fn header(cli: &Cli, args: &[String]) -> Vec<String> {
    vec![
        format!("dtrace {} seed={}", env!("CARGO_PKG_VERSION"), cli.seed),
        format!("flags: {}", args[1..].join(" ")),
    ]
}

fn parse_solver(name: &str) -> anyhow::Result<Solver> {
    name.parse::<Solver>().map_err(|e| usage(e.to_string()))
}

fn parse_grid(s: &str) -> anyhow::Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(usage(format!("grid must be min:max:count, got `{s}`")));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| usage(format!("bad grid min `{}`", parts[0])))?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| usage(format!("bad grid max `{}`", parts[1])))?;
    let count: usize = parts[2].trim().parse().map_err(|_| usage(format!("bad grid count `{}`", parts[2])))?;
    if !(lo > 0.0 && hi > lo && count > 0) {
        return Err(usage(format!("grid needs 0 < min < max and count > 0, got `{s}`")));
    }
    Ok((lo, hi, count))
}

/// Grid values from `max` down to `min`, with `max` capped at `λ_max`.
fn grid_lambdas(spec: &str, lmax: f64) -> anyhow::Result<Vec<f64>> {
    let (lo, mut hi, count) = parse_grid(spec)?;
    if hi > lmax {
        eprintln!("notice: grid max {hi} capped at lambda_max {lmax:.6}");
        hi = lmax;
    }
    if lo >= hi {
        return Err(usage(format!("grid min {lo} is not below lambda_max {lmax:.6}")));
    }
    Ok(linear_grid(hi, lo, count)?)
}

fn parse_lambdas(s: &str) -> anyhow::Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| usage(format!("bad lambda `{x}`"))))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    if v.is_empty() || v.iter().any(|&l| !(l > 0.0)) || v.windows(2).any(|w| w[1] >= w[0]) {
        return Err(usage("lambdas must be positive and strictly decreasing"));
    }
    Ok(v)
}

fn load_factor(input: &DataArgs) -> anyhow::Result<CovarianceFactor> {
    match (&input.data, &input.factor) {
        (Some(path), None) => {
            let mut ds = load_csv(path, input.header)?;
            if !input.no_standardize {
                standardize(&mut ds);
            }
            Ok(make_factor(&ds)?)
        }
        (None, Some(path)) => {
            let ds = load_csv(path, input.header)?;
            Ok(CovarianceFactor::new(ds.x))
        }
        _ => Err(usage("exactly one of --data or --factor is required")),
    }
}

fn write_estimate(path: &Path, point: &PathPoint, comments: &[String]) -> anyhow::Result<()> {
    let f = fs::File::create(path).with_context(|| path.display().to_string())?;
    write_coordinate(BufWriter::new(f), &point.estimate, comments)?;
    Ok(())
}

fn stats_line(q: &PathPoint) -> String {
    format!(
        "lambda={:.6e} eta={:.3e} objective={:.10e} s_off={} s_bar_off={} wall_ms={:.1} converged={}",
        q.lambda, q.eta, q.objective, q.s_off, q.s_bar_off, q.wall_ms, q.converged
    )
}

fn check_tol(tol: f64) -> anyhow::Result<()> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(usage(format!("--tol must lie in (0, 1), got {tol}")));
    }
    Ok(())
}

fn cmd_gen(cli: &Cli, a: &GenArgs, hdr: &[String]) -> anyhow::Result<()> {
    let spec = ModelSpec::new(a.model, a.p, a.n, cli.seed).map_err(|e| usage(e.to_string()))?;
    let theta = build_theta(&spec)?;
    let ds = sample_gaussian(&theta, a.n, cli.seed)?;
    let data = cli.out_dir.join(format!("{}.csv", a.out));
    let truth = cli.out_dir.join(format!("{}_theta.coo", a.out));
    write_dataset_csv(&data, &ds, hdr)?;
    write_theta(&truth, &theta, hdr)?;
    let mut st = ds.clone();
    standardize(&mut st);
    let lmax = lambda_max(&make_factor(&st)?)?;
    println!("wrote {} and {}", data.display(), truth.display());
    println!("lambda_max={lmax:.10} (standardized data)");
    Ok(())
}

fn cmd_solve(cli: &Cli, a: &SolveArgs, hdr: &[String]) -> anyhow::Result<()> {
    let solver = parse_solver(&a.solver)?;
    if !(a.lambda > 0.0) {
        return Err(usage(format!("--lambda must be positive, got {}", a.lambda)));
    }
    let factor = load_factor(&a.input)?;
    let pts = run_solver_path(solver, &factor, &[a.lambda], cli.tol, true, &SolverConfigs::default())?;
    let q = &pts[0];
    write_estimate(&cli.out_dir.join("estimate.coo"), q, hdr)?;
    println!("solver={solver} {}", stats_line(q));
    if !q.converged {
        bail!("{solver} stopped at eta {:.3e} above tol {:e}", q.eta, cli.tol);
    }
    Ok(())
}

fn cmd_path(cli: &Cli, a: &PathArgs, hdr: &[String]) -> anyhow::Result<()> {
    let solver = parse_solver(&a.solver)?;
    let factor = load_factor(&a.input)?;
    let lmax = lambda_max(&factor)?;
    let lambdas = match (&a.lambdas, &a.grid) {
        (Some(l), None) => parse_lambdas(l)?,
        (None, Some(g)) => grid_lambdas(g, lmax)?,
        _ => return Err(usage("exactly one of --lambdas or --grid is required")),
    };
    let dir = cli.out_dir.join("path");
    let converged = if solver == Solver::Mars {
        let mut spec = PathSpec::new(lambdas, cli.tol)?;
        spec.cold = a.cold;
        let res = solve_path(&factor, &spec, &MarsConfig::default())?;
        write_path_dir(&dir, &res, hdr)?;
        for e in &res.entries {
            println!(
                "lambda={:.6e} eta={:.3e} s_off={} rounds={} wall_ms={:.1}",
                e.lambda, e.eta, e.s_off, e.sieve_rounds, e.wall_ms
            );
        }
        res.entries.iter().all(|e| e.converged)
    } else {
        let pts = run_solver_path(solver, &factor, &lambdas, cli.tol, a.cold, &SolverConfigs::default())?;
        write_points_dir(&dir, &pts, hdr)?;
        for q in &pts {
            println!("{}", stats_line(q));
        }
        pts.iter().all(|q| q.converged)
    };
    println!("wrote {}", dir.display());
    if !converged {
        bail!("some lambdas stopped above tol {:e}", cli.tol);
    }
    Ok(())
}

fn write_points_dir(dir: &Path, pts: &[PathPoint], hdr: &[String]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let mut csv = hdr.iter().map(|c| format!("# {c}\n")).collect::<String>();
    csv.push_str("index,lambda,eta,objective,s_off,s_bar_off,wall_ms,converged\n");
    for (k, q) in pts.iter().enumerate() {
        write_estimate(&dir.join(format!("lambda_{k:03}.coo")), q, hdr)?;
        csv.push_str(&format!(
            "{k},{:?},{:e},{:?},{},{},{:.3},{}\n",
            q.lambda, q.eta, q.objective, q.s_off, q.s_bar_off, q.wall_ms, q.converged as u8
        ));
    }
    fs::write(dir.join("path.csv"), csv)?;
    Ok(())
}

fn cmd_cv(cli: &Cli, a: &CvArgs, hdr: &[String]) -> anyhow::Result<()> {
    let mut ds = load_csv(&a.data, a.header)?;
    if !a.no_standardize {
        standardize(&mut ds);
    }
    let lmax = lambda_max(&make_factor(&ds)?)?;
    let grid = grid_lambdas(&a.grid, lmax)?;
    if a.folds < 2 || a.folds > ds.n() {
        return Err(usage(format!("--folds must lie in 2..={}, got {}", ds.n(), a.folds)));
    }
    let rep = cross_validate(&ds, &grid, &CvConfig::new(a.folds, cli.seed, cli.tol))?;
    write_cv_csv(&cli.out_dir.join("cv.csv"), &rep, hdr)?;
    let f = fs::File::create(cli.out_dir.join("estimate.coo"))?;
    write_coordinate(BufWriter::new(f), &rep.refit.estimate, hdr)?;
    println!(
        "chosen lambda={:.6e} (index {}) eta={:.3e} s_off={}",
        rep.chosen_lambda, rep.chosen_index, rep.refit.eta, rep.refit.s_off
    );
    println!("criterion: held-out D-trace loss");
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, hdr: &[String]) -> anyhow::Result<()> {
    let mut cfg = match a.suite {
        Suite::Small => BenchConfig::small(),
        Suite::PaperDesk => BenchConfig::paper_desk(),
    };
    cfg.seed = cli.seed;
    cfg.tol = cli.tol;
    if let Some(s) = &a.solvers {
        cfg.solvers = s.split(',').map(parse_solver).collect::<anyhow::Result<_>>()?;
    }
    if let Some(r) = a.reps {
        if r == 0 {
            return Err(usage("--reps must be positive"));
        }
        cfg.reps = r;
    }
    if let Some(m) = &a.models {
        cfg.models = m
            .split(',')
            .map(|x| match x.trim().parse::<u8>() {
                Ok(v @ 1..=5) => Ok(v),
                _ => Err(usage(format!("bad model `{x}`"))),
            })
            .collect::<anyhow::Result<_>>()?;
    }
    if let Some(d) = &a.dims {
        let (p, n) = d
            .split_once(['x', 'X'])
            .and_then(|(p, n)| Some((p.trim().parse().ok()?, n.trim().parse().ok()?)))
            .ok_or_else(|| usage(format!("--dims must be PxN, got `{d}`")))?;
        cfg.dims = vec![(p, n)];
    }
    if let Some(m) = a.max_admm_iter {
        if m == 0 {
            return Err(usage("--max-admm-iter must be positive"));
        }
        cfg.solver_cfgs.baseline.max_admm_iter = m;
    }
    if a.cold && !cfg.modes.contains(&Mode::Cold) {
        cfg.modes.push(Mode::Cold);
    }
    if let LambdaChoice::Pretest { .. } = cfg.lambdas {
        info!("lambda grids from the sparsity pretest");
    }
    let t0 = Instant::now();
    let report = bench_protocol(&cfg)?;
    report.write_csv(&cli.out_dir.join("bench.csv"), hdr)?;
    report.write_text(&cli.out_dir.join("bench.txt"), hdr)?;
    print!("{}", report.to_text());
    let gates = report.gates();
    for g in &gates {
        println!("gate {:<28} {} ({})", g.name, if g.passed { "pass" } else { "FAIL" }, g.detail);
    }
    println!("total {:.1} s", t0.elapsed().as_secs_f64());
    if a.gate && gates.iter().any(|g| !g.passed) {
        return Err(GateFailed.into());
    }
    Ok(())
}

fn run(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    check_tol(cli.tol)?;
    fs::create_dir_all(&cli.out_dir).map_err(|e| usage(format!("{}: {e}", cli.out_dir.display())))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let hdr = header(cli, args);
    match &cli.cmd {
        Command::Gen(a) => cmd_gen(cli, a, &hdr),
        Command::Solve(a) => cmd_solve(cli, a, &hdr),
        Command::Path(a) => cmd_path(cli, a, &hdr),
        Command::Cv(a) => cmd_cv(cli, a, &hdr),
        Command::Bench(a) => cmd_bench(cli, a, &hdr),
    }
}

fn main() -> ExitCode {
    let (cli, args) = match parse_args() {
        Ok(v) => v,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
