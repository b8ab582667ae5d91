// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};

use hawkes_online::batch::{batch_fit, BatchConfig, BatchObjective};
use hawkes_online::config::{self, Config};
use hawkes_online::eval::{aggregate_runs, tune_step_size, RunManifest};
use hawkes_online::events::{discretize, ingest, BinnedCounts, Event, EventFormat, EventStream, IngestOptions};
use hawkes_online::experiment::{profile_from_manifest, replicate, ExperimentProfile, AGGREGATE_POINTS};
use hawkes_online::io::{save_matrix, write_matrix};
use hawkes_online::kernels::InfluenceKernel;
use hawkes_online::loss::LossTrace;
use hawkes_online::netlearn::{Learner, LearnerConfig, Ogd, DEFAULT_L1_PENALTY, DEFAULT_RHO0};
use hawkes_online::projections::FeasibleSet;
use hawkes_online::simulate::{branching_ratio, generate_block_network, simulate_hawkes, BlockNetworkSpec, GeneratorConfig};
use hawkes_online::tracker::{StepSchedule, Tracker, TrackerConfig, DEFAULT_ETA0, DEFAULT_LAMBDA_MAX, DEFAULT_LAMBDA_MIN};
use hawkes_online::{Error, Result};

#[derive(Parser)]
#[command(name = "hawkes-online", version, about = "Online rate tracking and network learning for multivariate Hawkes processes")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Hawkes process by thinning.
    Simulate(SimulateArgs),
    /// Track rates with a known network.
    Track(RunArgs),
    /// Learn the network and rates online.
    Learn(RunArgs),
    /// Fit the network in batch by proximal gradient.
    Batch(BatchArgs),
    /// Aggregate a replication directory into summary CSVs.
    Eval(EvalArgs),
    /// Run a replication profile end to end.
    Replicate(ReplicateArgs),
    /// Print the next-bin rate forecast after reading a stream.
    Forecast(ForecastArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Events file (`.csv` or `.jsonl`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    w_out: Option<PathBuf>,
    /// Multiply the horizon `T`.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Bin width; overrides the config.
    #[arg(long)]
    delta: Option<f64>,
    /// Write each forecast before its bin is read.
    #[arg(long)]
    emit_forecasts: bool,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Fitted matrix.
    #[arg(long)]
    out: PathBuf,
    /// Objective per iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Points kept per curve.
    #[arg(long, default_value_t = AGGREGATE_POINTS)]
    points: usize,
}

#[derive(Args)]
struct ReplicateArgs {
    /// mismatch_exp, mismatch_rect, blocknet or memestyle.
    profile: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run the profile, seeds and scale recorded in a manifest.
    #[arg(long, conflicts_with = "profile")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    delta: Option<f64>,
    /// Write the forecast here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Track(a) => track(a),
        Command::Learn(a) => learn(a),
        Command::Batch(a) => batch(a),
        Command::Eval(a) => aggregate_runs(&a.runs, &a.out, a.points),
        Command::Replicate(a) => replicate_cmd(a),
        Command::Forecast(a) => forecast(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("missing required key `{key}`")))
}

/// Actor count from the config, or from the shapes of the matrices it names.
fn actor_count(cfg: &Config, matrix_key: &str) -> Result<(Option<usize>, Option<DMatrix<f64>>)> {
    let w = cfg.matrix(matrix_key)?;
    let p = cfg.usize("p")?;
    if let (Some(p), Some(w)) = (p, &w) {
        if w.nrows() != p || w.ncols() != p {
            return Err(Error::Dimension { expected: p, got: w.nrows() });
        }
    }
    Ok((p.or(w.as_ref().map(|w| w.nrows())), w))
}

fn read_events(path: &Path, p: Option<usize>, horizon: Option<f64>) -> Result<EventStream> {
    let f = BufReader::new(File::open(path)?);
    ingest(f, EventFormat::from_path(path), IngestOptions { p, horizon })
}

fn delta_of(cfg: &Config, flag: Option<f64>) -> Result<f64> {
    let d = match flag {
        Some(d) => d,
        None => required(cfg.f64("delta")?, "delta")?,
    };
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::config(format!("delta must be positive, got {d}")));
    }
    Ok(d)
}

/// Shared setup for the streaming commands.
struct Session {
    cfg: Config,
    bins: BinnedCounts,
    kernel: InfluenceKernel,
    mu_bar: DVector<f64>,
    w: Option<DMatrix<f64>>,
}

impl Session {
    fn open(config: &Path, events: &Path, delta: Option<f64>, keys: &[&str], matrix_key: &str) -> Result<Self> {
        let cfg = Config::load(config)?;
        cfg.ensure_known(keys)?;
        let (mut p, w) = actor_count(&cfg, matrix_key)?;
        if p.is_none() {
            p = cfg.mu_bar(None).ok().flatten().map(|m| m.len());
        }
        let stream = read_events(events, p, cfg.f64("T")?)?;
        let p = stream.p();
        let delta = delta_of(&cfg, delta)?;
        let kernel = required(cfg.kernel()?, "kernel")?;
        kernel.validate(delta)?;
        let mu_bar = required(cfg.mu_bar(Some(p))?, "mu_bar")?;
        let bins = discretize(&stream, delta)?;
        info!("{} events, {p} actors, {} bins", stream.len(), bins.n_bins());
        Ok(Self { cfg, bins, kernel, mu_bar, w })
    }

    fn tracker_config(&self) -> Result<TrackerConfig> {
        let n = self.bins.n_bins();
        let eta0 = self.cfg.f64("eta0")?.unwrap_or(DEFAULT_ETA0);
        let schedule = StepSchedule::parse(self.cfg.str("schedule").unwrap_or("constant"), eta0, n)?;
        let tc = TrackerConfig {
            delta: self.bins.delta(),
            schedule,
            lambda_min: self.cfg.f64("lambda_min")?.unwrap_or(DEFAULT_LAMBDA_MIN),
            lambda_max: self.cfg.f64("lambda_max")?.unwrap_or(DEFAULT_LAMBDA_MAX),
        };
        tc.validate()?;
        Ok(tc)
    }

    fn with_eta0(&self, tc: TrackerConfig, eta0: f64) -> Result<TrackerConfig> {
        let schedule = match tc.schedule {
            StepSchedule::Constant { n_bins, .. } => StepSchedule::Constant { eta0, n_bins },
            StepSchedule::SqrtT { .. } => StepSchedule::SqrtT { eta0 },
            StepSchedule::Zero => StepSchedule::Zero,
        };
        schedule.validate()?;
        Ok(TrackerConfig { schedule, ..tc })
    }

    fn window(&self) -> Result<Option<f64>> {
        self.cfg.f64("window")
    }
}

fn rho_schedule(cfg: &Config, n_bins: usize) -> Result<StepSchedule> {
    let rho0 = cfg.f64("rho0")?.unwrap_or(DEFAULT_RHO0);
    if !(rho0 >= 0.0) {
        return Err(Error::config(format!("rho0 must be nonnegative, got {rho0}")));
    }
    match cfg.str("rho_schedule").unwrap_or("constant") {
        "constant" => Ok(StepSchedule::Constant { eta0: rho0, n_bins }),
        "sqrt_t" => Ok(StepSchedule::SqrtT { eta0: rho0 }),
        "zero" => Ok(StepSchedule::Zero),
        other => Err(Error::config(format!("unknown rho_schedule `{other}`"))),
    }
}

/// One online estimator behind a common face.
enum Online {
    Track(Tracker),
    Alg2(Box<Learner>),
    Ogd(Box<Ogd>),
}

impl Online {
    fn forecast(&self) -> &DVector<f64> {
        match self {
            Online::Track(t) => t.forecast(),
            Online::Alg2(l) => l.forecast(),
            Online::Ogd(o) => o.forecast(),
        }
    }

    fn observe(&mut self, events: &[Event]) -> Result<f64> {
        match self {
            Online::Track(t) => t.observe_bin(events),
            Online::Alg2(l) => l.observe_bin(events),
            Online::Ogd(o) => o.observe_bin(events),
        }
    }

    fn weights(&self) -> Option<DMatrix<f64>> {
        match self {
            Online::Track(_) => None,
            Online::Alg2(l) => Some(l.weights()),
            Online::Ogd(o) => Some(o.weights().clone()),
        }
    }
}

fn forecast_row(out: &mut impl Write, t: usize, lambda: &DVector<f64>) -> Result<()> {
    write!(out, "{t}")?;
    for v in lambda.iter() {
        write!(out, ",{v}")?;
    }
    writeln!(out)?;
    Ok(())
}

/// Build the estimator named by `method` (`track`, `alg2` or `ogd`).
fn build_online(s: &Session, method: &str) -> Result<Online> {
    let mut tc = s.tracker_config()?;
    let n = s.bins.n_bins();
    if let Some(grid) = s.cfg.f64_list("tune_eta0")? {
        let base = tc;
        let (best, scores) = tune_step_size(&s.bins, &grid, 0.05, |prefix, eta0| {
            let cfg = s.with_eta0(base, eta0)?;
            let mut est = online_from(s, method, cfg, n)?;
            let mut trace = LossTrace::new(prefix.delta(), None)?.summary_only();
            for t in 1..=prefix.n_bins() {
                trace.push(t, est.observe(prefix.bin_events(t))?);
            }
            Ok(trace.cumulative())
        })?;
        info!("tuned eta0 = {best} (prefix losses {scores:?})");
        tc = s.with_eta0(base, best)?;
    }
    online_from(s, method, tc, n)
}

fn online_from(s: &Session, method: &str, tc: TrackerConfig, n: usize) -> Result<Online> {
    match method {
        "track" => {
            let w = s.w.clone().ok_or_else(|| Error::config("tracking needs the network `W`"))?;
            Ok(Online::Track(Tracker::new(s.kernel.clone(), w, s.mu_bar.clone(), tc)?))
        }
        "alg2" | "ogd" => {
            let cfg = LearnerConfig {
                tracker: tc,
                rho: rho_schedule(&s.cfg, n)?,
                l1_penalty: s.cfg.f64("l1_penalty")?.unwrap_or(DEFAULT_L1_PENALTY),
                feasible: s.cfg.feasible_set()?.unwrap_or(FeasibleSet::default()),
                learn_mu: s.cfg.bool("learn_mu")?.unwrap_or(false),
            };
            if method == "alg2" {
                Ok(Online::Alg2(Box::new(Learner::new(s.kernel.clone(), s.mu_bar.clone(), s.w.clone(), cfg)?)))
            } else {
                Ok(Online::Ogd(Box::new(Ogd::new(s.kernel.clone(), s.mu_bar.clone(), s.w.clone(), cfg)?)))
            }
        }
        other => Err(Error::config(format!("unknown method `{other}` (expected track, alg2 or ogd)"))),
    }
}

/// Stream every bin through `est`, writing losses and optionally forecasts.
fn stream_bins(s: &Session, est: &mut Online, out: &Path, emit: bool, snapshot_every: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut trace = LossTrace::new(s.bins.delta(), s.window()?)?;
    let mut fc = if emit { Some(writer(&out.join("forecasts.csv"))?) } else { None };
    if let Some(f) = fc.as_mut() {
        let header: Vec<String> = (0..s.bins.p()).map(|k| format!("lambda_{k}")).collect();
        writeln!(f, "t,{}", header.join(","))?;
    }
    let snap_dir = out.join("snapshots");
    if snapshot_every.is_some() {
        std::fs::create_dir_all(&snap_dir)?;
    }
    let n = s.bins.n_bins();
    for t in 1..=n {
        if let Some(f) = fc.as_mut() {
            forecast_row(f, t, est.forecast())?;
        }
        let loss = est.observe(s.bins.bin_events(t))?;
        trace.push(t, loss);
        if !trace.cumulative().is_finite() {
            return Err(Error::numerical(format!("cumulative loss overflowed in bin {t}")));
        }
        if snapshot_every.is_some_and(|e| t % e == 0 || t == n) {
            if let Some(w) = est.weights() {
                save_matrix(&w, &snap_dir.join(format!("W_{t:0width$}.csv", width = n.to_string().len())))?;
            }
        }
    }
    if let Some(mut f) = fc {
        forecast_row(&mut f, n + 1, est.forecast())?;
        f.flush()?;
    }
    trace.write_csv(writer(&out.join("loss.csv"))?)?;
    println!("bins {n}  cumulative loss {}", trace.cumulative());
    Ok(())
}

fn track(a: RunArgs) -> Result<()> {
    let s = Session::open(&a.config, &a.events, a.delta, config::TRACK_KEYS, "W")?;
    let mut est = build_online(&s, "track")?;
    stream_bins(&s, &mut est, &a.out, a.emit_forecasts, None)
}

fn learn(a: RunArgs) -> Result<()> {
    let s = Session::open(&a.config, &a.events, a.delta, config::LEARN_KEYS, "W0")?;
    let method = s.cfg.str("method").unwrap_or("alg2").to_string();
    if method == "track" {
        return Err(Error::config("`learn` runs alg2 or ogd; use `track` for a known network"));
    }
    let mut est = build_online(&s, &method)?;
    let every = s.cfg.usize("snapshot_every")?.filter(|&e| e > 0);
    stream_bins(&s, &mut est, &a.out, a.emit_forecasts, every)?;
    if let Some(w) = est.weights() {
        save_matrix(&w, &a.out.join("W_final.csv"))?;
    }
    if let Online::Alg2(l) = &est {
        if s.cfg.bool("learn_mu")?.unwrap_or(false) {
            let mu = l.baseline();
            save_matrix(&DMatrix::from_column_slice(mu.len(), 1, mu.as_slice()), &a.out.join("mu_final.csv"))?;
        }
        if l.clamp_count() > 0 {
            warn!("{} rate coordinates were clamped into [lambda_min, lambda_max]", l.clamp_count());
        }
    }
    Ok(())
}

fn forecast(a: ForecastArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    let mut keys = config::FORECAST_KEYS.to_vec();
    keys.push("W");
    let method = cfg.str("method").unwrap_or("track").to_string();
    let matrix_key = if method == "track" { "W" } else { "W0" };
    let s = Session::open(&a.config, &a.events, a.delta, &keys, matrix_key)?;
    let mut est = build_online(&s, &method)?;
    for t in 1..=s.bins.n_bins() {
        est.observe(s.bins.bin_events(t))?;
    }
    let row: Vec<String> = est.forecast().iter().map(|v| v.to_string()).collect();
    match a.out {
        Some(path) => writeln!(writer(&path)?, "{}", row.join(","))?,
        None => println!("{}", row.join(",")),
    }
    Ok(())
}

fn batch(a: BatchArgs) -> Result<()> {
    let s = Session::open(&a.config, &a.events, a.delta, config::BATCH_KEYS, "W0")?;
    let defaults = BatchConfig::default();
    let bc = BatchConfig {
        gamma: s.cfg.f64("gamma")?.unwrap_or(defaults.gamma),
        max_outer: s.cfg.usize("max_outer")?.unwrap_or(defaults.max_outer),
        tol: s.cfg.f64("tol")?.unwrap_or(defaults.tol),
        max_line_search: s.cfg.usize("max_line_search")?.unwrap_or(defaults.max_line_search),
    };
    let obj = BatchObjective::new(&s.bins, &s.kernel, s.mu_bar.clone())?;
    let fit = batch_fit(&obj, s.w.clone(), &bc)?;
    save_matrix(&fit.w, &a.out)?;
    if let Some(path) = a.trace {
        let mut f = writer(&path)?;
        writeln!(f, "iter,objective")?;
        for (i, v) in fit.trace.iter().enumerate() {
            writeln!(f, "{i},{v}")?;
        }
        f.flush()?;
    }
    if !fit.converged {
        warn!("batch fit stopped after {} iterations without meeting the tolerance", bc.max_outer);
    }
    println!("objective {}", fit.trace.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = Config::load(&a.config)?;
    cfg.ensure_known(config::SIMULATE_KEYS)?;
    let kernel = required(cfg.kernel()?, "kernel")?;
    let mut horizon = required(cfg.f64("T")?, "T")?;
    if let Some(s) = a.scale {
        if !(s > 0.0) {
            return Err(Error::config(format!("scale must be positive, got {s}")));
        }
        horizon *= s;
    }
    let (p, w_file) = actor_count(&cfg, "W")?;
    let w = match (cfg.str("network"), w_file) {
        (Some("block"), None) => {
            let p = required(p, "p")?;
            let spec = BlockNetworkSpec { block_size: cfg.usize("block_size")?.unwrap_or(20), ..BlockNetworkSpec::with_p(p) };
            generate_block_network(&spec, cfg.u64("network_seed")?.unwrap_or(a.seed))?.0
        }
        (Some("block"), Some(_)) => return Err(Error::config("give either `W` or `network = block`, not both")),
        (Some(other), _) => return Err(Error::config(format!("unknown network `{other}`"))),
        (None, Some(w)) => w,
        (None, None) => DMatrix::zeros(required(p, "p")?, required(p, "p")?),
    };
    let mu_bar = required(cfg.mu_bar(Some(w.nrows()))?, "mu_bar")?;
    let rho = branching_ratio(&w, &kernel);
    if rho >= 1.0 {
        warn!("branching ratio {rho:.3} >= 1: the process is not stationary");
    }
    let sim = simulate_hawkes(&GeneratorConfig {
        horizon,
        mu_bar,
        w: w.clone(),
        kernel,
        seed: a.seed,
        max_events: cfg.usize("max_events")?,
    })?;
    if sim.capped {
        warn!("event cap reached; stream ends at t = {}", sim.stream.horizon());
    }
    let out = writer(&a.out)?;
    match EventFormat::from_path(&a.out) {
        EventFormat::Csv => sim.stream.write_csv(out)?,
        EventFormat::Jsonl => sim.stream.write_jsonl(out)?,
    }
    if let Some(path) = a.w_out {
        write_matrix(&w, writer(&path)?)?;
    }
    println!("events {}  horizon {}", sim.stream.len(), sim.stream.horizon());
    Ok(())
}

fn replicate_cmd(a: ReplicateArgs) -> Result<()> {
    let mut profile = match (&a.replay, &a.profile) {
        (Some(path), _) => {
            let dir = if path.is_dir() { path.clone() } else { path.parent().map(Path::to_path_buf).unwrap_or_default() };
            profile_from_manifest(&RunManifest::load(&dir)?)?
        }
        (None, Some(name)) => ExperimentProfile::named(name.parse()?),
        (None, None) => return Err(Error::config("name a profile or pass --replay")),
    };
    if let Some(s) = a.scale {
        profile = profile.scaled(s)?;
    }
    if let Some(n) = a.trials {
        profile.trials = n;
    }
    if let Some(b) = a.seed_base {
        profile.seed_base = b;
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(profile.name.as_str()));
    let manifest = replicate(&profile, &out)?;
    let ok: Vec<_> = manifest.trials.iter().filter(|t| t.ok).collect();
    println!("{}: {} trials ({} failed) in {}", manifest.profile, manifest.trials.len(), manifest.failed, out.display());
    for c in &manifest.comparisons {
        let wins = ok
            .iter()
            .filter(|t| match (t.cumulative.get(&c.method), t.cumulative.get(&c.reference)) {
                (Some(m), Some(r)) => m < r,
                _ => false,
            })
            .count();
        println!("  {} below {} in {wins}/{} trials", c.method, c.reference, ok.len());
    }
    if manifest.failed == manifest.trials.len() && !manifest.trials.is_empty() {
        return Err(Error::numerical("every trial failed"));
    }
    Ok(())
}
