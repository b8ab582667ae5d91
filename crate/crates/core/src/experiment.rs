//! Replication profiles: simulated data, the estimators run on it, and the
//! on-disk layout of a replication directory.
//!
//! Trial `i` of a run uses seed `seed_base + i`. The same seed drives the
//! network and baseline draws (through a fixed offset) and the thinning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::batch::{batch_fit, batch_loss_curve, batch_loss_of, BatchConfig, BatchObjective};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, tune_step_size, Comparison, RunManifest, TrialRecord};
use crate::events::{discretize, BinnedCounts, EventStream};
use crate::kernels::InfluenceKernel;
use crate::loss::LossTrace;
use crate::netlearn::{run_learner, run_ogd, LearnerConfig};
use crate::simulate::{generate_block_network, simulate_hawkes, BlockNetworkSpec, GeneratorConfig};
use crate::tracker::{run, RunOptions, StepSchedule, TrackerConfig};

/// Offset separating the network/baseline stream from the thinning stream.
const NETWORK_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileName {
    MismatchExp,
    MismatchRect,
    Blocknet,
    Memestyle,
}

impl ProfileName {
    pub const ALL: [ProfileName; 4] =
        [ProfileName::MismatchExp, ProfileName::MismatchRect, ProfileName::Blocknet, ProfileName::Memestyle];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileName::MismatchExp => "mismatch_exp",
            ProfileName::MismatchRect => "mismatch_rect",
            ProfileName::Blocknet => "blocknet",
            ProfileName::Memestyle => "memestyle",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProfileName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown profile `{s}` (expected mismatch_exp, mismatch_rect, blocknet or memestyle)")))
    }
}

/// How the ground-truth influence matrix is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    /// `c·I`.
    ScaledIdentity(f64),
    /// Dense diagonal blocks plus sparse off-block entries.
    Block { block_size: usize },
    /// Block network whose blocks are the smallest divisor of `p` that is at
    /// least 10, scaled so that `W ∫h` has top singular value 0.8.
    BlockPerMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentProfile {
    pub name: ProfileName,
    pub p: usize,
    pub horizon: f64,
    /// Keep only the first events of the stream.
    pub max_events: Option<usize>,
    pub delta: f64,
    pub true_kernel: InfluenceKernel,
    pub network: Network,
    /// Generator baseline drawn from `U[lo, hi]` per actor.
    pub baseline: (f64, f64),
    /// Kernel assumed by the mismatched estimators.
    pub assumed_kernel: InfluenceKernel,
    /// Baseline handed to the estimators; the true one when absent.
    pub estimator_mu: Option<f64>,
    pub window: f64,
    pub eta0: f64,
    pub rho0: f64,
    pub l1_penalty: f64,
    /// Candidate `ρ₀` values tried on the first 5% of bins; empty skips tuning.
    pub rho_grid: Vec<f64>,
    /// `Ŵ` snapshots per learner for batch-loss curves; 0 disables them.
    pub snapshots: usize,
    pub trials: usize,
    pub seed_base: u64,
    pub scale: f64,
}

pub const TUNING_FRACTION: f64 = 0.05;

impl ExperimentProfile {
    pub fn named(name: ProfileName) -> Self {
        let mismatch = |assumed| ExperimentProfile {
            name,
            p: 2,
            horizon: 20_000.0,
            max_events: None,
            delta: 0.1,
            true_kernel: InfluenceKernel::exp_decay_rate(1.0),
            network: Network::ScaledIdentity(0.75),
            baseline: (0.005, 0.005),
            assumed_kernel: assumed,
            estimator_mu: None,
            window: 250.0,
            eta0: 10.0,
            rho0: 0.01,
            l1_penalty: 0.001,
            rho_grid: Vec::new(),
            snapshots: 0,
            trials: 100,
            seed_base: 1,
            scale: 1.0,
        };
        match name {
            ProfileName::MismatchExp => mismatch(InfluenceKernel::exponential(1.0 / (2.0 * std::f64::consts::E))),
            ProfileName::MismatchRect => mismatch(InfluenceKernel::Rectangular { width: 5.0 }),
            ProfileName::Blocknet => ExperimentProfile {
                p: 100,
                horizon: 100_000.0,
                delta: 0.01,
                network: Network::Block { block_size: 20 },
                baseline: (0.001, 0.01),
                assumed_kernel: InfluenceKernel::exponential(0.9),
                window: 500.0,
                snapshots: 10,
                ..mismatch(InfluenceKernel::exponential(0.9))
            },
            ProfileName::Memestyle => ExperimentProfile {
                p: 217,
                horizon: 1e9,
                max_events: Some(100_000),
                delta: 1.0,
                true_kernel: InfluenceKernel::exponential(0.995),
                network: Network::BlockPerMass,
                baseline: (5e-4, 5e-3),
                assumed_kernel: InfluenceKernel::exponential(0.99),
                estimator_mu: Some(2e-5),
                window: 15_000.0,
                eta0: 0.01,
                rho0: 5e-8,
                rho_grid: vec![5e-8, 5e-7, 5e-6, 5e-5, 5e-4, 5e-3],
                trials: 1,
                ..mismatch(InfluenceKernel::exponential(0.99))
            },
        }
    }

    /// Scale the horizon (or the event budget) by `s`.
    pub fn scaled(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::config(format!("scale must be positive, got {s}")));
        }
        match self.max_events {
            Some(n) => self.max_events = Some(((n as f64) * s).round().max(1.0) as usize),
            None => self.horizon *= s,
        }
        self.scale *= s;
        Ok(self)
    }

    /// Method names and the comparisons reported for them.
    pub fn methods(&self) -> (Vec<&'static str>, Vec<Comparison>) {
        let cmp = |m: &str, r: &str| Comparison { method: m.into(), reference: r.into() };
        match self.name {
            ProfileName::MismatchExp | ProfileName::MismatchRect => (
                vec!["true", "direct", "tracked", "tracked_true"],
                vec![cmp("tracked", "direct"), cmp("tracked", "true"), cmp("tracked_true", "true")],
            ),
            ProfileName::Blocknet => (
                vec!["alg1_true", "alg1_zero", "alg2", "ogd", "alg2_mismatch", "ogd_mismatch"],
                vec![cmp("alg2", "ogd"), cmp("alg2_mismatch", "ogd_mismatch"), cmp("alg2", "alg1_true")],
            ),
            ProfileName::Memestyle => {
                (vec!["alg2", "batch", "alg1_zero"], vec![cmp("alg2", "batch"), cmp("alg1_zero", "batch")])
            }
        }
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("p".into(), self.p.to_string());
        m.insert("T".into(), self.horizon.to_string());
        m.insert("max_events".into(), self.max_events.map_or("none".into(), |n| n.to_string()));
        m.insert("delta".into(), self.delta.to_string());
        m.insert("true_kernel".into(), format!("{:?}", self.true_kernel));
        m.insert("assumed_kernel".into(), format!("{:?}", self.assumed_kernel));
        m.insert("network".into(), format!("{:?}", self.network));
        m.insert("baseline".into(), format!("U[{}, {}]", self.baseline.0, self.baseline.1));
        m.insert("estimator_mu".into(), self.estimator_mu.map_or("true".into(), |v| v.to_string()));
        m.insert("window".into(), self.window.to_string());
        m.insert("eta0".into(), self.eta0.to_string());
        m.insert("rho0".into(), self.rho0.to_string());
        m.insert("l1_penalty".into(), self.l1_penalty.to_string());
        m.insert("rho_grid".into(), format!("{:?}", self.rho_grid));
        m.insert("snapshots".into(), self.snapshots.to_string());
        m
    }
}

fn smallest_block(p: usize) -> usize {
    (10..=p).find(|b| p % b == 0).unwrap_or(p)
}

/// Simulated data for one trial.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub seed: u64,
    pub stream: EventStream,
    pub w_true: DMatrix<f64>,
    pub mu_true: DVector<f64>,
    pub capped: bool,
}

pub fn generate(profile: &ExperimentProfile, seed: u64) -> Result<TrialData> {
    let p = profile.p;
    let net_seed = seed.wrapping_add(NETWORK_SEED_OFFSET);
    let w_true = match profile.network {
        Network::ScaledIdentity(c) => DMatrix::identity(p, p) * c,
        Network::Block { block_size } => {
            generate_block_network(&BlockNetworkSpec { p, block_size, ..Default::default() }, net_seed)?.0
        }
        Network::BlockPerMass => {
            let spec = BlockNetworkSpec {
                p,
                block_size: smallest_block(p),
                top_singular_value: 0.8 / profile.true_kernel.total_mass(),
                ..Default::default()
            };
            generate_block_network(&spec, net_seed)?.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(net_seed ^ 0xB5);
    let (lo, hi) = profile.baseline;
    let mu_true = DVector::from_fn(p, |_, _| if hi > lo { rng.random_range(lo..hi) } else { lo });
    let sim = simulate_hawkes(&GeneratorConfig {
        horizon: profile.horizon,
        mu_bar: mu_true.clone(),
        w: w_true.clone(),
        kernel: profile.true_kernel.clone(),
        seed,
        max_events: profile.max_events,
    })?;
    Ok(TrialData { seed, stream: sim.stream, w_true, mu_true, capped: sim.capped })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub name: String,
    pub trace: LossTrace,
    pub weights: Option<DMatrix<f64>>,
    pub snapshots: Vec<(usize, DMatrix<f64>)>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub data: TrialData,
    pub bins: BinnedCounts,
    pub methods: Vec<MethodResult>,
    /// `(method, t, batch loss of Ŵ_t on the full data)`.
    pub batchloss: Vec<(String, usize, f64)>,
    /// Step-size constants chosen by tuning, by method.
    pub tuned: BTreeMap<String, f64>,
}

impl TrialOutcome {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Run every method of the profile, or only those listed in `only`.
pub fn run_trial(profile: &ExperimentProfile, seed: u64, only: Option<&[&str]>) -> Result<TrialOutcome> {
    let data = generate(profile, seed)?;
    run_on(profile, data, only)
}

/// Run the profile's methods on already generated data.
pub fn run_on(profile: &ExperimentProfile, data: TrialData, only: Option<&[&str]>) -> Result<TrialOutcome> {
    let bins = discretize(&data.stream, profile.delta)?;
    let n = bins.n_bins();
    let delta = profile.delta;
    let p = profile.p;
    let mu_est = profile.estimator_mu.map_or_else(|| data.mu_true.clone(), |m| DVector::from_element(p, m));
    let opts = RunOptions { window: Some(profile.window), ..Default::default() };
    let tracked = TrackerConfig { schedule: StepSchedule::Constant { eta0: profile.eta0, n_bins: n }, ..TrackerConfig::new(delta, n) };
    let learner_cfg = |rho0: f64| LearnerConfig {
        tracker: tracked,
        rho: StepSchedule::Constant { eta0: rho0, n_bins: n },
        l1_penalty: profile.l1_penalty,
        ..LearnerConfig::new(delta, n)
    };
    let snapshot_every = (profile.snapshots > 0).then(|| (n / profile.snapshots).max(1));
    let zero = DMatrix::zeros(p, p);
    let (names, _) = profile.methods();
    let wanted = |m: &str| only.is_none_or(|o| o.contains(&m));

    let mut methods = Vec::new();
    let mut tuned = BTreeMap::new();
    for name in names.into_iter().filter(|m| wanted(m)) {
        info!("seed {}: running {name} over {n} bins", data.seed);
        let tracker_method = |kernel: &InfluenceKernel, w: &DMatrix<f64>, cfg: TrackerConfig| {
            timed(|| run(&bins, kernel.clone(), w.clone(), mu_est.clone(), cfg, opts))
                .map(|(out, s)| MethodResult { name: name.into(), trace: out.trace, weights: None, snapshots: Vec::new(), seconds: s })
        };
        let direct = TrackerConfig::direct(delta);
        let result = match name {
            "true" => tracker_method(&profile.true_kernel, &data.w_true, direct)?,
            "direct" => tracker_method(&profile.assumed_kernel, &data.w_true, direct)?,
            "tracked" => tracker_method(&profile.assumed_kernel, &data.w_true, tracked)?,
            "tracked_true" => tracker_method(&profile.true_kernel, &data.w_true, tracked)?,
            "alg1_true" => tracker_method(&profile.true_kernel, &data.w_true, tracked)?,
            "alg1_zero" => {
                let kernel = if profile.name == ProfileName::Memestyle { &profile.assumed_kernel } else { &profile.true_kernel };
                tracker_method(kernel, &zero, tracked)?
            }
            "alg2" | "ogd" | "alg2_mismatch" | "ogd_mismatch" => {
                let mismatched = name.ends_with("_mismatch") || profile.name == ProfileName::Memestyle;
                let kernel = if mismatched { &profile.assumed_kernel } else { &profile.true_kernel };
                let is_ogd = name.starts_with("ogd");
                let learn = |bins: &BinnedCounts, cfg: LearnerConfig, o: RunOptions, snaps| {
                    if is_ogd {
                        run_ogd(bins, kernel.clone(), mu_est.clone(), None, cfg, o, snaps)
                    } else {
                        run_learner(bins, kernel.clone(), mu_est.clone(), None, cfg, o, snaps)
                    }
                };
                // tuning counts toward the method's wall-clock
                let start = Instant::now();
                let mut rho0 = profile.rho0;
                if !profile.rho_grid.is_empty() {
                    let quiet = RunOptions { summary_only: true, ..Default::default() };
                    let (best, _) = tune_step_size(&bins, &profile.rho_grid, TUNING_FRACTION, |prefix, c| {
                        Ok(learn(prefix, learner_cfg(c), quiet, None)?.run.trace.cumulative())
                    })?;
                    rho0 = best;
                    tuned.insert(name.to_string(), best);
                }
                let out = learn(&bins, learner_cfg(rho0), opts, snapshot_every)?;
                MethodResult {
                    name: name.into(),
                    trace: out.run.trace,
                    weights: Some(out.weights),
                    snapshots: out.snapshots.taken,
                    seconds: start.elapsed().as_secs_f64(),
                }
            }
            "batch" => {
                let kernel = &profile.assumed_kernel;
                let (fit, s) = timed(|| {
                    let obj = BatchObjective::new(&bins, kernel, mu_est.clone())?;
                    batch_fit(&obj, None, &BatchConfig { gamma: profile.l1_penalty, ..Default::default() })
                })?;
                let curve = batch_loss_curve(&fit.w, &bins, kernel, &mu_est)?;
                let mut trace = LossTrace::new(delta, Some(profile.window))?;
                let mut prev = 0.0;
                for (i, c) in curve.iter().enumerate() {
                    trace.push(i + 1, c - prev);
                    prev = *c;
                }
                MethodResult { name: name.into(), trace, weights: Some(fit.w), snapshots: Vec::new(), seconds: s }
            }
            other => return Err(Error::config(format!("unknown method `{other}`"))),
        };
        methods.push(result);
    }

    let mut batchloss = Vec::new();
    if profile.snapshots > 0 && methods.iter().any(|m| !m.snapshots.is_empty()) {
        let kernel = &profile.true_kernel;
        let truth = batch_loss_of(&data.w_true, &bins, kernel, &data.mu_true)?;
        let none = batch_loss_of(&zero, &bins, kernel, &data.mu_true)?;
        for m in &methods {
            for (t, w) in &m.snapshots {
                batchloss.push((m.name.clone(), *t, batch_loss_of(w, &bins, kernel, &data.mu_true)?));
            }
        }
        batchloss.push(("true_W".into(), n, truth));
        batchloss.push(("zero_W".into(), n, none));
    }
    Ok(TrialOutcome { data, bins, methods, batchloss, tuned })
}

/// Write a trial directory: events, ground truth, per-method losses and weights.
pub fn write_trial(outcome: &TrialOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    outcome.data.stream.write_csv(file("events.csv")?)?;
    crate::io::write_matrix(&outcome.data.w_true, file("W_true.csv")?)?;
    crate::io::write_matrix(&DMatrix::from_column_slice(outcome.data.mu_true.len(), 1, outcome.data.mu_true.as_slice()), file("mu_true.csv")?)?;
    for m in &outcome.methods {
        m.trace.write_csv(file(&format!("loss_{}.csv", m.name))?)?;
        if let Some(w) = &m.weights {
            crate::io::write_matrix(w, file(&format!("W_{}.csv", m.name))?)?;
        }
    }
    if !outcome.batchloss.is_empty() {
        use std::io::Write;
        let mut f = file("batchloss.csv")?;
        writeln!(f, "method,t,loss")?;
        for (m, t, l) in &outcome.batchloss {
            writeln!(f, "{m},{t},{l}")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Points kept per curve in the aggregate CSVs.
pub const AGGREGATE_POINTS: usize = 1000;

/// Run all trials of a profile into `out`, then aggregate.
pub fn replicate(profile: &ExperimentProfile, out: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out)?;
    let (methods, comparisons) = profile.methods();
    let records: Vec<TrialRecord> = (0..profile.trials)
        .into_par_iter()
        .map(|i| {
            let seed = profile.seed_base + i as u64;
            let dir = format!("trial_{i:03}");
            let mut rec = TrialRecord {
                index: i,
                seed,
                dir: dir.clone(),
                ok: false,
                error: None,
                cumulative: BTreeMap::new(),
                final_moving_average: BTreeMap::new(),
                seconds: BTreeMap::new(),
                tuned: BTreeMap::new(),
            };
            match run_trial(profile, seed, None).and_then(|o| write_trial(&o, &out.join(&dir)).map(|_| o)) {
                Ok(o) => {
                    rec.ok = true;
                    for m in &o.methods {
                        rec.cumulative.insert(m.name.clone(), m.trace.cumulative());
                        if let Some(v) = m.trace.last_moving_average() {
                            rec.final_moving_average.insert(m.name.clone(), v);
                        }
                        rec.seconds.insert(m.name.clone(), m.seconds);
                    }
                    rec.tuned = o.tuned;
                }
                Err(e) => {
                    log::error!("trial {i} (seed {seed}) failed: {e}");
                    rec.error = Some(e.to_string());
                }
            }
            rec
        })
        .collect();
    let failed = records.iter().filter(|r| !r.ok).count();
    let manifest = RunManifest {
        profile: profile.name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed_base: profile.seed_base,
        scale: profile.scale,
        methods: methods.into_iter().map(String::from).collect(),
        comparisons,
        config: profile.describe(),
        trials: records,
        failed,
    };
    manifest.save(out)?;
    aggregate_runs(out, out, AGGREGATE_POINTS)?;
    Ok(manifest)
}

/// Rebuild the profile recorded in a manifest.
pub fn profile_from_manifest(m: &RunManifest) -> Result<ExperimentProfile> {
    let mut profile = ExperimentProfile::named(m.profile.parse()?).scaled(m.scale)?;
    profile.trials = m.trials.len();
    profile.seed_base = m.seed_base;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse_and_scale() {
        for p in ProfileName::ALL {
            assert_eq!(p.as_str().parse::<ProfileName>().unwrap(), p);
        }
        assert!("fig9".parse::<ProfileName>().is_err());
        let b = ExperimentProfile::named(ProfileName::Blocknet).scaled(0.1).unwrap();
        assert_eq!(b.horizon, 10_000.0);
        let m = ExperimentProfile::named(ProfileName::Memestyle).scaled(0.5).unwrap();
        assert_eq!(m.max_events, Some(50_000));
        assert!(ExperimentProfile::named(ProfileName::MismatchExp).scaled(0.0).is_err());
        assert_eq!(smallest_block(217), 31);
        assert_eq!(smallest_block(50), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut prof = ExperimentProfile::named(ProfileName::Blocknet);
        prof.p = 20;
        prof.network = Network::Block { block_size: 10 };
        prof.horizon = 200.0;
        prof.delta = 0.1;
        let a = generate(&prof, 4).unwrap();
        let b = generate(&prof, 4).unwrap();
        assert_eq!(a.stream, b.stream);
        assert_eq!(a.w_true, b.w_true);
        assert!(a.mu_true.iter().all(|&m| (0.001..0.01).contains(&m)));
        let c = generate(&prof, 5).unwrap();
        assert_ne!(a.w_true, c.w_true);
    }

    #[test]
    fn mismatch_trial_runs_all_methods() {
        let prof = ExperimentProfile::named(ProfileName::MismatchRect).scaled(0.05).unwrap();
        let out = run_trial(&prof, 9, None).unwrap();
        assert_eq!(out.methods.len(), 4);
        let n = out.bins.n_bins();
        assert!(out.methods.iter().all(|m| m.trace.records().len() == n));
        // the direct calculation with the true kernel is the loss of the true rate
        let only = run_trial(&prof, 9, Some(&["true"])).unwrap();
        assert_eq!(only.methods[0].trace.cumulative(), out.method("true").unwrap().trace.cumulative());
    }
}
