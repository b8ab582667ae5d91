//! Online rate tracking with a known influence matrix.
//!
//! Each bin: incur `ℓ_t(λ̂_t)`, move toward the observed counts
//! `λ̃ = clamp((1-η_t)λ̂_t + η_t x_t/δ)`, then propagate through the
//! dynamics `λ̂_{t+1} = clamp(Φ_t(λ̃, W))`. With `η_t = 0` this is the plain
//! recursion of the model ("direct calculation").

pub mod dual;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::events::{BinnedCounts, Event};
use crate::kernels::{DynamicsStep, InfluenceKernel, KernelDynamics};
use crate::loss::{instantaneous_loss, LossTrace};

pub const DEFAULT_LAMBDA_MIN: f64 = 1e-8;
pub const DEFAULT_LAMBDA_MAX: f64 = 1e6;
pub const DEFAULT_ETA0: f64 = 10.0;

/// Step-size rule `η_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// `η₀ / √(T/δ)` for a horizon of `n_bins` bins.
    Constant { eta0: f64, n_bins: usize },
    /// `η₀ / √t`.
    SqrtT { eta0: f64 },
    /// Always zero: the direct-calculation baseline.
    Zero,
}

impl StepSchedule {
    pub fn parse(name: &str, eta0: f64, n_bins: usize) -> Result<Self> {
        let s = match name {
            "constant" => StepSchedule::Constant { eta0, n_bins },
            "sqrt_t" => StepSchedule::SqrtT { eta0 },
            "zero" | "none" => StepSchedule::Zero,
            other => return Err(Error::config(format!("unknown step schedule `{other}`"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta0, n_bins } => eta0 / (n_bins.max(1) as f64).sqrt(),
            StepSchedule::SqrtT { eta0 } => eta0 / (t.max(1) as f64).sqrt(),
            StepSchedule::Zero => 0.0,
        }
    }

    /// Every `η_t` must lie in `[0, 1]`; the largest is at `t = 1`.
    pub fn validate(&self) -> Result<()> {
        let first = self.eta(1);
        if !(0.0..=1.0).contains(&first) {
            return Err(Error::config(format!("step size {first} lies outside [0, 1]")));
        }
        Ok(())
    }
}

/// Tuning knobs shared by the tracker and the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub delta: f64,
    pub schedule: StepSchedule,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl TrackerConfig {
    /// Defaults with `η_t = 10/√(T/δ)`.
    pub fn new(delta: f64, n_bins: usize) -> Self {
        Self {
            delta,
            schedule: StepSchedule::Constant { eta0: DEFAULT_ETA0, n_bins },
            lambda_min: DEFAULT_LAMBDA_MIN,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn direct(delta: f64) -> Self {
        Self { schedule: StepSchedule::Zero, ..Self::new(delta, 1) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::config(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return Err(Error::config(format!(
                "rate bounds must satisfy 0 < lambda_min <= lambda_max, got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        self.schedule.validate()
    }

    pub(crate) fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lambda_min, self.lambda_max)
    }
}

/// `proj_Λ((1-η)λ̂ + ηx/δ)`.
pub fn innovation(lambda_hat: &DVector<f64>, x: &DVector<f64>, eta: f64, cfg: &TrackerConfig) -> DVector<f64> {
    lambda_hat.zip_map(x, |l, c| cfg.clamp((1.0 - eta) * l + eta * c / cfg.delta))
}

/// One tracking step; returns `(λ̂_{t+1}, ℓ_t(λ̂_t))`.
pub fn tracker_step(
    lambda_hat: &DVector<f64>,
    x: &DVector<f64>,
    dynamics: &DynamicsStep,
    w: &DMatrix<f64>,
    eta: f64,
    cfg: &TrackerConfig,
) -> Result<(DVector<f64>, f64)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("step size {eta} lies outside [0, 1]")));
    }
    let loss = instantaneous_loss(lambda_hat, x, cfg.delta)?;
    let tilde = innovation(lambda_hat, x, eta, cfg);
    let next = dynamics.apply(&tilde, w)?.map(|v| cfg.clamp(v));
    Ok((next, loss))
}

/// Streaming tracker state machine; one [`Tracker::observe_bin`] per bin.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    dynamics: KernelDynamics,
    w: DMatrix<f64>,
    lambda_hat: DVector<f64>,
    x: DVector<f64>,
    tilde: DVector<f64>,
    t: usize,
}

impl Tracker {
    pub fn new(kernel: InfluenceKernel, w: DMatrix<f64>, mu_bar: DVector<f64>, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let p = mu_bar.len();
        check_dim(p, w.nrows())?;
        check_dim(p, w.ncols())?;
        if mu_bar.iter().any(|&m| !(m >= 0.0)) || w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("baseline rates and influence weights must be nonnegative"));
        }
        if !kernel.is_non_increasing() {
            warn!("kernel is not non-increasing; the dynamics may not be contractive");
        }
        let lambda_hat = mu_bar.map(|m| cfg.clamp(m));
        let dynamics = KernelDynamics::new(kernel, cfg.delta, mu_bar)?;
        Ok(Self { cfg, dynamics, w, lambda_hat, x: DVector::zeros(p), tilde: DVector::zeros(p), t: 0 })
    }

    pub fn p(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Number of bins consumed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    /// `λ̂` for the next unobserved bin: the one-step-ahead forecast.
    pub fn forecast(&self) -> &DVector<f64> {
        &self.lambda_hat
    }

    /// Consume the events of the next bin and return the loss incurred by
    /// the forecast made for it.
    pub fn observe_bin(&mut self, bin_events: &[Event]) -> Result<f64> {
        let p = self.p();
        self.x.fill(0.0);
        for e in bin_events {
            if e.actor >= p {
                return Err(Error::data(format!("actor {} out of range for p = {p}", e.actor)));
            }
            self.x[e.actor] += 1.0;
        }
        self.t += 1;
        let eta = self.cfg.schedule.eta(self.t);
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config(format!("step size {eta} lies outside [0, 1]")));
        }
        let loss = instantaneous_loss(&self.lambda_hat, &self.x, self.cfg.delta)?;
        let cfg = self.cfg;
        self.tilde.zip_zip_apply(&self.lambda_hat, &self.x, |o, l, c| {
            *o = cfg.clamp((1.0 - eta) * l + eta * c / cfg.delta);
        });
        let step = self.dynamics.advance(bin_events, &self.w);
        step.apply_into(&self.tilde, &self.w, &mut self.lambda_hat);
        for v in self.lambda_hat.iter_mut() {
            *v = cfg.clamp(*v);
        }
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite loss in bin {}", self.t)));
        }
        Ok(loss)
    }
}

/// Output of a full pass.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: LossTrace,
    /// `rates[t-1] = λ̂_t`, when requested.
    pub rates: Option<Vec<DVector<f64>>>,
}

/// Options for [`run`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Moving-average window `D` (time units).
    pub window: Option<f64>,
    pub keep_rates: bool,
    /// Drop per-bin loss records, keeping totals only.
    pub summary_only: bool,
}

/// Track over every bin of `bins`.
pub fn run(
    bins: &BinnedCounts,
    kernel: InfluenceKernel,
    w: DMatrix<f64>,
    mu_bar: DVector<f64>,
    cfg: TrackerConfig,
    opts: RunOptions,
) -> Result<RunOutput> {
    check_dim(bins.p(), mu_bar.len())?;
    let mut tracker = Tracker::new(kernel, w, mu_bar, cfg)?;
    let mut trace = LossTrace::new(bins.delta(), opts.window)?;
    if opts.summary_only {
        trace = trace.summary_only();
    }
    let mut rates = opts.keep_rates.then(|| Vec::with_capacity(bins.n_bins()));
    for t in 1..=bins.n_bins() {
        if let Some(r) = rates.as_mut() {
            r.push(tracker.forecast().clone());
        }
        let loss = tracker.observe_bin(bins.bin_events(t))?;
        trace.push(t, loss);
    }
    Ok(RunOutput { trace, rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{discretize, EventStream};
    use crate::kernels::exact_rate;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn innovation_examples() {
        let cfg = TrackerConfig { lambda_min: 0.1, lambda_max: 10.0, ..TrackerConfig::new(1.0, 1) };
        assert_eq!(innovation(&v(&[2.0]), &v(&[4.0]), 0.5, &cfg), v(&[3.0]));
        // counts matching the rate are a fixed point
        let cfg = TrackerConfig::new(0.5, 1);
        assert_eq!(innovation(&v(&[2.0, 4.0]), &v(&[1.0, 2.0]), 0.3, &cfg), v(&[2.0, 4.0]));
        assert_eq!(innovation(&v(&[2.0, 4.0]), &v(&[7.0, 0.0]), 0.0, &cfg), v(&[2.0, 4.0]));
    }

    #[test]
    fn step_rejects_bad_eta() {
        let cfg = TrackerConfig::new(1.0, 1);
        let step = DynamicsStep::zeros(1);
        let w = DMatrix::zeros(1, 1);
        assert!(tracker_step(&v(&[1.0]), &v(&[0.0]), &step, &w, 1.5, &cfg).is_err());
        assert!(tracker_step(&v(&[1.0]), &v(&[0.0]), &step, &w, -0.1, &cfg).is_err());
        assert!(StepSchedule::parse("sqrt_t", 2.0, 10).is_err());
        assert!(StepSchedule::parse("constant", 10.0, 50).is_err());
        assert!(StepSchedule::parse("constant", 10.0, 200_000).is_ok());
        assert!(StepSchedule::parse("linear", 1.0, 10).is_err());
    }

    #[test]
    fn schedules() {
        assert_relative_eq!(StepSchedule::Constant { eta0: 10.0, n_bins: 200_000 }.eta(7), 10.0 / 200_000f64.sqrt());
        assert_relative_eq!(StepSchedule::SqrtT { eta0: 0.5 }.eta(4), 0.25);
        assert_eq!(StepSchedule::Zero.eta(3), 0.0);
    }

    #[test]
    fn quiet_stream_stays_at_baseline() {
        let s = EventStream::new(vec![], 3, 50.0).unwrap();
        let bins = discretize(&s, 0.5).unwrap();
        let mu = v(&[0.01, 0.2, 1.0]);
        let out = run(
            &bins,
            InfluenceKernel::exponential(0.5),
            DMatrix::zeros(3, 3),
            mu.clone(),
            TrackerConfig::direct(0.5),
            RunOptions { keep_rates: true, ..Default::default() },
        )
        .unwrap();
        for r in out.rates.unwrap() {
            assert_relative_eq!(r, mu, max_relative = 1e-14);
        }
    }

    fn random_stream(rng: &mut ChaCha8Rng, p: usize, n: usize, horizon: f64) -> EventStream {
        let ev = (0..n)
            .map(|_| Event::new(rng.random_range(0..p), rng.random_range(0.0..horizon)))
            .collect();
        EventStream::new(ev, p, horizon).unwrap()
    }

    #[test]
    fn direct_calculation_equals_exact_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kernel in [
            InfluenceKernel::exponential(0.3),
            InfluenceKernel::Rectangular { width: 1.5 },
            InfluenceKernel::DelayedExponential { alpha: 0.5, delay: 0.4 },
        ] {
            let s = random_stream(&mut rng, 3, 80, 20.0);
            let bins = discretize(&s, 0.2).unwrap();
            let w = DMatrix::from_fn(3, 3, |_, _| rng.random_range(0.0..0.4));
            let mu = v(&[0.1, 0.2, 0.3]);
            let out = run(
                &bins,
                kernel.clone(),
                w.clone(),
                mu.clone(),
                TrackerConfig::direct(0.2),
                RunOptions { keep_rates: true, ..Default::default() },
            )
            .unwrap();
            for (i, r) in out.rates.unwrap().iter().enumerate() {
                let exact = exact_rate(&kernel, &w, &mu, s.events(), i + 1, 0.2);
                assert!((r - &exact).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn rates_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_stream(&mut rng, 2, 2000, 100.0);
        let bins = discretize(&s, 0.1).unwrap();
        let cfg = TrackerConfig { lambda_min: 0.05, lambda_max: 3.0, ..TrackerConfig::new(0.1, bins.n_bins()) };
        let out = run(
            &bins,
            InfluenceKernel::exponential(0.5),
            DMatrix::from_element(2, 2, 0.9),
            v(&[0.01, 0.01]),
            cfg,
            RunOptions { keep_rates: true, ..Default::default() },
        )
        .unwrap();
        for r in out.rates.unwrap() {
            assert!(r.iter().all(|&x| (0.05..=3.0).contains(&x)));
        }
    }

    #[test]
    fn forecast_is_next_step_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_stream(&mut rng, 2, 50, 10.0);
        let bins = discretize(&s, 0.1).unwrap();
        let mu = v(&[0.3, 0.4]);
        let w = DMatrix::from_element(2, 2, 0.2);
        let cfg = TrackerConfig::new(0.1, bins.n_bins());
        let mut tr = Tracker::new(InfluenceKernel::exponential(0.5), w.clone(), mu.clone(), cfg).unwrap();
        assert_eq!(tr.forecast(), &mu);
        for t in 1..=bins.n_bins() {
            let f = tr.forecast().clone();
            let l = tr.observe_bin(bins.bin_events(t)).unwrap();
            assert_relative_eq!(l, instantaneous_loss(&f, &bins.counts(t), 0.1).unwrap());
        }
    }
}
