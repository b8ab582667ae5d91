//! Tracking the rate while learning `W` (exponential-family kernels).
//!
//! For a fixed step schedule, the trackers run with two different matrices
//! differ by `(W₁ - W₂) K_t`, where `K_1 = 0` and
//! `K_{t+1} = (1-η_t) α^δ K_t + y_t`. The learner keeps one tracked rate,
//! takes a projected gradient step on `W` each bin, and shifts the rate by
//! the change in `W` applied to `K`.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::events::{BinnedCounts, Event};
use crate::kernels::{InfluenceKernel, KernelDynamics};
use crate::loss::{instantaneous_loss, LossTrace};
use crate::projections::FeasibleSet;
use crate::tracker::{RunOutput, RunOptions, StepSchedule, TrackerConfig};

pub const DEFAULT_RHO0: f64 = 0.01;
pub const DEFAULT_L1_PENALTY: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub tracker: TrackerConfig,
    /// `ρ_t`; uses the same rule shapes as `η_t` but is not limited to `[0, 1]`.
    pub rho: StepSchedule,
    /// Soft-threshold weight `γ` applied as `ργ` per step.
    pub l1_penalty: f64,
    pub feasible: FeasibleSet,
    /// Learn `μ̄` as an extra column of `W`.
    pub learn_mu: bool,
}

impl LearnerConfig {
    /// `η_t = 10/√(T/δ)`, `ρ_t = .01/√(T/δ)`, `γ = .001`, `W ⪰ 0`.
    pub fn new(delta: f64, n_bins: usize) -> Self {
        Self {
            tracker: TrackerConfig::new(delta, n_bins),
            rho: StepSchedule::Constant { eta0: DEFAULT_RHO0, n_bins },
            l1_penalty: DEFAULT_L1_PENALTY,
            feasible: FeasibleSet::default(),
            learn_mu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        if !(self.rho.eta(1) >= 0.0) {
            return Err(Error::config("learning rate must be nonnegative"));
        }
        if !(self.l1_penalty >= 0.0) {
            return Err(Error::config(format!("l1 penalty must be nonnegative, got {}", self.l1_penalty)));
        }
        Ok(())
    }
}

fn soft(v: f64, thr: f64) -> f64 {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        0.0
    }
}

/// `W ← proj_𝒲(soft(W - ρ g kᵀ, ργ))` on the first `p` columns of `w`.
///
/// When `k_next` is given, `corr += (W_new - W_old) k_next` is accumulated.
fn weight_step(
    w: &mut DMatrix<f64>,
    g: &DVector<f64>,
    k: &DVector<f64>,
    k_next: Option<&DVector<f64>>,
    corr: &mut DVector<f64>,
    rho: f64,
    gamma: f64,
    set: &FeasibleSet,
) -> Result<()> {
    let p = w.nrows();
    let thr = rho * gamma;
    match set {
        FeasibleSet::Box(_) | FeasibleSet::FixedSupport { .. } => {
            let (w_max, mask) = match set {
                FeasibleSet::Box(m) => (*m, None),
                FeasibleSet::FixedSupport { mask, w_max } => (*w_max, Some(mask)),
                _ => unreachable!(),
            };
            if let Some(mask) = mask {
                check_dim(p, mask.nrows())?;
                check_dim(p, mask.ncols())?;
            }
            for j in 0..p {
                let kj = k[j];
                let knj = k_next.map_or(0.0, |kn| kn[j]);
                if kj == 0.0 && thr == 0.0 && mask.is_none() {
                    // feasible column with zero gradient stays put
                    continue;
                }
                let step = rho * kj;
                let mut col = w.column_mut(j);
                for i in 0..p {
                    let old = col[i];
                    let allowed = mask.is_none_or(|m| m[(i, j)]);
                    let new = if allowed { soft(old - step * g[i], thr).clamp(0.0, w_max) } else { 0.0 };
                    if new != old {
                        col[i] = new;
                        corr[i] += (new - old) * knj;
                    }
                }
            }
        }
        FeasibleSet::L1Ball(_) | FeasibleSet::NuclearBall(_) => {
            let old = w.columns(0, p).into_owned();
            let mut v = &old - rho * g * k.rows(0, p).transpose();
            if thr > 0.0 {
                v.apply(|x| *x = soft(*x, thr));
            }
            let new = set.project(&v)?;
            if let Some(kn) = k_next {
                corr.gemv(1.0, &(&new - &old), &kn.rows(0, p), 1.0);
            }
            w.columns_mut(0, p).copy_from(&new);
        }
    }
    Ok(())
}

/// `λ̂^{W₂} + (W₁ - W₂) K_t`.
pub fn translate(
    lambda_w2: &DVector<f64>,
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    k: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim(w1.nrows(), w2.nrows())?;
    check_dim(w1.ncols(), w2.ncols())?;
    check_dim(w1.ncols(), k.len())?;
    check_dim(w1.nrows(), lambda_w2.len())?;
    Ok(lambda_w2 + (w1 - w2) * k)
}

/// `K_{t+1} = (1-η) α^δ K_t + y_t`.
pub fn k_update(k: &DVector<f64>, y: &DVector<f64>, eta: f64, alpha_delta: f64) -> DVector<f64> {
    k * ((1.0 - eta) * alpha_delta) + y
}

/// `g_t(W) = ⟨1, δ(λ⁰ + W K)⟩ - ⟨x, log δ(λ⁰ + W K)⟩`.
pub fn surrogate_loss(
    w: &DMatrix<f64>,
    lambda0: &DVector<f64>,
    k: &DVector<f64>,
    x: &DVector<f64>,
    delta: f64,
) -> Result<f64> {
    check_dim(w.ncols(), k.len())?;
    check_dim(w.nrows(), lambda0.len())?;
    instantaneous_loss(&(lambda0 + w * k), x, delta)
}

/// `∇g_t(W) = (δ1 - x/λ) Kᵀ` with `λ = λ⁰ + W K`.
pub fn surrogate_gradient(
    w: &DMatrix<f64>,
    lambda0: &DVector<f64>,
    k: &DVector<f64>,
    x: &DVector<f64>,
    delta: f64,
) -> DMatrix<f64> {
    let lam = lambda0 + w * k;
    let g = lam.zip_map(x, |l, c| delta - c / l);
    g * k.transpose()
}

fn counts_from(events: &[Event], x: &mut DVector<f64>) -> Result<()> {
    let p = x.len();
    x.fill(0.0);
    for e in events {
        if e.actor >= p {
            return Err(Error::data(format!("actor {} out of range for p = {p}", e.actor)));
        }
        x[e.actor] += 1.0;
    }
    Ok(())
}

fn exp_family(kernel: &InfluenceKernel, delta: f64) -> Result<f64> {
    kernel.decay_per_bin(delta).ok_or_else(|| {
        Error::Unsupported(format!("learning W needs an exponential-family kernel, got {kernel:?}"))
    })
}

/// Joint rate tracker and network learner.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: LearnerConfig,
    dynamics: KernelDynamics,
    alpha_delta: f64,
    mu_bar: DVector<f64>,
    /// `p × p`, or `p × (p+1)` with the baseline as last column.
    w: DMatrix<f64>,
    k: DVector<f64>,
    k_next: DVector<f64>,
    y: DVector<f64>,
    lambda_hat: DVector<f64>,
    x: DVector<f64>,
    g: DVector<f64>,
    corr: DVector<f64>,
    t: usize,
    clamp_count: u64,
    warned_rate: bool,
}

impl Learner {
    /// `mu_bar` is the known baseline, or the starting value when it is learned.
    pub fn new(
        kernel: InfluenceKernel,
        mu_bar: DVector<f64>,
        w0: Option<DMatrix<f64>>,
        cfg: LearnerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let delta = cfg.tracker.delta;
        let alpha_delta = exp_family(&kernel, delta)?;
        let p = mu_bar.len();
        if mu_bar.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::config("baseline rates must be nonnegative"));
        }
        let w0 = w0.unwrap_or_else(|| DMatrix::zeros(p, p));
        check_dim(p, w0.nrows())?;
        check_dim(p, w0.ncols())?;
        let w0 = cfg.feasible.project(&w0)?;
        let q = if cfg.learn_mu { p + 1 } else { p };
        let mut w = DMatrix::zeros(p, q);
        w.columns_mut(0, p).copy_from(&w0);
        if cfg.learn_mu {
            w.column_mut(p).copy_from(&mu_bar);
        }
        let lambda_hat = mu_bar.map(|m| cfg.tracker.clamp(m));
        let dynamics = KernelDynamics::new(kernel, delta, mu_bar.clone())?;
        Ok(Self {
            cfg,
            dynamics,
            alpha_delta,
            mu_bar,
            w,
            k: DVector::zeros(q),
            k_next: DVector::zeros(q),
            y: DVector::zeros(q),
            lambda_hat,
            x: DVector::zeros(p),
            g: DVector::zeros(p),
            corr: DVector::zeros(p),
            t: 0,
            clamp_count: 0,
            warned_rate: false,
        })
    }

    pub fn p(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn delta(&self) -> f64 {
        self.cfg.tracker.delta
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Current `Ŵ_t` (without the baseline column).
    pub fn weights(&self) -> DMatrix<f64> {
        self.w.columns(0, self.p()).into_owned()
    }

    /// Current baseline: learned column if enabled, else the fixed `μ̄`.
    pub fn baseline(&self) -> DVector<f64> {
        if self.cfg.learn_mu {
            self.w.column(self.p()).into_owned()
        } else {
            self.mu_bar.clone()
        }
    }

    /// `K_t` (with the constant coordinate last when learning `μ̄`).
    pub fn k(&self) -> &DVector<f64> {
        &self.k
    }

    pub fn forecast(&self) -> &DVector<f64> {
        &self.lambda_hat
    }

    /// Coordinates of `λ̂` that had to be clamped back into `Λ`.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    pub fn observe_bin(&mut self, bin_events: &[Event]) -> Result<f64> {
        let p = self.p();
        counts_from(bin_events, &mut self.x)?;
        self.t += 1;
        let tc = self.cfg.tracker;
        let delta = tc.delta;
        let eta = tc.schedule.eta(self.t);
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config(format!("step size {eta} lies outside [0, 1]")));
        }
        let rho = self.cfg.rho.eta(self.t);
        let loss = instantaneous_loss(&self.lambda_hat, &self.x, delta)?;
        if !self.warned_rate && self.x.iter().any(|&c| c / delta > tc.lambda_max) {
            warn!("observed rate exceeds lambda_max = {}; estimates will be clamped", tc.lambda_max);
            self.warned_rate = true;
        }

        let step = self.dynamics.advance_constant(bin_events)?;
        self.y.rows_mut(0, p).copy_from(&step.y);
        if self.cfg.learn_mu {
            self.y[p] = 1.0 - self.alpha_delta;
        }
        let ad = self.alpha_delta;
        let decay = (1.0 - eta) * ad;
        for j in 0..self.k.len() {
            self.k_next[j] = decay * self.k[j] + self.y[j];
        }

        // Φ_t(λ̃, Ŵ_t) before W moves
        let mut next = DVector::zeros(p);
        for k in 0..p {
            let tilde = (1.0 - eta) * self.lambda_hat[k] + eta * self.x[k] / delta;
            next[k] = ad * tilde;
            if !self.cfg.learn_mu {
                next[k] += (1.0 - ad) * self.mu_bar[k];
            }
            self.g[k] = delta - self.x[k] / self.lambda_hat[k];
        }
        for (j, &yj) in self.y.iter().enumerate() {
            if yj != 0.0 {
                next.axpy(yj, &self.w.column(j), 1.0);
            }
        }

        self.corr.fill(0.0);
        weight_step(
            &mut self.w,
            &self.g,
            &self.k,
            Some(&self.k_next),
            &mut self.corr,
            rho,
            self.cfg.l1_penalty,
            &self.cfg.feasible,
        )?;
        if self.cfg.learn_mu {
            let kp = self.k[p];
            let knp = self.k_next[p];
            for i in 0..p {
                let old = self.w[(i, p)];
                let new = (old - rho * self.g[i] * kp).max(0.0);
                self.w[(i, p)] = new;
                self.corr[i] += (new - old) * knp;
            }
        }

        next += &self.corr;
        for v in next.iter_mut() {
            let c = tc.clamp(*v);
            if c != *v {
                self.clamp_count += 1;
            }
            *v = c;
        }
        self.lambda_hat = next;
        std::mem::swap(&mut self.k, &mut self.k_next);
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite loss in bin {}", self.t)));
        }
        Ok(loss)
    }
}

/// Online gradient descent on `W` with the direct-calculation rate
/// `λ_t = μ̄ + Ŵ_t K_t`, `K_{t+1} = α^δ K_t + y_t`.
#[derive(Debug, Clone)]
pub struct Ogd {
    cfg: LearnerConfig,
    dynamics: KernelDynamics,
    alpha_delta: f64,
    mu_bar: DVector<f64>,
    w: DMatrix<f64>,
    k: DVector<f64>,
    lambda: DVector<f64>,
    x: DVector<f64>,
    g: DVector<f64>,
    scratch: DVector<f64>,
    t: usize,
}

impl Ogd {
    pub fn new(
        kernel: InfluenceKernel,
        mu_bar: DVector<f64>,
        w0: Option<DMatrix<f64>>,
        cfg: LearnerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.learn_mu {
            return Err(Error::Unsupported("the gradient-descent baseline keeps the baseline fixed".into()));
        }
        let delta = cfg.tracker.delta;
        let alpha_delta = exp_family(&kernel, delta)?;
        let p = mu_bar.len();
        let w0 = w0.unwrap_or_else(|| DMatrix::zeros(p, p));
        check_dim(p, w0.nrows())?;
        check_dim(p, w0.ncols())?;
        let w = cfg.feasible.project(&w0)?;
        let dynamics = KernelDynamics::new(kernel, delta, mu_bar.clone())?;
        let k = DVector::zeros(p);
        let lambda = mu_bar.map(|m| cfg.tracker.clamp(m));
        Ok(Self {
            cfg,
            dynamics,
            alpha_delta,
            mu_bar,
            w,
            k,
            lambda,
            x: DVector::zeros(p),
            g: DVector::zeros(p),
            scratch: DVector::zeros(p),
            t: 0,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn forecast(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn observe_bin(&mut self, bin_events: &[Event]) -> Result<f64> {
        counts_from(bin_events, &mut self.x)?;
        self.t += 1;
        let delta = self.cfg.tracker.delta;
        let rho = self.cfg.rho.eta(self.t);
        let loss = instantaneous_loss(&self.lambda, &self.x, delta)?;
        self.g = self.lambda.zip_map(&self.x, |l, c| delta - c / l);
        weight_step(
            &mut self.w,
            &self.g,
            &self.k,
            None,
            &mut self.scratch,
            rho,
            self.cfg.l1_penalty,
            &self.cfg.feasible,
        )?;
        let step = self.dynamics.advance_constant(bin_events)?;
        self.k *= self.alpha_delta;
        self.k += &step.y;
        self.lambda.copy_from(&self.mu_bar);
        self.lambda.gemv(1.0, &self.w, &self.k, 1.0);
        let tc = self.cfg.tracker;
        self.lambda.apply(|v| *v = tc.clamp(*v));
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite loss in bin {}", self.t)));
        }
        Ok(loss)
    }
}

/// Snapshots of `Ŵ_t` taken during a run.
#[derive(Debug, Clone, Default)]
pub struct Snapshots {
    pub every: usize,
    pub taken: Vec<(usize, DMatrix<f64>)>,
}

/// Output of a learning pass.
#[derive(Debug, Clone)]
pub struct LearnOutput {
    pub run: RunOutput,
    pub weights: DMatrix<f64>,
    pub baseline: DVector<f64>,
    pub snapshots: Snapshots,
    pub clamp_count: u64,
}

pub fn run_learner(
    bins: &BinnedCounts,
    kernel: InfluenceKernel,
    mu_bar: DVector<f64>,
    w0: Option<DMatrix<f64>>,
    cfg: LearnerConfig,
    opts: RunOptions,
    snapshot_every: Option<usize>,
) -> Result<LearnOutput> {
    check_dim(bins.p(), mu_bar.len())?;
    let mut learner = Learner::new(kernel, mu_bar, w0, cfg)?;
    let mut trace = LossTrace::new(bins.delta(), opts.window)?;
    if opts.summary_only {
        trace = trace.summary_only();
    }
    let mut rates = opts.keep_rates.then(|| Vec::with_capacity(bins.n_bins()));
    let mut snaps = Snapshots { every: snapshot_every.unwrap_or(0), taken: Vec::new() };
    for t in 1..=bins.n_bins() {
        if let Some(r) = rates.as_mut() {
            r.push(learner.forecast().clone());
        }
        let loss = learner.observe_bin(bins.bin_events(t))?;
        trace.push(t, loss);
        if snaps.every > 0 && (t % snaps.every == 0 || t == bins.n_bins()) {
            snaps.taken.push((t, learner.weights()));
        }
    }
    Ok(LearnOutput {
        run: RunOutput { trace, rates },
        weights: learner.weights(),
        baseline: learner.baseline(),
        snapshots: snaps,
        clamp_count: learner.clamp_count(),
    })
}

pub fn run_ogd(
    bins: &BinnedCounts,
    kernel: InfluenceKernel,
    mu_bar: DVector<f64>,
    w0: Option<DMatrix<f64>>,
    cfg: LearnerConfig,
    opts: RunOptions,
    snapshot_every: Option<usize>,
) -> Result<LearnOutput> {
    check_dim(bins.p(), mu_bar.len())?;
    let mut ogd = Ogd::new(kernel, mu_bar.clone(), w0, cfg)?;
    let mut trace = LossTrace::new(bins.delta(), opts.window)?;
    if opts.summary_only {
        trace = trace.summary_only();
    }
    let mut rates = opts.keep_rates.then(|| Vec::with_capacity(bins.n_bins()));
    let mut snaps = Snapshots { every: snapshot_every.unwrap_or(0), taken: Vec::new() };
    for t in 1..=bins.n_bins() {
        if let Some(r) = rates.as_mut() {
            r.push(ogd.forecast().clone());
        }
        let loss = ogd.observe_bin(bins.bin_events(t))?;
        trace.push(t, loss);
        if snaps.every > 0 && (t % snaps.every == 0 || t == bins.n_bins()) {
            snaps.taken.push((t, ogd.weights().clone()));
        }
    }
    Ok(LearnOutput {
        run: RunOutput { trace, rates },
        weights: ogd.weights().clone(),
        baseline: mu_bar,
        snapshots: snaps,
        clamp_count: 0,
    })
}
