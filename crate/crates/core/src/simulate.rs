//! Multivariate Hawkes simulation by thinning, the block-structured test
//! network, and a time-rescaling goodness-of-fit check.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{check_dim, Error, Result};
use crate::events::{Event, EventStream};
use crate::kernels::InfluenceKernel;

/// Cap applied when the process is not stationary and no cap was given.
pub const UNSTABLE_EVENT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub horizon: f64,
    pub mu_bar: DVector<f64>,
    pub w: DMatrix<f64>,
    pub kernel: InfluenceKernel,
    pub seed: u64,
    pub max_events: Option<usize>,
}

impl GeneratorConfig {
    pub fn p(&self) -> usize {
        self.mu_bar.len()
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub stream: EventStream,
    /// The event cap was reached; the stream ends at its last event.
    pub capped: bool,
}

/// Spectral radius of `W ∫h`; stationarity needs it below 1.
pub fn branching_ratio(w: &DMatrix<f64>, kernel: &InfluenceKernel) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let m = w * kernel.total_mass();
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn simulate_hawkes(cfg: &GeneratorConfig) -> Result<Simulation> {
    let p = cfg.p();
    check_dim(p, cfg.w.nrows())?;
    check_dim(p, cfg.w.ncols())?;
    if p == 0 {
        return Err(Error::config("need at least one actor"));
    }
    if cfg.mu_bar.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::config("baseline rates must be positive"));
    }
    if cfg.w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::config("influence weights must be nonnegative"));
    }
    if !(cfg.horizon > 0.0) {
        return Err(Error::config(format!("horizon must be positive, got {}", cfg.horizon)));
    }
    let rho = branching_ratio(&cfg.w, &cfg.kernel);
    let cap = match cfg.max_events {
        Some(c) => c,
        None if rho >= 1.0 => {
            warn!("branching ratio {rho:.3} >= 1: process is not stationary, capping at {UNSTABLE_EVENT_CAP} events");
            UNSTABLE_EVENT_CAP
        }
        None => usize::MAX,
    };
    if rho >= 1.0 && cfg.max_events.is_some() {
        warn!("branching ratio {rho:.3} >= 1: process is not stationary");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (events, capped) = match cfg.kernel {
        InfluenceKernel::Exponential { alpha } => thin_exponential(cfg, alpha, 0.0, cap, &mut rng),
        InfluenceKernel::DelayedExponential { alpha, delay } => thin_exponential(cfg, alpha, delay, cap, &mut rng),
        _ => thin_windowed(cfg, cap, &mut rng),
    };
    let horizon = if capped { events.last().map_or(cfg.horizon, |e| e.time) } else { cfg.horizon };
    if capped {
        warn!("event cap {cap} reached at time {horizon}");
    }
    Ok(Simulation { stream: EventStream::new(events, p, horizon)?, capped })
}

fn pick_actor(rng: &mut ChaCha8Rng, rates: impl Iterator<Item = f64>, total: f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, r) in rates.enumerate() {
        acc += r;
        last = k;
        if target < acc {
            return k;
        }
    }
    last
}

/// Thinning for `h(τ) = α^(τ-D) 1[τ > D]` (`D = 0` for the plain kernel).
///
/// Between activations the total intensity only decays, so its current
/// value bounds it until the next activation time.
fn thin_exponential(
    cfg: &GeneratorConfig,
    alpha: f64,
    delay: f64,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Event>, bool) {
    let p = cfg.p();
    let mu_sum = cfg.mu_bar.sum();
    let col_sums: Vec<f64> = (0..p).map(|j| cfg.w.column(j).sum()).collect();
    let mut r = DVector::<f64>::zeros(p);
    let mut r_sum = 0.0;
    let mut tau = 0.0;
    let mut events: Vec<Event> = Vec::new();
    // index of the first event not yet activated
    let mut pending = 0;
    loop {
        let bound = mu_sum + r_sum;
        let wait: f64 = rng.sample::<f64, _>(Exp1) / bound;
        let cand = tau + wait;
        if pending < events.len() {
            let act: f64 = events[pending].time + delay;
            if act <= cand && act <= cfg.horizon {
                // activate the delayed event and restart the proposal there
                let dec = alpha.powf(act - tau);
                r *= dec;
                let k = events[pending].actor;
                r.axpy(1.0, &cfg.w.column(k), 1.0);
                r_sum = r_sum * dec + col_sums[k];
                tau = act;
                pending += 1;
                continue;
            }
        }
        if cand > cfg.horizon {
            return (events, false);
        }
        let dec = alpha.powf(cand - tau);
        r *= dec;
        r_sum *= dec;
        tau = cand;
        let total = mu_sum + r_sum;
        if rng.random::<f64>() * bound <= total {
            let k = pick_actor(rng, cfg.mu_bar.iter().zip(r.iter()).map(|(m, x)| m + x), total);
            events.push(Event::new(k, tau));
            if delay == 0.0 {
                r.axpy(1.0, &cfg.w.column(k), 1.0);
                r_sum += col_sums[k];
                pending = events.len();
            }
            if events.len() >= cap {
                return (events, true);
            }
            // guard against drift in the running sum
            if events.len() % 1024 == 0 {
                r_sum = r.sum();
            }
        }
    }
}

/// Thinning for kernels with finite support, bounding each past event's
/// contribution by the kernel's upper envelope.
fn thin_windowed(cfg: &GeneratorConfig, cap: usize, rng: &mut ChaCha8Rng) -> (Vec<Event>, bool) {
    let p = cfg.p();
    let kernel = &cfg.kernel;
    let support = kernel.support().unwrap_or(f64::INFINITY);
    let mu_sum = cfg.mu_bar.sum();
    let col_sums: Vec<f64> = (0..p).map(|j| cfg.w.column(j).sum()).collect();
    let mut events: Vec<Event> = Vec::new();
    let mut first = 0;
    let mut tau = 0.0;
    let mut rates = DVector::<f64>::zeros(p);
    loop {
        while first < events.len() && tau - events[first].time > support {
            first += 1;
        }
        let bound = mu_sum
            + events[first..]
                .iter()
                .map(|e| col_sums[e.actor] * kernel.envelope(tau - e.time))
                .sum::<f64>();
        let cand = tau + rng.sample::<f64, _>(Exp1) / bound;
        if cand > cfg.horizon {
            return (events, false);
        }
        tau = cand;
        rates.copy_from(&cfg.mu_bar);
        for e in &events[first..] {
            let h = kernel.value(tau - e.time);
            if h != 0.0 {
                rates.axpy(h, &cfg.w.column(e.actor), 1.0);
            }
        }
        let total = rates.sum();
        if rng.random::<f64>() * bound <= total {
            let k = pick_actor(rng, rates.iter().copied(), total);
            events.push(Event::new(k, tau));
            if events.len() >= cap {
                return (events, true);
            }
        }
    }
}

/// Layout of the block-structured influence matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockNetworkSpec {
    pub p: usize,
    pub block_size: usize,
    /// Within-block weights are `U[0, block_max]` (dense).
    pub block_max: f64,
    /// Probability that an off-block entry is nonzero.
    pub off_prob: f64,
    /// Nonzero off-block weights are `U[0, off_max]`.
    pub off_max: f64,
    /// Top singular value after normalization.
    pub top_singular_value: f64,
}

impl Default for BlockNetworkSpec {
    fn default() -> Self {
        Self { p: 100, block_size: 20, block_max: 1.0, off_prob: 0.2, off_max: 0.3, top_singular_value: 0.8 }
    }
}

impl BlockNetworkSpec {
    pub fn with_p(p: usize) -> Self {
        Self { p, ..Self::default() }
    }
}

/// Returns `W` and its support mask.
pub fn generate_block_network(spec: &BlockNetworkSpec, seed: u64) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    if spec.block_size == 0 || spec.p % spec.block_size != 0 {
        return Err(Error::config(format!(
            "p = {} is not a multiple of the block size {}",
            spec.p, spec.block_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.p;
    let mut w = DMatrix::zeros(p, p);
    let mut mask = DMatrix::from_element(p, p, false);
    for j in 0..p {
        for i in 0..p {
            if i / spec.block_size == j / spec.block_size {
                w[(i, j)] = rng.random::<f64>() * spec.block_max;
                mask[(i, j)] = true;
            } else if rng.random::<f64>() < spec.off_prob {
                w[(i, j)] = rng.random::<f64>() * spec.off_max;
                mask[(i, j)] = true;
            }
        }
    }
    let top = w.clone().svd(false, false).singular_values.max();
    if top > 0.0 {
        w *= spec.top_singular_value / top;
    } else {
        warn!("generated network is all zero; skipping normalization");
    }
    Ok((w, mask))
}

/// Compensator increments `Λ_k(τ_i) - Λ_k(τ_{i-1})` between successive
/// events of each actor (the first measured from 0), pooled over actors.
/// Under the true model they are i.i.d. Exp(1).
pub fn rescaled_intervals(
    stream: &EventStream,
    kernel: &InfluenceKernel,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
) -> Result<Vec<f64>> {
    let p = mu_bar.len();
    check_dim(p, w.nrows())?;
    check_dim(stream.p(), p)?;
    let events = stream.events();
    let mut last = vec![0.0; p];
    let mut out = Vec::with_capacity(events.len());
    match kernel {
        InfluenceKernel::Exponential { alpha } | InfluenceKernel::DelayedExponential { alpha, .. } => {
            let lag = match kernel {
                InfluenceKernel::DelayedExponential { delay, .. } => *delay,
                _ => 0.0,
            };
            // Λ_k(τ) = μ̄_k τ + (S_k - r_k(τ)) / β, with S_k the total weight of
            // events active by τ - D and r_k their decayed excitation
            let beta = -alpha.ln();
            let mut s = DVector::<f64>::zeros(p);
            let mut r = DVector::<f64>::zeros(p);
            let mut at = 0.0;
            let mut next = 0;
            for e in events {
                let cutoff = e.time - lag;
                while next < events.len() && events[next].time < cutoff {
                    let src = events[next];
                    r *= alpha.powf(src.time - at);
                    at = src.time;
                    s.axpy(1.0, &w.column(src.actor), 1.0);
                    r.axpy(1.0, &w.column(src.actor), 1.0);
                    next += 1;
                }
                let k = e.actor;
                let lam = mu_bar[k] * e.time + (s[k] - r[k] * alpha.powf(cutoff - at)) / beta;
                out.push(lam - last[k]);
                last[k] = lam;
            }
        }
        _ => {
            // events older than the support contribute their full mass
            let support = kernel.support().unwrap_or(f64::INFINITY);
            let mass = kernel.total_mass();
            let mut done = DVector::<f64>::zeros(p);
            let mut first = 0;
            for (i, e) in events.iter().enumerate() {
                while e.time - events[first].time > support {
                    done.axpy(mass, &w.column(events[first].actor), 1.0);
                    first += 1;
                }
                let k = e.actor;
                let lam = mu_bar[k] * e.time
                    + done[k]
                    + events[first..i]
                        .iter()
                        .map(|src| w[(k, src.actor)] * kernel.integral(e.time - src.time))
                        .sum::<f64>();
                out.push(lam - last[k]);
                last[k] = lam;
            }
        }
    }
    Ok(out)
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value `Q((√n + 0.12 + 0.11/√n) D)` with
/// `Q(λ) = 2 Σ_{j>=1} (-1)^{j-1} e^{-2j²λ²}`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut q = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        q += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * q).clamp(0.0, 1.0)
}

/// KS test of the rescaled intervals against Exp(1); returns `(D, p-value)`.
pub fn time_rescaling_test(
    stream: &EventStream,
    kernel: &InfluenceKernel,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
) -> Result<(f64, f64)> {
    let z = rescaled_intervals(stream, kernel, w, mu_bar)?;
    let d = ks_statistic(&z, |x| 1.0 - (-x).exp());
    Ok((d, ks_p_value(d, z.len())))
}
