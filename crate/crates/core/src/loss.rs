//! Per-bin and cumulative losses, the continuous-time likelihood and the
//! discretization gap between the two.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::events::{BinnedCounts, EventStream};
use crate::kernels::{InfluenceKernel, KernelDynamics};

/// `ℓ_t(λ) = ⟨δλ, 1⟩ - ⟨x, log(δλ)⟩`.
pub fn instantaneous_loss(lambda: &DVector<f64>, x: &DVector<f64>, delta: f64) -> Result<f64> {
    check_dim(lambda.len(), x.len())?;
    let mut loss = 0.0;
    for (&l, &c) in lambda.iter().zip(x.iter()) {
        if !(l > 0.0) {
            return Err(Error::numerical(format!("rate {l} is not positive")));
        }
        let dl = delta * l;
        loss += dl;
        if c != 0.0 {
            loss -= c * dl.ln();
        }
    }
    Ok(loss)
}

/// `∇ℓ_t(λ) = δ1 - x/λ`.
pub fn loss_gradient(lambda: &DVector<f64>, x: &DVector<f64>, delta: f64) -> DVector<f64> {
    lambda.zip_map(x, |l, c| delta - c / l)
}

/// `Σ_t Σ_k (δλ_{t,k} - x_{t,k} log λ_{t,k})` with `rates[t-1] = λ_t`.
pub fn cumulative_discrete_loss(rates: &[DVector<f64>], counts: &BinnedCounts) -> Result<f64> {
    check_dim(counts.n_bins(), rates.len())?;
    let delta = counts.delta();
    let mut total = 0.0;
    let mut x = DVector::zeros(counts.p());
    for (i, lam) in rates.iter().enumerate() {
        check_dim(counts.p(), lam.len())?;
        counts.counts_into(i + 1, &mut x);
        for (&l, &c) in lam.iter().zip(x.iter()) {
            if !(l > 0.0) {
                return Err(Error::numerical(format!("rate {l} is not positive in bin {}", i + 1)));
            }
            total += delta * l;
            if c != 0.0 {
                total -= c * l.ln();
            }
        }
    }
    Ok(total)
}

/// Negative continuous-time log-likelihood over `[0, horizon]`:
/// `Σ_k ∫ μ_k - Σ_n log μ_{k_n}(τ_n)`, where `μ(τ_n)` sees only strictly
/// earlier events.
pub fn continuous_nll(
    events: &[crate::events::Event],
    horizon: f64,
    kernel: &InfluenceKernel,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
) -> Result<f64> {
    let p = mu_bar.len();
    check_dim(p, w.nrows())?;
    check_dim(p, w.ncols())?;
    let mut compensator = mu_bar.sum() * horizon;
    let col_sums: Vec<f64> = (0..p).map(|j| w.column(j).sum()).collect();
    for e in events {
        compensator += col_sums[e.actor] * kernel.integral(horizon - e.time);
    }
    let mut log_term = 0.0;
    match kernel {
        InfluenceKernel::Exponential { alpha } | InfluenceKernel::DelayedExponential { alpha, .. } => {
            let lag = match kernel {
                InfluenceKernel::DelayedExponential { delay, .. } => *delay,
                _ => 0.0,
            };
            // excitation of every actor at time `at`, from events with time < at - lag
            let mut r = DVector::<f64>::zeros(p);
            let mut at = 0.0;
            let mut next = 0;
            for e in events {
                let cutoff = e.time - lag;
                while next < events.len() && events[next].time < cutoff {
                    let src = events[next];
                    r *= alpha.powf(src.time - at);
                    at = src.time;
                    r.axpy(1.0, &w.column(src.actor), 1.0);
                    next += 1;
                }
                let excite = r[e.actor] * alpha.powf(cutoff - at);
                log_term += log_rate(mu_bar[e.actor] + excite)?;
            }
        }
        _ => {
            let support = kernel.support().unwrap_or(f64::INFINITY);
            let mut first = 0;
            for (i, e) in events.iter().enumerate() {
                while e.time - events[first].time > support {
                    first += 1;
                }
                let mut mu = mu_bar[e.actor];
                for src in &events[first..i] {
                    let h = kernel.value(e.time - src.time);
                    if h != 0.0 {
                        mu += w[(e.actor, src.actor)] * h;
                    }
                }
                log_term += log_rate(mu)?;
            }
        }
    }
    Ok(compensator - log_term)
}

fn log_rate(mu: f64) -> Result<f64> {
    if mu > 0.0 {
        Ok(mu.ln())
    } else {
        Err(Error::numerical(format!("intensity {mu} at an event is not positive")))
    }
}

/// Discretization gap and its explicit bound `C·N_T·δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub gap: f64,
    pub bound: f64,
    pub continuous: f64,
    pub discrete: f64,
}

/// Compare the continuous likelihood with the binned loss on exact rates
/// for `h(τ) = α^τ`, together with
/// `C = 3pW_max/2 + W_max x_max p / μ_min - log α`, where `x_max` is the
/// largest observed per-bin rate `x_{t,k}/δ`.
///
/// Both losses are taken over `[0, n_bins·δ]`.
pub fn discretization_gap(
    stream: &EventStream,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
    alpha: f64,
    delta: f64,
) -> Result<GapReport> {
    let mu_min = mu_bar.min();
    if !(mu_min > 0.0) {
        return Err(Error::config("discretization bound needs every baseline rate to be positive"));
    }
    let kernel = InfluenceKernel::exponential(alpha);
    let bins = crate::events::discretize(stream, delta)?;
    let horizon = bins.n_bins() as f64 * delta;
    let continuous = continuous_nll(stream.events(), horizon, &kernel, w, mu_bar)?;

    let mut dynm = KernelDynamics::new(kernel, delta, mu_bar.clone())?;
    let mut lam = mu_bar.clone();
    let mut next = DVector::zeros(mu_bar.len());
    let mut x = DVector::zeros(mu_bar.len());
    let mut discrete = 0.0;
    for t in 1..=bins.n_bins() {
        bins.counts_into(t, &mut x);
        for (&l, &c) in lam.iter().zip(x.iter()) {
            discrete += delta * l - c * l.ln();
        }
        let step = dynm.advance(bins.bin_events(t), w);
        step.apply_into(&lam, w, &mut next);
        std::mem::swap(&mut lam, &mut next);
    }

    let p = mu_bar.len() as f64;
    let w_max = w.max();
    let x_max = bins.max_rate();
    let c = 1.5 * p * w_max + w_max * x_max * p / mu_min - alpha.ln();
    Ok(GapReport {
        gap: (continuous - discrete).abs(),
        bound: c * stream.len() as f64 * delta,
        continuous,
        discrete,
    })
}

/// `(δ/D) Σ_{i<D/δ} ℓ_{t-i}`, defined once `D/δ` values are available.
pub fn moving_average_loss(losses: &[f64], window: f64, delta: f64) -> Result<Vec<Option<f64>>> {
    let n = window_bins(window, delta)?;
    let mut ma = MovingAverage::new(n, delta, window);
    Ok(losses.iter().map(|&l| ma.push(l)).collect())
}

/// Number of bins `D/δ` in a moving-average window.
pub fn window_bins(window: f64, delta: f64) -> Result<usize> {
    if !(delta > 0.0) || window < delta * (1.0 - 1e-9) {
        return Err(Error::config(format!("moving-average window {window} is shorter than delta {delta}")));
    }
    let ratio = window / delta;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::config(format!("moving-average window {window} is not a multiple of delta {delta}")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone)]
struct MovingAverage {
    n: usize,
    scale: f64,
    buf: VecDeque<f64>,
    sum: f64,
}

impl MovingAverage {
    fn new(n: usize, delta: f64, window: f64) -> Self {
        Self { n, scale: delta / window, buf: VecDeque::with_capacity(n + 1), sum: 0.0 }
    }

    fn push(&mut self, l: f64) -> Option<f64> {
        self.buf.push_back(l);
        self.sum += l;
        if self.buf.len() > self.n {
            self.sum -= self.buf.pop_front().unwrap();
        }
        if self.buf.len() == self.n {
            Some(self.scale * self.sum)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub t: usize,
    pub instantaneous: f64,
    pub cumulative: f64,
    pub moving_average: Option<f64>,
}

/// Streaming accumulator of [`LossRecord`]s.
#[derive(Debug, Clone)]
pub struct LossTrace {
    records: Vec<LossRecord>,
    cumulative: f64,
    ma: Option<MovingAverage>,
    keep: bool,
}

impl LossTrace {
    /// `window` is the moving-average width `D` in time units.
    pub fn new(delta: f64, window: Option<f64>) -> Result<Self> {
        let ma = match window {
            Some(d) => Some(MovingAverage::new(window_bins(d, delta)?, delta, d)),
            None => None,
        };
        Ok(Self { records: Vec::new(), cumulative: 0.0, ma, keep: true })
    }

    /// Keep only the running totals, not every record.
    pub fn summary_only(mut self) -> Self {
        self.keep = false;
        self
    }

    pub fn push(&mut self, t: usize, loss: f64) -> LossRecord {
        self.cumulative += loss;
        let moving_average = self.ma.as_mut().and_then(|m| m.push(loss));
        let rec = LossRecord { t, instantaneous: loss, cumulative: self.cumulative, moving_average };
        if self.keep {
            self.records.push(rec);
        }
        rec
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn cumulative(&self) -> f64 {
        self.cumulative
    }

    /// Latest moving-average value.
    pub fn last_moving_average(&self) -> Option<f64> {
        self.ma.as_ref().and_then(|m| (m.buf.len() == m.n).then_some(m.scale * m.sum))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_loss_csv(&self.records, out)
    }
}

pub fn write_loss_csv<W: Write>(records: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "instantaneous", "cumulative", "moving_avg"])?;
    for r in records {
        w.write_record([
            r.t.to_string(),
            r.instantaneous.to_string(),
            r.cumulative.to_string(),
            r.moving_average.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{discretize, Event};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn instantaneous_examples() {
        assert_eq!(instantaneous_loss(&v(&[1.0, 1.0, 1.0]), &v(&[0.0; 3]), 1.0).unwrap(), 3.0);
        let l = instantaneous_loss(&v(&[10.0, 10.0]), &v(&[3.0, 1.0]), 0.1).unwrap();
        assert_relative_eq!(l, 2.0, max_relative = 1e-14);
        let l = instantaneous_loss(&v(&[2.0]), &v(&[1.0]), 1.0).unwrap();
        assert_relative_eq!(l, 2.0 - 2f64.ln(), max_relative = 1e-14);
        assert!(instantaneous_loss(&v(&[0.0]), &v(&[1.0]), 1.0).is_err());
        assert!(instantaneous_loss(&v(&[1.0]), &v(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = 4;
            let lam = DVector::from_fn(p, |_, _| rng.random_range(0.1..5.0));
            let x = DVector::from_fn(p, |_, _| rng.random_range(0..4) as f64);
            let delta = rng.random_range(0.05..1.0);
            let g = loss_gradient(&lam, &x, delta);
            for k in 0..p {
                let h = 1e-5 * lam[k];
                let mut a = lam.clone();
                let mut b = lam.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (instantaneous_loss(&a, &x, delta).unwrap() - instantaneous_loss(&b, &x, delta).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "{fd} vs {}", g[k]);
            }
        }
    }

    proptest! {
        #[test]
        fn convex_midpoint(
            a in prop::collection::vec(1e-3f64..10.0, 3),
            b in prop::collection::vec(1e-3f64..10.0, 3),
            x in prop::collection::vec(0u8..5, 3),
            delta in 0.01f64..1.0,
        ) {
            let (a, b) = (v(&a), v(&b));
            let x = DVector::from_iterator(3, x.into_iter().map(f64::from));
            let mid = (&a + &b) * 0.5;
            let lm = instantaneous_loss(&mid, &x, delta).unwrap();
            let avg = 0.5 * (instantaneous_loss(&a, &x, delta).unwrap() + instantaneous_loss(&b, &x, delta).unwrap());
            prop_assert!(lm <= avg + 1e-12 * avg.abs().max(1.0));
        }
    }

    fn random_bins(rng: &mut ChaCha8Rng, p: usize, n: usize, horizon: f64, delta: f64) -> (EventStream, BinnedCounts) {
        let ev = (0..n)
            .map(|_| Event::new(rng.random_range(0..p), rng.random_range(0.0..horizon)))
            .collect();
        let s = EventStream::new(ev, p, horizon).unwrap();
        let b = discretize(&s, delta).unwrap();
        (s, b)
    }

    #[test]
    fn cumulative_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let delta = rng.random_range(0.05..0.5);
            let (_, bins) = random_bins(&mut rng, 3, 60, 10.0, delta);
            let rates: Vec<_> = (0..bins.n_bins())
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(0.01..5.0)))
                .collect();
            let lhs = cumulative_discrete_loss(&rates, &bins).unwrap();
            let sum_inst: f64 = rates
                .iter()
                .enumerate()
                .map(|(i, l)| instantaneous_loss(l, &bins.counts(i + 1), delta).unwrap())
                .sum();
            let rhs = sum_inst + bins.total() as f64 * delta.ln();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn cumulative_trivial_cases() {
        let s = EventStream::new(vec![], 2, 1.0).unwrap();
        let b = discretize(&s, 0.25).unwrap();
        let rates = vec![v(&[1.0, 2.0]); 4];
        assert_relative_eq!(cumulative_discrete_loss(&rates, &b).unwrap(), 3.0, max_relative = 1e-14);
        assert!(cumulative_discrete_loss(&rates[..3], &b).is_err());

        let s = EventStream::new(vec![Event::new(0, 0.5)], 1, 1.0).unwrap();
        let b = discretize(&s, 1.0).unwrap();
        let got = cumulative_discrete_loss(&[v(&[2.0])], &b).unwrap();
        assert_relative_eq!(got, instantaneous_loss(&v(&[2.0]), &v(&[1.0]), 1.0).unwrap());
    }

    #[test]
    fn continuous_nll_trivial_cases() {
        let k = InfluenceKernel::exp_decay_rate(1.0);
        let mu = v(&[0.01, 0.02]);
        let w = DMatrix::from_element(2, 2, 0.3);
        assert_relative_eq!(continuous_nll(&[], 100.0, &k, &w, &mu).unwrap(), 3.0, max_relative = 1e-14);
        let ev = [Event::new(0, 1.0), Event::new(1, 2.0), Event::new(1, 2.5)];
        let zero = DMatrix::zeros(2, 2);
        let want = 0.03 * 100.0 - (0.01f64.ln() + 2.0 * 0.02f64.ln());
        assert_relative_eq!(continuous_nll(&ev, 100.0, &k, &zero, &mu).unwrap(), want, max_relative = 1e-14);
    }

    /// Quadrature of the compensator plus brute-force intensities at events.
    fn nll_oracle(ev: &[Event], horizon: f64, k: &InfluenceKernel, w: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
        let intensity = |tau: f64, actor: usize| -> f64 {
            mu[actor]
                + ev.iter()
                    .filter(|e| e.time < tau)
                    .map(|e| w[(actor, e.actor)] * k.value(tau - e.time))
                    .sum::<f64>()
        };
        // integrate piecewise between event times with Simpson's rule
        let mut knots: Vec<f64> = vec![0.0, horizon];
        for e in ev {
            knots.push(e.time);
            if let Some(s) = k.support() {
                knots.push((e.time + s).min(horizon));
            }
            if let InfluenceKernel::DelayedExponential { delay, .. } = k {
                knots.push((e.time + delay).min(horizon));
            }
        }
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let mut integral = 0.0;
        for seg in knots.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if b - a < 1e-14 {
                continue;
            }
            let m = 200;
            let h = (b - a) / m as f64;
            for actor in 0..mu.len() {
                // open endpoints: evaluate just inside the segment
                let f = |x: f64| intensity(x.clamp(a + 1e-12, b - 1e-12), actor);
                let mut s = f(a) + f(b);
                for i in 1..m {
                    s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
                }
                integral += s * h / 3.0;
            }
        }
        integral - ev.iter().map(|e| intensity(e.time, e.actor).ln()).sum::<f64>()
    }

    #[test]
    fn continuous_nll_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernels = [
            InfluenceKernel::exp_decay_rate(1.3),
            InfluenceKernel::DelayedExponential { alpha: 0.4, delay: 0.3 },
            InfluenceKernel::Rectangular { width: 0.8 },
        ];
        for k in &kernels {
            for _ in 0..3 {
                let (s, _) = random_bins(&mut rng, 2, 12, 6.0, 0.1);
                let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.0..0.8));
                let mu = DVector::from_fn(2, |_, _| rng.random_range(0.05..0.5));
                let got = continuous_nll(s.events(), 6.0, k, &w, &mu).unwrap();
                let want = nll_oracle(s.events(), 6.0, k, &w, &mu);
                assert!((got - want).abs() < 1e-6, "{k:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gap_is_zero_without_events() {
        let s = EventStream::new(vec![], 2, 10.0).unwrap();
        let r = discretization_gap(&s, &DMatrix::from_element(2, 2, 0.4), &v(&[0.1, 0.2]), 0.5, 0.1).unwrap();
        assert!(r.gap < 1e-12);
        assert_eq!(r.bound, 0.0);
        assert!(discretization_gap(&s, &DMatrix::zeros(2, 2), &v(&[0.0, 0.2]), 0.5, 0.1).is_err());
    }

    #[test]
    fn gap_within_bound_on_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(1..30);
            let (s, _) = random_bins(&mut rng, 2, n, 20.0, 0.1);
            let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.0..0.5));
            let mu = DVector::from_fn(2, |_, _| rng.random_range(0.05..0.5));
            let alpha = rng.random_range(0.1..0.9);
            let r = discretization_gap(&s, &w, &mu, alpha, 0.1).unwrap();
            assert!(r.gap <= r.bound, "{r:?}");
        }
    }

    #[test]
    fn moving_average_examples() {
        let c = vec![2.5; 10];
        let ma = moving_average_loss(&c, 0.1, 0.1).unwrap();
        assert!(ma.iter().all(|m| (m.unwrap() - 2.5).abs() < 1e-14));
        let ma = moving_average_loss(&c, 0.4, 0.1).unwrap();
        assert_eq!(ma[..3], [None, None, None]);
        assert!(ma[3..].iter().all(|m| (m.unwrap() - 2.5).abs() < 1e-12));
        assert!(moving_average_loss(&c, 0.05, 0.1).is_err());
        assert!(moving_average_loss(&c, 0.25, 0.1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..3.0)).collect();
        let ma = moving_average_loss(&l, 0.7, 0.1).unwrap();
        for t in 0..l.len() {
            let want = (t >= 6).then(|| (0.1 / 0.7) * l[t - 6..=t].iter().sum::<f64>());
            match (ma[t], want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("t={t}: {other:?}"),
            }
        }
    }

    #[test]
    fn trace_records_and_csv() {
        let mut tr = LossTrace::new(0.5, Some(1.0)).unwrap();
        tr.push(1, 1.0);
        let r = tr.push(2, 3.0);
        assert_eq!(r.cumulative, 4.0);
        assert_eq!(r.moving_average, Some(2.0));
        assert_eq!(tr.last_moving_average(), Some(2.0));
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,instantaneous,cumulative,moving_avg\n1,1,1,\n2,3,4,2\n");
    }
}
