//! Offline fit of `W` on a whole binned stream, used as a reference for the
//! online learners.
//!
//! Minimizes `F(W) = (1/n) Σ_t g_t(W) + γ‖W‖₁` over `W ⪰ 0`, where
//! `g_t(W) = ⟨1, δλ_t⟩ - ⟨x_t, log δλ_t⟩` and `λ_t = μ̄ + W K_t` with the
//! direct-calculation recursion `K_{t+1} = α^δ K_t + y_t`.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::events::BinnedCounts;
use crate::kernels::{InfluenceKernel, KernelDynamics};

/// Bins processed per dense block.
const CHUNK: usize = 4096;

/// `K_t` for every bin, one column per bin (`K_1 = 0`).
pub fn direct_k_sequence(bins: &BinnedCounts, kernel: &InfluenceKernel) -> Result<DMatrix<f64>> {
    let p = bins.p();
    let ad = kernel
        .decay_per_bin(bins.delta())
        .ok_or_else(|| Error::Unsupported(format!("batch fit needs an exponential-family kernel, got {kernel:?}")))?;
    let mut dynm = KernelDynamics::new(kernel.clone(), bins.delta(), DVector::zeros(p))?;
    let n = bins.n_bins();
    let mut ks = DMatrix::zeros(p, n);
    let mut k = DVector::zeros(p);
    for t in 1..=n {
        ks.column_mut(t - 1).copy_from(&k);
        let y = &dynm.advance_constant(bins.bin_events(t))?.y;
        k *= ad;
        k += y;
    }
    Ok(ks)
}

/// The smooth part `f(W) = (1/n) Σ_t g_t(W)` over precomputed `K_t`.
#[derive(Debug, Clone)]
pub struct BatchObjective<'a> {
    bins: &'a BinnedCounts,
    ks: DMatrix<f64>,
    mu_bar: DVector<f64>,
}

impl<'a> BatchObjective<'a> {
    pub fn new(bins: &'a BinnedCounts, kernel: &InfluenceKernel, mu_bar: DVector<f64>) -> Result<Self> {
        check_dim(bins.p(), mu_bar.len())?;
        if mu_bar.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::config("batch fit needs positive baseline rates"));
        }
        if bins.n_bins() == 0 {
            return Err(Error::data("no bins to fit"));
        }
        Ok(Self { bins, ks: direct_k_sequence(bins, kernel)?, mu_bar })
    }

    pub fn k_sequence(&self) -> &DMatrix<f64> {
        &self.ks
    }

    /// `f(W)`, and `∇f(W)` when requested. Infinite if some `λ_t <= 0`.
    pub fn eval(&self, w: &DMatrix<f64>, want_grad: bool) -> (f64, Option<DMatrix<f64>>) {
        let p = self.mu_bar.len();
        let n = self.bins.n_bins();
        let delta = self.bins.delta();
        let ln_delta = delta.ln();
        let mut value = 0.0;
        let mut grad = want_grad.then(|| DMatrix::zeros(p, p));
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let kc = self.ks.columns(start, len);
            let mut lam = w * kc;
            for mut col in lam.column_iter_mut() {
                col += &self.mu_bar;
            }
            value += delta * lam.sum();
            // residual δ - x/λ, built densely then corrected at events
            let mut resid = grad.as_ref().map(|_| DMatrix::from_element(p, len, delta));
            for c in 0..len {
                for e in self.bins.bin_events(start + c + 1) {
                    let l = lam[(e.actor, c)];
                    if !(l > 0.0) {
                        return (f64::INFINITY, None);
                    }
                    value -= l.ln() + ln_delta;
                    if let Some(r) = resid.as_mut() {
                        r[(e.actor, c)] -= 1.0 / l;
                    }
                }
            }
            if let (Some(g), Some(r)) = (grad.as_mut(), resid.as_ref()) {
                g.gemm(1.0, r, &kc.transpose(), 1.0);
            }
            start += len;
        }
        let inv = 1.0 / n as f64;
        (value * inv, grad.map(|g| g * inv))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub gamma: f64,
    pub max_outer: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub max_line_search: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { gamma: 1e-3, max_outer: 60, tol: 1e-9, max_line_search: 15 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchFit {
    pub w: DMatrix<f64>,
    /// `F(W)` after each accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn l1(w: &DMatrix<f64>) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// Proximal gradient with Barzilai–Borwein step guesses and backtracking.
pub fn batch_fit(objective: &BatchObjective<'_>, w0: Option<DMatrix<f64>>, cfg: &BatchConfig) -> Result<BatchFit> {
    if !(cfg.gamma >= 0.0) {
        return Err(Error::config(format!("l1 penalty must be nonnegative, got {}", cfg.gamma)));
    }
    let p = objective.mu_bar.len();
    let mut w = w0.unwrap_or_else(|| DMatrix::zeros(p, p)).map(|v| v.max(0.0));
    check_dim(p, w.nrows())?;
    check_dim(p, w.ncols())?;
    let (mut f, g) = objective.eval(&w, true);
    let mut g = g.ok_or_else(|| Error::numerical("objective is not finite at the starting point"))?;
    let mut big_f = f + cfg.gamma * l1(&w);
    let mut trace = vec![big_f];
    let mut step = 1.0 / g.norm().max(1.0);
    let mut converged = false;
    for it in 0..cfg.max_outer {
        let mut accepted = None;
        let mut last_try = None;
        for _ in 0..cfg.max_line_search {
            let cand = (&w - step * &g).map(|v| (v - step * cfg.gamma).max(0.0));
            let d = &cand - &w;
            let (fc, _) = objective.eval(&cand, false);
            let model = f + g.dot(&d) + d.norm_squared() / (2.0 * step);
            if fc <= model + 1e-12 * f.abs() {
                accepted = Some((cand, fc));
                break;
            }
            last_try = Some((cand, fc));
            step *= 0.5;
        }
        let (cand, fc) = match accepted {
            Some(a) => a,
            None => {
                let (cand, fc) = last_try.unwrap();
                let fc_total = fc + cfg.gamma * l1(&cand);
                if !(fc_total <= big_f) {
                    return Err(Error::numerical(format!(
                        "batch objective increased after line search at iteration {it}; trace: {trace:?}"
                    )));
                }
                (cand, fc)
            }
        };
        let new_total = fc + cfg.gamma * l1(&cand);
        let (_, gc) = objective.eval(&cand, true);
        let gc = gc.ok_or_else(|| Error::numerical("objective became non-finite"))?;
        let s = &cand - &w;
        let yv = &gc - &g;
        let sy = s.dot(&yv);
        let rel = (big_f - new_total).abs() / big_f.abs().max(1e-300);
        w = cand;
        f = fc;
        g = gc;
        big_f = new_total.min(big_f);
        trace.push(big_f);
        debug!("batch iteration {it}: F = {big_f}, step = {step:e}");
        if rel < cfg.tol || s.norm() == 0.0 {
            converged = true;
            break;
        }
        step = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-12, 1e12) } else { step * 2.0 };
    }
    Ok(BatchFit { w, trace, converged })
}

/// Cumulative `Σ_{s<=t} ℓ_s` of the direct-calculation rates `μ̄ + W K_s`.
pub fn batch_loss_curve(
    w: &DMatrix<f64>,
    bins: &BinnedCounts,
    kernel: &InfluenceKernel,
    mu_bar: &DVector<f64>,
) -> Result<Vec<f64>> {
    let p = bins.p();
    check_dim(p, mu_bar.len())?;
    check_dim(p, w.nrows())?;
    let ad = kernel
        .decay_per_bin(bins.delta())
        .ok_or_else(|| Error::Unsupported("batch loss needs an exponential-family kernel".into()))?;
    let mut dynm = KernelDynamics::new(kernel.clone(), bins.delta(), DVector::zeros(p))?;
    let delta = bins.delta();
    let mu_sum = mu_bar.sum();
    // wk = W K_t, updated through the columns of the actors that fired
    let mut wk: DVector<f64> = DVector::zeros(p);
    let mut total = 0.0;
    let mut out = Vec::with_capacity(bins.n_bins());
    for t in 1..=bins.n_bins() {
        total += delta * (mu_sum + wk.sum());
        for e in bins.bin_events(t) {
            let l = mu_bar[e.actor] + wk[e.actor];
            if !(l > 0.0) {
                return Err(Error::numerical(format!("rate {l} is not positive in bin {t}")));
            }
            total -= (delta * l).ln();
        }
        out.push(total);
        let y = &dynm.advance_constant(bins.bin_events(t))?.y;
        wk *= ad;
        for (j, &yj) in y.iter().enumerate() {
            if yj != 0.0 {
                wk.axpy(yj, &w.column(j), 1.0);
            }
        }
    }
    Ok(out)
}

/// Total binned loss `Σ_t Σ_k (δλ_{t,k} - x_{t,k} log λ_{t,k})` under `W`.
pub fn batch_loss_of(
    w: &DMatrix<f64>,
    bins: &BinnedCounts,
    kernel: &InfluenceKernel,
    mu_bar: &DVector<f64>,
) -> Result<f64> {
    let curve = batch_loss_curve(w, bins, kernel, mu_bar)?;
    Ok(curve.last().copied().unwrap_or(0.0) + bins.total() as f64 * bins.delta().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{discretize, Event, EventStream};
    use crate::simulate::{simulate_hawkes, GeneratorConfig};
    use crate::tracker::{run, RunOptions, TrackerConfig};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simulated(seed: u64, horizon: f64, delta: f64) -> (BinnedCounts, DMatrix<f64>, DVector<f64>) {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.4]);
        let mu = DVector::from_vec(vec![0.2, 0.3]);
        let cfg = GeneratorConfig {
            horizon,
            mu_bar: mu.clone(),
            w: w.clone(),
            kernel: InfluenceKernel::exp_decay_rate(1.0),
            seed,
            max_events: None,
        };
        let s = simulate_hawkes(&cfg).unwrap().stream;
        (discretize(&s, delta).unwrap(), w, mu)
    }

    #[test]
    fn k_sequence_matches_direct_tracker() {
        let (bins, w, mu) = simulated(1, 200.0, 0.5);
        let kernel = InfluenceKernel::exp_decay_rate(1.0);
        let ks = direct_k_sequence(&bins, &kernel).unwrap();
        let out = run(&bins, kernel, w.clone(), mu.clone(), TrackerConfig::direct(0.5), RunOptions {
            keep_rates: true,
            ..Default::default()
        })
        .unwrap();
        for (t, r) in out.rates.unwrap().iter().enumerate() {
            let want = &mu + &w * ks.column(t);
            assert!((r - want).amax() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (bins, _, mu) = simulated(2, 300.0, 0.5);
        let obj = BatchObjective::new(&bins, &InfluenceKernel::exp_decay_rate(1.0), mu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.05..0.5));
        let (_, g) = obj.eval(&w, true);
        let g = g.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let h = 1e-6;
                let mut a = w.clone();
                let mut b = w.clone();
                a[(i, j)] += h;
                b[(i, j)] -= h;
                let fd = (obj.eval(&a, false).0 - obj.eval(&b, false).0) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-6 * g[(i, j)].abs().max(1.0), "{fd} vs {}", g[(i, j)]);
            }
        }
        // objective value equals the binned loss curve divided by the bin count
        let curve = batch_loss_curve(&w, &bins, &InfluenceKernel::exp_decay_rate(1.0), &obj.mu_bar).unwrap();
        let f = obj.eval(&w, false).0;
        assert!((f - curve.last().unwrap() / bins.n_bins() as f64).abs() < 1e-10 * f.abs());
    }

    #[test]
    fn quiet_data_fits_zero() {
        let s = EventStream::new(vec![Event::new(0, 0.5)], 2, 50.0).unwrap();
        let bins = discretize(&s, 1.0).unwrap();
        let obj = BatchObjective::new(&bins, &InfluenceKernel::exponential(0.5), DVector::from_element(2, 0.1)).unwrap();
        let fit = batch_fit(&obj, Some(DMatrix::from_element(2, 2, 0.5)), &BatchConfig::default()).unwrap();
        // a single event carries no information about excitation
        assert!(fit.w.amax() < 1e-6, "{}", fit.w);
        let s = EventStream::new(vec![], 2, 50.0).unwrap();
        let bins = discretize(&s, 1.0).unwrap();
        let obj = BatchObjective::new(&bins, &InfluenceKernel::exponential(0.5), DVector::from_element(2, 0.1)).unwrap();
        let fit = batch_fit(&obj, None, &BatchConfig::default()).unwrap();
        assert_eq!(fit.w, DMatrix::zeros(2, 2));
    }

    #[test]
    fn trace_is_monotone_and_kkt_holds() {
        let (bins, w_true, mu) = simulated(4, 2000.0, 0.5);
        let kernel = InfluenceKernel::exp_decay_rate(1.0);
        let obj = BatchObjective::new(&bins, &kernel, mu).unwrap();
        let cfg = BatchConfig { gamma: 1e-3, max_outer: 500, tol: 1e-13, ..Default::default() };
        let fit = batch_fit(&obj, None, &cfg).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
        let (_, g) = obj.eval(&fit.w, true);
        let g = g.unwrap();
        let tol = 1e-5;
        for (wij, gij) in fit.w.iter().zip(g.iter()) {
            if *wij > 0.0 {
                assert!((gij + cfg.gamma).abs() <= tol, "active: {gij}");
            } else {
                assert!(*gij >= -cfg.gamma - tol, "inactive: {gij}");
            }
        }
        let f_fit = fit.trace.last().unwrap();
        let f_true = obj.eval(&w_true, false).0 + cfg.gamma * l1(&w_true);
        assert!(*f_fit <= f_true + 1e-12);
    }

    #[test]
    fn tiny_instance_matches_grid_oracle() {
        let ev = vec![
            Event::new(0, 0.3),
            Event::new(1, 1.2),
            Event::new(0, 1.7),
            Event::new(0, 2.2),
            Event::new(1, 2.4),
            Event::new(1, 3.1),
            Event::new(0, 4.4),
            Event::new(0, 4.6),
            Event::new(1, 5.8),
            Event::new(0, 7.9),
            Event::new(1, 8.3),
            Event::new(0, 8.5),
        ];
        let s = EventStream::new(ev, 2, 10.0).unwrap();
        let bins = discretize(&s, 1.0).unwrap();
        assert_eq!(bins.n_bins(), 10);
        let kernel = InfluenceKernel::exponential(0.5);
        let mu = DVector::from_vec(vec![0.3, 0.2]);
        let obj = BatchObjective::new(&bins, &kernel, mu).unwrap();
        let cfg = BatchConfig { gamma: 0.0, max_outer: 2000, tol: 1e-15, ..Default::default() };
        let fit = batch_fit(&obj, None, &cfg).unwrap();

        // coarse grid, then small fixed-step projected gradient polish
        let grid: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let mut best = (f64::INFINITY, DMatrix::zeros(2, 2));
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    for &d in &grid {
                        let w = DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
                        let f = obj.eval(&w, false).0;
                        if f < best.0 {
                            best = (f, w);
                        }
                    }
                }
            }
        }
        let mut w = best.1;
        for _ in 0..200_000 {
            let g = obj.eval(&w, true).1.unwrap();
            w = (&w - 0.01 * g).map(|v| v.max(0.0));
        }
        assert!((&fit.w - &w).amax() < 1e-4, "{} vs {}", fit.w, w);
    }

    #[test]
    fn loss_of_zero_and_truth() {
        let (bins, w_true, mu) = simulated(5, 500.0, 0.5);
        let kernel = InfluenceKernel::exp_decay_rate(1.0);
        let zero = batch_loss_of(&DMatrix::zeros(2, 2), &bins, &kernel, &mu).unwrap();
        let mut want = 0.0;
        for t in 1..=bins.n_bins() {
            let x = bins.counts(t);
            for k in 0..2 {
                want += 0.5 * mu[k] - x[k] * mu[k].ln();
            }
        }
        assert!((zero - want).abs() < 1e-9 * want.abs());
        let truth = batch_loss_of(&w_true, &bins, &kernel, &mu).unwrap();
        assert!(truth < zero);
    }
}
