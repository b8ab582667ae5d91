//! Influence functions `h(τ)` and the per-bin affine dynamics they induce.
//!
//! For every kernel the discretized rate obeys
//! `λ_{t+1} = A_t λ_t + W y_t + c_t` with diagonal `A_t` and
//! `c_t = (I - A_t) μ̄`. Exponential and delayed-exponential kernels give
//! `A_t = α^δ I`, constant in time and independent of `W`; rectangular and
//! tabulated kernels need a window of recent events and produce a
//! `W`-dependent `A_t`.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::events::Event;

/// Piecewise-linear influence function on a user grid starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedKernel {
    taus: Vec<f64>,
    values: Vec<f64>,
    // suffix_max[i] = max(values[i..])
    suffix_max: Vec<f64>,
    // cumulative integral at each grid point
    cumulative: Vec<f64>,
}

impl TabulatedKernel {
    /// Grid must start at `τ = 0`, be strictly increasing, and carry strictly
    /// positive values except possibly the last point. The support is
    /// `(0, B]` with `B` the last grid point.
    pub fn new(taus: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if taus.len() != values.len() || taus.len() < 2 {
            return Err(Error::config("tabulated kernel needs >= 2 (tau, h) pairs"));
        }
        if taus[0] != 0.0 {
            return Err(Error::config("tabulated kernel grid must start at tau = 0"));
        }
        if taus.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("tabulated kernel grid must be strictly increasing"));
        }
        let n = values.len();
        if values[..n - 1].iter().any(|&v| !(v > 0.0)) || !(values[n - 1] >= 0.0) {
            return Err(Error::config(
                "tabulated kernel values must be positive on the support (last point may be 0)",
            ));
        }
        let mut suffix_max = values.clone();
        for i in (0..n - 1).rev() {
            suffix_max[i] = suffix_max[i].max(suffix_max[i + 1]);
        }
        let mut cumulative = vec![0.0; n];
        for i in 1..n {
            cumulative[i] = cumulative[i - 1] + 0.5 * (values[i] + values[i - 1]) * (taus[i] - taus[i - 1]);
        }
        Ok(Self { taus, values, suffix_max, cumulative })
    }

    /// Read a `tau,h` CSV (header optional).
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut taus = Vec::new();
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (a, b) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Parse { line: i + 1, msg: "expected `tau,h`".into() }),
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(t), Ok(h)) => {
                    taus.push(t);
                    values.push(h);
                }
                _ if taus.is_empty() && i == 0 => continue,
                _ => return Err(Error::Parse { line: i + 1, msg: format!("bad row `{line}`") }),
            }
        }
        Self::new(taus, values)
    }

    pub fn support(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    fn segment(&self, tau: f64) -> usize {
        // index i with taus[i] <= tau < taus[i+1]
        self.taus.partition_point(|&s| s <= tau).saturating_sub(1).min(self.taus.len() - 2)
    }

    fn value(&self, tau: f64) -> f64 {
        if tau <= 0.0 || tau > self.support() {
            return 0.0;
        }
        let i = self.segment(tau);
        let (t0, t1) = (self.taus[i], self.taus[i + 1]);
        let w = (tau - t0) / (t1 - t0);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    fn envelope(&self, tau: f64) -> f64 {
        if tau > self.support() {
            return 0.0;
        }
        let tau = tau.max(0.0);
        let i = self.segment(tau);
        self.value(tau.max(f64::MIN_POSITIVE)).max(self.suffix_max[(i + 1).min(self.taus.len() - 1)])
    }

    fn integral(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let b = self.support();
        if s >= b {
            return *self.cumulative.last().unwrap();
        }
        let i = self.segment(s);
        let v = self.value(s.max(f64::MIN_POSITIVE));
        self.cumulative[i] + 0.5 * (self.values[i] + v) * (s - self.taus[i])
    }

    fn is_non_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Causal influence function `h(τ)`, zero for `τ <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InfluenceKernel {
    /// `h(τ) = α^τ` for `τ > 0`.
    Exponential { alpha: f64 },
    /// `h(τ) = α^(τ - D)` for `τ > D`.
    DelayedExponential { alpha: f64, delay: f64 },
    /// `h(τ) = 1` for `0 < τ < B`.
    Rectangular { width: f64 },
    Tabulated(TabulatedKernel),
}

impl InfluenceKernel {
    pub fn exponential(alpha: f64) -> Self {
        InfluenceKernel::Exponential { alpha }
    }

    /// Exponential kernel `e^{-τ/scale}` expressed through its per-unit decay.
    pub fn exp_decay_rate(rate: f64) -> Self {
        InfluenceKernel::Exponential { alpha: (-rate).exp() }
    }

    /// Parse `exponential alpha=0.5`, `delayed_exponential alpha=0.5 D=1`,
    /// `rectangular B=5` or `tabulated grid=path.csv`. A bare number after
    /// the variant name is taken as the first parameter.
    pub fn parse(spec: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut parts = spec.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::config("empty kernel spec"))?;
        let mut named: Vec<(String, String)> = Vec::new();
        for (i, p) in parts.enumerate() {
            let (k, v) = match p.split_once('=') {
                Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
                None => (format!("#{i}"), p.to_string()),
            };
            named.push((k, v));
        }
        let get = |keys: &[&str], pos: usize| -> Option<&str> {
            named
                .iter()
                .find(|(k, _)| keys.contains(&k.as_str()) || *k == format!("#{pos}"))
                .map(|(_, v)| v.as_str())
        };
        let num = |keys: &[&str], pos: usize| -> Result<f64> {
            let raw = get(keys, pos)
                .ok_or_else(|| Error::config(format!("kernel `{name}` missing `{}`", keys[0])))?;
            raw.parse::<f64>()
                .map_err(|_| Error::config(format!("kernel parameter `{}` not a number: `{raw}`", keys[0])))
        };
        let kernel = match name {
            "exponential" | "exp" => InfluenceKernel::Exponential { alpha: num(&["alpha"], 0)? },
            "delayed_exponential" | "delayed" => InfluenceKernel::DelayedExponential {
                alpha: num(&["alpha"], 0)?,
                delay: num(&["D", "delay", "d"], 1)?,
            },
            "rectangular" | "rect" => InfluenceKernel::Rectangular { width: num(&["B", "width", "b"], 0)? },
            "tabulated" => {
                let path = get(&["grid", "file"], 0).ok_or_else(|| Error::config("tabulated kernel needs grid=<file>"))?;
                let mut pb = std::path::PathBuf::from(path);
                if pb.is_relative() {
                    if let Some(base) = base_dir {
                        pb = base.join(pb);
                    }
                }
                InfluenceKernel::Tabulated(TabulatedKernel::from_csv(&pb)?)
            }
            other => return Err(Error::config(format!("unknown kernel `{other}`"))),
        };
        kernel.validate_shape()?;
        Ok(kernel)
    }

    fn validate_shape(&self) -> Result<()> {
        match *self {
            InfluenceKernel::Exponential { alpha } | InfluenceKernel::DelayedExponential { alpha, .. }
                if !(alpha > 0.0 && alpha < 1.0) =>
            {
                Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")))
            }
            InfluenceKernel::DelayedExponential { delay, .. } if !(delay > 0.0) => {
                Err(Error::config(format!("delay must be positive, got {delay}")))
            }
            InfluenceKernel::Rectangular { width } if !(width > 0.0) => {
                Err(Error::config(format!("rectangular width must be positive, got {width}")))
            }
            _ => Ok(()),
        }
    }

    /// Check the constraints that depend on the bin width.
    pub fn validate(&self, delta: f64) -> Result<()> {
        self.validate_shape()?;
        match *self {
            InfluenceKernel::DelayedExponential { delay, .. } if delay < delta * (1.0 - 1e-12) => {
                Err(Error::config(format!("delay D = {delay} must be >= delta = {delta}")))
            }
            InfluenceKernel::Rectangular { width } if width <= delta => {
                Err(Error::config(format!("rectangular width B = {width} must exceed delta = {delta}")))
            }
            _ => Ok(()),
        }
    }

    /// `h(τ)`.
    pub fn value(&self, tau: f64) -> f64 {
        match self {
            InfluenceKernel::Exponential { alpha } => {
                if tau > 0.0 {
                    alpha.powf(tau)
                } else {
                    0.0
                }
            }
            InfluenceKernel::DelayedExponential { alpha, delay } => {
                if tau > *delay {
                    alpha.powf(tau - delay)
                } else {
                    0.0
                }
            }
            InfluenceKernel::Rectangular { width } => {
                if tau > 0.0 && tau < *width {
                    1.0
                } else {
                    0.0
                }
            }
            InfluenceKernel::Tabulated(t) => t.value(tau),
        }
    }

    /// `sup_{s >= τ} h(s)`: an upper bound on the kernel from `τ` onward.
    pub fn envelope(&self, tau: f64) -> f64 {
        match self {
            InfluenceKernel::Exponential { alpha } => alpha.powf(tau.max(0.0)),
            InfluenceKernel::DelayedExponential { alpha, delay } => alpha.powf((tau - delay).max(0.0)),
            InfluenceKernel::Rectangular { width } => {
                if tau < *width {
                    1.0
                } else {
                    0.0
                }
            }
            InfluenceKernel::Tabulated(t) => t.envelope(tau),
        }
    }

    /// `∫_0^s h(u) du`.
    pub fn integral(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            InfluenceKernel::Exponential { alpha } => (alpha.powf(s) - 1.0) / alpha.ln(),
            InfluenceKernel::DelayedExponential { alpha, delay } => {
                if s <= *delay {
                    0.0
                } else {
                    (alpha.powf(s - delay) - 1.0) / alpha.ln()
                }
            }
            InfluenceKernel::Rectangular { width } => s.min(*width),
            InfluenceKernel::Tabulated(t) => t.integral(s),
        }
    }

    /// `∫_0^∞ h`, the branching factor of a unit weight.
    pub fn total_mass(&self) -> f64 {
        match self {
            InfluenceKernel::Exponential { alpha } | InfluenceKernel::DelayedExponential { alpha, .. } => {
                -1.0 / alpha.ln()
            }
            InfluenceKernel::Rectangular { width } => *width,
            InfluenceKernel::Tabulated(t) => *t.cumulative.last().unwrap(),
        }
    }

    /// Right end of the support, if finite.
    pub fn support(&self) -> Option<f64> {
        match self {
            InfluenceKernel::Rectangular { width } => Some(*width),
            InfluenceKernel::Tabulated(t) => Some(t.support()),
            _ => None,
        }
    }

    /// Whether `A_t` is `α^δ I` for every `t` and every `W`.
    pub fn has_constant_decay(&self) -> bool {
        matches!(
            self,
            InfluenceKernel::Exponential { .. } | InfluenceKernel::DelayedExponential { .. }
        )
    }

    /// `α^δ` for the exponential family.
    pub fn decay_per_bin(&self, delta: f64) -> Option<f64> {
        match self {
            InfluenceKernel::Exponential { alpha } | InfluenceKernel::DelayedExponential { alpha, .. } => {
                Some(alpha.powf(delta))
            }
            _ => None,
        }
    }

    /// Non-increasing on its support; guarantees every `A_{t,k} <= 1`.
    pub fn is_non_increasing(&self) -> bool {
        match self {
            InfluenceKernel::Tabulated(t) => t.is_non_increasing(),
            _ => true,
        }
    }

    /// Value of `A_{t,k}` when no past event influences actor `k`.
    fn empty_ratio(&self) -> f64 {
        match self {
            InfluenceKernel::Rectangular { .. } => 1.0,
            InfluenceKernel::Tabulated(_) => 0.5,
            _ => unreachable!("constant-decay kernels never form the ratio"),
        }
    }
}

/// The affine map `Φ_t(λ, W) = A_t λ + W y_t + c_t` for one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsStep {
    /// Diagonal of `A_t`.
    pub a: DVector<f64>,
    pub y: DVector<f64>,
    pub c: DVector<f64>,
}

impl DynamicsStep {
    pub fn zeros(p: usize) -> Self {
        Self { a: DVector::zeros(p), y: DVector::zeros(p), c: DVector::zeros(p) }
    }

    /// `A_t λ + W y_t + c_t`, without any clamping.
    pub fn apply(&self, lambda: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
        let p = self.a.len();
        check_dim(p, lambda.len())?;
        check_dim(p, w.nrows())?;
        check_dim(p, w.ncols())?;
        let mut out = DVector::zeros(p);
        self.apply_into(lambda, w, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_into(&self, lambda: &DVector<f64>, w: &DMatrix<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.c);
        // y_t is nonzero only for actors active in the bin
        for (j, &yj) in self.y.iter().enumerate() {
            if yj != 0.0 {
                out.axpy(yj, &w.column(j), 1.0);
            }
        }
        for k in 0..out.len() {
            out[k] += self.a[k] * lambda[k];
        }
    }
}

/// `y_t = Σ_{bin t} e_{k_n} h(δ(t+1) - τ_n)` for non-delayed kernels.
pub fn emit_y(kernel: &InfluenceKernel, bin_events: &[Event], t: usize, delta: f64, p: usize) -> DVector<f64> {
    let mut y = DVector::zeros(p);
    let next_edge = delta * (t + 1) as f64;
    for e in bin_events {
        y[e.actor] += kernel.value(next_edge - e.time);
    }
    y
}

/// Delayed-exponential `y'_t`: events with `δt - D <= τ_n < δ(t+1) - D`,
/// weighted by `α^(δ(t+1) - τ_n - D)`.
pub fn emit_y_delayed(alpha: f64, delay: f64, events: &[Event], t: usize, delta: f64, p: usize) -> DVector<f64> {
    let mut y = DVector::zeros(p);
    let lo = delta * t as f64 - delay;
    let hi = delta * (t + 1) as f64 - delay;
    for e in events {
        if e.time >= lo && e.time < hi {
            y[e.actor] += alpha.powf(hi - e.time);
        }
    }
    y
}

/// Diagonal of `A_t` from the events of bins before `t` (`history`).
///
/// Exponential kernels return `α^δ` everywhere. Otherwise
/// `A_{t,k} = Σ_n a_{t,n} W_{k,k_n} h(δt-τ_n) / Σ_n W_{k,k_n} h(δt-τ_n)`
/// with `a_{t,n} = h(δ(t+1)-τ_n)/h(δt-τ_n)` (1 when the denominator
/// vanishes); an empty denominator gives 1 for rectangular kernels and
/// 1/2 for tabulated ones.
pub fn emit_a(kernel: &InfluenceKernel, history: &[Event], w: &DMatrix<f64>, t: usize, delta: f64) -> DVector<f64> {
    let p = w.nrows();
    if let Some(ad) = kernel.decay_per_bin(delta) {
        return DVector::from_element(p, ad);
    }
    let mut cur = DVector::zeros(p);
    let mut next = DVector::zeros(p);
    let edge = delta * t as f64;
    for e in history {
        let hd = kernel.value(edge - e.time);
        if hd == 0.0 {
            continue;
        }
        let a = kernel.value(edge + delta - e.time) / hd;
        cur[e.actor] += hd;
        next[e.actor] += a * hd;
    }
    let den = w * &cur;
    let num = w * &next;
    let empty = kernel.empty_ratio();
    DVector::from_fn(p, |k, _| if den[k] > 0.0 { num[k] / den[k] } else { empty })
}

/// Streaming emitter of [`DynamicsStep`]s, one per bin, in bin order.
///
/// Owns the window of past events that windowed kernels need; memory is
/// bounded by the number of events inside the kernel support.
#[derive(Debug, Clone)]
pub struct KernelDynamics {
    kernel: InfluenceKernel,
    delta: f64,
    mu_bar: DVector<f64>,
    t: usize,
    window: VecDeque<Event>,
    scratch_cur: DVector<f64>,
    scratch_next: DVector<f64>,
    step: DynamicsStep,
}

impl KernelDynamics {
    pub fn new(kernel: InfluenceKernel, delta: f64, mu_bar: DVector<f64>) -> Result<Self> {
        kernel.validate(delta)?;
        let p = mu_bar.len();
        let mut step = DynamicsStep::zeros(p);
        if let Some(ad) = kernel.decay_per_bin(delta) {
            step.a.fill(ad);
            step.c = &mu_bar * (1.0 - ad);
        }
        Ok(Self {
            kernel,
            delta,
            mu_bar,
            t: 0,
            window: VecDeque::new(),
            scratch_cur: DVector::zeros(p),
            scratch_next: DVector::zeros(p),
            step,
        })
    }

    pub fn kernel(&self) -> &InfluenceKernel {
        &self.kernel
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mu_bar(&self) -> &DVector<f64> {
        &self.mu_bar
    }

    /// Index of the last emitted bin (0 before the first call).
    pub fn t(&self) -> usize {
        self.t
    }

    /// Whether Lemma-style contractivity (`A_t ∈ [0,1]`) is guaranteed.
    pub fn contractive(&self) -> bool {
        self.kernel.is_non_increasing()
    }

    /// Events currently retained for windowed kernels.
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// [`KernelDynamics::advance`] for kernels whose `A_t` does not depend
    /// on `W`.
    pub fn advance_constant(&mut self, bin_events: &[Event]) -> Result<&DynamicsStep> {
        if !self.kernel.has_constant_decay() {
            return Err(Error::Unsupported(format!(
                "kernel {:?} gives W-dependent dynamics; only exponential kernels are supported here",
                self.kernel
            )));
        }
        Ok(self.advance(bin_events, &DMatrix::zeros(0, 0)))
    }

    /// Emit the dynamics of the next bin `t`, given that bin's events.
    pub fn advance(&mut self, bin_events: &[Event], w: &DMatrix<f64>) -> &DynamicsStep {
        self.t += 1;
        let t = self.t;
        let delta = self.delta;
        let next_edge = delta * (t + 1) as f64;
        match self.kernel {
            InfluenceKernel::Exponential { alpha } => {
                self.step.y.fill(0.0);
                for e in bin_events {
                    self.step.y[e.actor] += alpha.powf(next_edge - e.time);
                }
            }
            InfluenceKernel::DelayedExponential { alpha, delay } => {
                self.window.extend(bin_events.iter().copied());
                self.step.y.fill(0.0);
                let hi = next_edge - delay;
                while let Some(e) = self.window.front() {
                    if e.time < hi {
                        self.step.y[e.actor] += alpha.powf(hi - e.time);
                        self.window.pop_front();
                    } else {
                        break;
                    }
                }
            }
            InfluenceKernel::Rectangular { .. } | InfluenceKernel::Tabulated(_) => {
                let edge = delta * t as f64;
                let support = self.kernel.support().unwrap();
                while let Some(e) = self.window.front() {
                    if edge - e.time > support {
                        self.window.pop_front();
                    } else {
                        break;
                    }
                }
                self.scratch_cur.fill(0.0);
                self.scratch_next.fill(0.0);
                for e in &self.window {
                    let hd = self.kernel.value(edge - e.time);
                    if hd == 0.0 {
                        continue;
                    }
                    let a = self.kernel.value(next_edge - e.time) / hd;
                    self.scratch_cur[e.actor] += hd;
                    self.scratch_next[e.actor] += a * hd;
                }
                let empty = self.kernel.empty_ratio();
                let p = self.mu_bar.len();
                for k in 0..p {
                    let row = w.row(k);
                    let den = row.dot(&self.scratch_cur.transpose());
                    let num = row.dot(&self.scratch_next.transpose());
                    let a = if den > 0.0 { num / den } else { empty };
                    self.step.a[k] = a;
                    self.step.c[k] = (1.0 - a) * self.mu_bar[k];
                }
                self.step.y.fill(0.0);
                for e in bin_events {
                    self.step.y[e.actor] += self.kernel.value(next_edge - e.time);
                }
                self.window.extend(bin_events.iter().copied());
            }
        }
        &self.step
    }
}

/// Discretized rate `λ_t` by direct summation over the whole history:
/// `λ_{t,k} = μ̄_k + Σ_{τ̄_n < δt} W_{k,k_n} h(δt - τ_n)`.
pub fn exact_rate(
    kernel: &InfluenceKernel,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
    events: &[Event],
    t: usize,
    delta: f64,
) -> DVector<f64> {
    let mut lam = mu_bar.clone();
    let edge = delta * t as f64;
    for e in events {
        if crate::events::bin_index(e.time, delta) >= t {
            continue;
        }
        let h = kernel.value(edge - e.time);
        if h != 0.0 {
            lam.axpy(h, &w.column(e.actor), 1.0);
        }
    }
    lam
}
