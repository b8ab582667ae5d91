//! Euclidean projections onto the feasible sets for `W`.
//!
//! Every set is intersected with the nonnegative orthant.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Convex constraint family for the influence matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum FeasibleSet {
    /// `{W ⪰ 0 : Σ|W_ij| <= c}`.
    L1Ball(f64),
    /// `{W ⪰ 0 : ‖W‖_* <= c}`.
    NuclearBall(f64),
    /// Entries where `mask` is false are pinned at 0, the rest clamped to `[0, w_max]`.
    FixedSupport { mask: DMatrix<bool>, w_max: f64 },
    /// `{0 <= W_ij <= w_max}`.
    Box(f64),
}

impl Default for FeasibleSet {
    fn default() -> Self {
        FeasibleSet::Box(f64::INFINITY)
    }
}

impl FeasibleSet {
    /// Parse `l1:c`, `nuclear:c`, `box:wmax`, `nonneg` or `support:file`
    /// (a dense 0/1 CSV, optionally followed by `:wmax`).
    pub fn parse(spec: &str, base_dir: Option<&Path>) -> Result<Self> {
        let spec = spec.trim();
        if spec == "nonneg" || spec == "box" {
            return Ok(FeasibleSet::default());
        }
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| Error::config(format!("feasible set `{spec}` should look like kind:value")))?;
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("feasible set bound `{s}` is not a number")))?;
            if v < 0.0 || v.is_nan() {
                return Err(Error::config(format!("feasible set bound must be nonnegative, got {v}")));
            }
            Ok(v)
        };
        match kind.trim() {
            "l1" => Ok(FeasibleSet::L1Ball(num(arg)?)),
            "nuclear" => Ok(FeasibleSet::NuclearBall(num(arg)?)),
            "box" => Ok(FeasibleSet::Box(num(arg)?)),
            "support" => {
                let (file, w_max) = match arg.rsplit_once(':') {
                    Some((f, w)) if w.trim().parse::<f64>().is_ok() => (f, num(w)?),
                    _ => (arg, f64::INFINITY),
                };
                let mut path = std::path::PathBuf::from(file.trim());
                if path.is_relative() {
                    if let Some(b) = base_dir {
                        path = b.join(path);
                    }
                }
                let m = crate::io::read_matrix(&path)?;
                Ok(FeasibleSet::FixedSupport { mask: m.map(|v| v != 0.0), w_max })
            }
            other => Err(Error::config(format!("unknown feasible set `{other}`"))),
        }
    }

    pub fn project(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeasibleSet::L1Ball(c) => project_l1_nonneg(w, *c),
            FeasibleSet::NuclearBall(c) => project_nuclear_nonneg(w, *c, &NuclearOptions::default()),
            FeasibleSet::FixedSupport { mask, w_max } => project_support(w, mask, 0.0, *w_max),
            FeasibleSet::Box(w_max) => Ok(project_box(w, 0.0, *w_max)),
        }
    }

    /// Membership up to `tol`.
    pub fn contains(&self, w: &DMatrix<f64>, tol: f64) -> bool {
        if w.iter().any(|&v| v < -tol) {
            return false;
        }
        match self {
            FeasibleSet::L1Ball(c) => w.iter().map(|v| v.abs()).sum::<f64>() <= c + tol,
            FeasibleSet::NuclearBall(c) => nuclear_norm(w) <= c + tol,
            FeasibleSet::FixedSupport { mask, w_max } => {
                mask.shape() == w.shape()
                    && w.iter().zip(mask.iter()).all(|(&v, &m)| if m { v <= w_max + tol } else { v.abs() <= tol })
            }
            FeasibleSet::Box(w_max) => w.iter().all(|&v| v <= w_max + tol),
        }
    }

    /// Whether projecting acts entry by entry (so it commutes with
    /// restricting to a sub-block).
    pub fn is_separable(&self) -> bool {
        matches!(self, FeasibleSet::Box(_) | FeasibleSet::FixedSupport { .. })
    }
}

/// Elementwise clamp to `[lo, hi]`.
pub fn project_box(w: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    w.map(|v| v.clamp(lo, hi))
}

pub fn project_box_vec(v: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    v.map(|x| x.clamp(lo, hi))
}

/// Projection of a vector onto `{x ⪰ 0 : Σx <= c}` (sort-based threshold).
pub fn project_simplex_nonneg(v: &[f64], c: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= c {
        return clipped;
    }
    let mut sorted = clipped.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = sorted[0] - c;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let cand = (cumsum - c) / (i + 1) as f64;
        if u - cand > 0.0 {
            theta = cand;
        } else {
            break;
        }
    }
    clipped.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projection onto `{W ⪰ 0 : ‖W‖₁ <= c}`.
pub fn project_l1_nonneg(w: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
    if !(c >= 0.0) {
        return Err(Error::config(format!("l1 radius must be nonnegative, got {c}")));
    }
    let out = project_simplex_nonneg(w.as_slice(), c);
    Ok(DMatrix::from_vec(w.nrows(), w.ncols(), out))
}

/// Zero the entries outside `mask`, clamp the rest to `[lo, hi]`.
pub fn project_support(w: &DMatrix<f64>, mask: &DMatrix<bool>, lo: f64, hi: f64) -> Result<DMatrix<f64>> {
    check_dim(w.nrows(), mask.nrows())?;
    check_dim(w.ncols(), mask.ncols())?;
    Ok(w.zip_map(mask, |v, m| if m { v.clamp(lo, hi) } else { 0.0 }))
}

pub fn nuclear_norm(w: &DMatrix<f64>) -> f64 {
    w.clone().svd(false, false).singular_values.sum()
}

/// Projection onto the nuclear-norm ball alone (no sign constraint).
pub fn project_nuclear_ball(w: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
    let svd = w.clone().svd(true, true);
    let s = &svd.singular_values;
    if s.sum() <= c {
        return Ok(w.clone());
    }
    let shrunk = project_simplex_nonneg(s.as_slice(), c);
    let u = svd.u.as_ref().ok_or_else(|| Error::numerical("SVD did not return U"))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::numerical("SVD did not return V^T"))?;
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    for (i, &si) in shrunk.iter().enumerate() {
        if si > 0.0 {
            out += si * u.column(i) * vt.row(i);
        }
    }
    Ok(out)
}

/// Stopping rule for the iterative nuclear-ball projection.
#[derive(Debug, Clone, Copy)]
pub struct NuclearOptions {
    pub max_iter: usize,
    /// Largest multiplier change and orthant violation accepted at exit.
    pub tol: f64,
}

impl Default for NuclearOptions {
    fn default() -> Self {
        Self { max_iter: 2000, tol: 1e-10 }
    }
}

/// Projection onto `{W ⪰ 0 : ‖W‖_* <= c}`.
///
/// Solves the dual over the orthant multiplier `Z ⪰ 0`, where
/// `X(Z) = P_*(W + Z)` and the dual gradient `-X(Z)` is 1-Lipschitz, with
/// accelerated projected gradient and adaptive restart.
/// The returned matrix is always feasible: the last iterate is clipped to
/// the orthant and, if that nudged the nuclear norm above `c`, rescaled.
pub fn project_nuclear_nonneg(w: &DMatrix<f64>, c: f64, opts: &NuclearOptions) -> Result<DMatrix<f64>> {
    if !(c >= 0.0) {
        return Err(Error::config(format!("nuclear radius must be nonnegative, got {c}")));
    }
    let clipped = w.map(|v| v.max(0.0));
    if nuclear_norm(&clipped) <= c {
        // the orthant projection already lies in the ball
        return Ok(clipped);
    }
    let mut z = DMatrix::zeros(w.nrows(), w.ncols());
    let mut y = z.clone();
    let mut theta = 1.0f64;
    for _ in 0..opts.max_iter {
        let x = project_nuclear_ball(&(w + &y), c)?;
        let z_new = (&y - &x).map(|v| v.max(0.0));
        let step = &z_new - &z;
        let violation = x.iter().fold(0.0f64, |m, &v| m.max(-v));
        if step.amax() <= opts.tol && violation <= opts.tol {
            z = z_new;
            break;
        }
        let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if (&y - &z_new).dot(&step) > 0.0 {
            // momentum points uphill: restart
            theta = 1.0;
            y = z_new.clone();
        } else {
            y = &z_new + &step * ((theta - 1.0) / theta_new);
            theta = theta_new;
        }
        z = z_new;
    }
    let x = project_nuclear_ball(&(w + &z), c)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("nuclear projection produced non-finite entries"));
    }
    let mut out = x.map(|v| v.max(0.0));
    let nn = nuclear_norm(&out);
    if nn > c {
        out *= c / nn;
    }
    Ok(out)
}
