//! Metrics for comparing estimators: regret and variation, percentile
//! bands over trials, ROC curves for edge recovery, step-size tuning, and
//! aggregation of a replication run directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::events::BinnedCounts;
use crate::kernels::{InfluenceKernel, KernelDynamics};
use crate::loss::instantaneous_loss;

/// Cumulative `Σ_{s<=t} ℓ_s(learner) - ℓ_s(comparator)`.
pub fn regret_curve(learner_losses: &[f64], comparator_losses: &[f64]) -> Result<Vec<f64>> {
    check_dim(comparator_losses.len(), learner_losses.len())?;
    let mut acc = 0.0;
    Ok(learner_losses
        .iter()
        .zip(comparator_losses)
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect())
}

/// Per-bin losses of a rate sequence (`rates[t-1] = λ_t`).
pub fn losses_of(rates: &[DVector<f64>], bins: &BinnedCounts) -> Result<Vec<f64>> {
    check_dim(bins.n_bins(), rates.len())?;
    rates
        .iter()
        .enumerate()
        .map(|(i, r)| instantaneous_loss(r, &bins.counts(i + 1), bins.delta()))
        .collect()
}

/// `Σ_t ‖λ_{t+1} - Φ_t(λ_t, W)‖₂` for a comparator sequence.
pub fn variation_term(
    rates: &[DVector<f64>],
    bins: &BinnedCounts,
    kernel: &InfluenceKernel,
    w: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
) -> Result<f64> {
    check_dim(bins.n_bins(), rates.len())?;
    let mut dynm = KernelDynamics::new(kernel.clone(), bins.delta(), mu_bar.clone())?;
    let mut total = 0.0;
    for t in 1..rates.len() {
        let step = dynm.advance(bins.bin_events(t), w);
        let pred = step.apply(&rates[t - 1], w)?;
        total += (&rates[t] - pred).norm();
    }
    Ok(total)
}

/// Percentile `q ∈ [0, 100]` by linear interpolation between order
/// statistics (position `(n-1)q/100`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::data("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::config(format!("percentile {q} outside [0, 100]")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (s.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

pub const BAND_PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Percentile bands across trials at each index; curves must share a length.
pub fn paired_percentiles(curves: &[Vec<f64>], qs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = curves.first() else {
        return Err(Error::data("no trials to summarize"));
    };
    let n = first.len();
    for c in curves {
        check_dim(n, c.len())?;
    }
    let mut col = vec![0.0; curves.len()];
    (0..n)
        .map(|t| {
            for (i, c) in curves.iter().enumerate() {
                col[i] = c[t];
            }
            qs.iter().map(|&q| percentile(&col, q)).collect()
        })
        .collect()
}

/// Which entries of the true matrix count as edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RocMode {
    /// `|W_ij| > 1e-6`, diagonal included.
    Full,
    /// The largest 10% of entries by magnitude.
    Top10,
}

pub const EDGE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
    pub mode: RocMode,
}

fn edge_labels(w_true: &DMatrix<f64>, mode: RocMode) -> Vec<bool> {
    match mode {
        RocMode::Full => w_true.iter().map(|v| v.abs() > EDGE_FLOOR).collect(),
        RocMode::Top10 => {
            let n = w_true.len();
            let k = ((n as f64) * 0.1).ceil() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| w_true[b].abs().total_cmp(&w_true[a].abs()).then(a.cmp(&b)));
            let mut labels = vec![false; n];
            for &i in &idx[..k.min(n)] {
                labels[i] = true;
            }
            labels
        }
    }
}

/// Sweep a threshold over the scores; entries at or above it are declared
/// edges. AUC is the Mann–Whitney statistic with ties counted as 1/2.
pub fn roc(w_hat: &DMatrix<f64>, w_true: &DMatrix<f64>, mode: RocMode) -> Result<RocCurve> {
    check_dim(w_true.nrows(), w_hat.nrows())?;
    check_dim(w_true.ncols(), w_hat.ncols())?;
    let labels = edge_labels(w_true, mode);
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("ROC needs both edges and non-edges in the true matrix"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| w_hat[b].total_cmp(&w_hat[a]));
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = w_hat[order[i]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < order.len() && w_hat[order[i]] == score {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // negatives in this group rank below all earlier positives and tie with gp
        auc += gn as f64 * (tp as f64 + 0.5 * gp as f64);
        tp += gp;
        fp += gn;
        thresholds.push(score);
        tpr.push(tp as f64 / n_pos as f64);
        fpr.push(fp as f64 / n_neg as f64);
    }
    Ok(RocCurve { thresholds, tpr, fpr, auc: auc / (n_pos * n_neg) as f64, mode })
}

/// Entries above `threshold`, split into (above the diagonal, below the
/// diagonal) after reordering actors by `ordering` (`ordering[i]` is the
/// actor placed at position `i`).
pub fn significance_count(w_hat: &DMatrix<f64>, threshold: f64, ordering: &[usize]) -> Result<(usize, usize)> {
    let p = w_hat.nrows();
    check_dim(p, w_hat.ncols())?;
    check_dim(p, ordering.len())?;
    let mut pos = vec![usize::MAX; p];
    for (i, &a) in ordering.iter().enumerate() {
        if a >= p || pos[a] != usize::MAX {
            return Err(Error::data("ordering is not a permutation of the actors"));
        }
        pos[a] = i;
    }
    let (mut above, mut below) = (0, 0);
    for i in 0..p {
        for j in 0..p {
            if w_hat[(i, j)] > threshold {
                match pos[i].cmp(&pos[j]) {
                    std::cmp::Ordering::Less => above += 1,
                    std::cmp::Ordering::Greater => below += 1,
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
    }
    Ok((above, below))
}

/// Grid search of a step-size constant on the first `fraction` of the bins:
/// `score(prefix, candidate)` returns the accumulated loss on the prefix.
/// Ties go to the earlier candidate.
pub fn tune_step_size<F>(bins: &BinnedCounts, candidates: &[f64], fraction: f64, mut score: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&BinnedCounts, f64) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::config("no step-size candidates"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("tuning fraction {fraction} outside (0, 1]")));
    }
    let n = ((bins.n_bins() as f64 * fraction).ceil() as usize).clamp(1, bins.n_bins().max(1));
    let prefix = bins.prefix(n);
    let scores = candidates.iter().map(|&c| score(&prefix, c)).collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s < &scores[best] {
            best = i;
        }
    }
    Ok((candidates[best], scores))
}

/// A method scored against a reference method on the same trials.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Comparison {
    pub method: String,
    pub reference: String,
}

/// Record of a replication run directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub profile: String,
    pub version: String,
    pub seed_base: u64,
    pub scale: f64,
    pub methods: Vec<String>,
    pub comparisons: Vec<Comparison>,
    pub config: BTreeMap<String, String>,
    pub trials: Vec<TrialRecord>,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Final cumulative loss per method.
    pub cumulative: BTreeMap<String, f64>,
    /// Last moving-average loss per method.
    pub final_moving_average: BTreeMap<String, f64>,
    /// Wall-clock seconds per method.
    pub seconds: BTreeMap<String, f64>,
    /// Step-size constants chosen by tuning.
    pub tuned: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Per-bin loss columns of a `t,instantaneous,cumulative,moving_avg` file.
#[derive(Debug, Clone, Default)]
pub struct LossColumns {
    pub instantaneous: Vec<f64>,
    pub moving_average: Vec<Option<f64>>,
}

pub fn read_loss_csv(path: &Path) -> Result<LossColumns> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = LossColumns::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse { line: i + 2, msg: format!("bad number `{s}` in {}", path.display()) })
        };
        out.instantaneous.push(parse(&rec[1])?);
        out.moving_average.push(if rec[3].is_empty() { None } else { Some(parse(&rec[3])?) });
    }
    Ok(out)
}

fn stride(n: usize, points: usize) -> usize {
    (n / points.max(1)).max(1)
}

fn sample_indices(n: usize, points: usize) -> Vec<usize> {
    let s = stride(n, points);
    let mut idx: Vec<usize> = (0..n).step_by(s).collect();
    if n > 0 && *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    idx
}

/// Aggregate a replication directory into the summary CSVs.
pub fn aggregate_runs(runs: &Path, out: &Path, points: usize) -> Result<()> {
    let manifest = RunManifest::load(runs)?;
    std::fs::create_dir_all(out)?;
    let ok: Vec<&TrialRecord> = manifest.trials.iter().filter(|t| t.ok).collect();
    let trial_dir = |t: &TrialRecord| -> PathBuf { runs.join(&t.dir) };

    let mut regret = csv::Writer::from_path(out.join("regret.csv"))?;
    regret.write_record(["trial", "method", "reference", "t", "regret"])?;
    let mut pct = csv::Writer::from_path(out.join("percentiles.csv"))?;
    pct.write_record(["method", "reference", "t", "p5", "p25", "p50", "p75", "p95"])?;
    let mut roc_full = csv::Writer::from_path(out.join("roc_full.csv"))?;
    let mut roc_top = csv::Writer::from_path(out.join("roc_top10.csv"))?;
    for w in [&mut roc_full, &mut roc_top] {
        w.write_record(["trial", "method", "auc", "threshold", "fpr", "tpr"])?;
    }
    let mut batch_out = std::io::BufWriter::new(std::fs::File::create(out.join("batchloss.csv"))?);
    writeln!(batch_out, "trial,method,t,loss")?;

    for Comparison { method, reference } in &manifest.comparisons {
        // moving-average differences (reference - method) per trial
        let mut diffs: Vec<Vec<f64>> = Vec::new();
        let mut n_bins = 0;
        for t in &ok {
            let dir = trial_dir(t);
            let (a, b) = (dir.join(format!("loss_{method}.csv")), dir.join(format!("loss_{reference}.csv")));
            if !a.exists() || !b.exists() {
                continue;
            }
            let la = read_loss_csv(&a)?;
            let lb = read_loss_csv(&b)?;
            let curve = regret_curve(&la.instantaneous, &lb.instantaneous)?;
            n_bins = n_bins.max(curve.len());
            for i in sample_indices(curve.len(), points) {
                regret.write_record([
                    t.index.to_string(),
                    method.clone(),
                    reference.clone(),
                    (i + 1).to_string(),
                    curve[i].to_string(),
                ])?;
            }
            let d: Vec<f64> = la
                .moving_average
                .iter()
                .zip(&lb.moving_average)
                .filter_map(|(x, y)| Some(y.as_ref()? - x.as_ref()?))
                .collect();
            diffs.push(d);
        }
        if !diffs.is_empty() {
            let len = diffs.iter().map(Vec::len).min().unwrap();
            let offset: Vec<usize> = diffs.iter().map(|d| d.len() - len).collect();
            let trimmed: Vec<Vec<f64>> = diffs.iter().zip(&offset).map(|(d, &o)| d[o..].to_vec()).collect();
            if len > 0 {
                let bands = paired_percentiles(&trimmed, &BAND_PERCENTILES)?;
                // curves are right-aligned: the last entry is the final bin
                for i in sample_indices(len, points) {
                    let mut rec = vec![method.clone(), reference.clone(), (n_bins - len + i + 1).to_string()];
                    rec.extend(bands[i].iter().map(|v| v.to_string()));
                    pct.write_record(&rec)?;
                }
            }
        }
    }

    for t in &ok {
        let dir = trial_dir(t);
        let truth = dir.join("W_true.csv");
        if truth.exists() {
            let w_true = crate::io::read_matrix(&truth)?;
            for method in &manifest.methods {
                let path = dir.join(format!("W_{method}.csv"));
                if !path.exists() {
                    continue;
                }
                let w_hat = crate::io::read_matrix(&path)?;
                for (mode, wr) in [(RocMode::Full, &mut roc_full), (RocMode::Top10, &mut roc_top)] {
                    let curve = match roc(&w_hat, &w_true, mode) {
                        Ok(c) => c,
                        Err(_) => continue,
                    };
                    for i in sample_indices(curve.tpr.len(), points) {
                        wr.write_record([
                            t.index.to_string(),
                            method.clone(),
                            curve.auc.to_string(),
                            curve.thresholds[i].to_string(),
                            curve.fpr[i].to_string(),
                            curve.tpr[i].to_string(),
                        ])?;
                    }
                }
            }
        }
        let bl = dir.join("batchloss.csv");
        if bl.exists() {
            let text = std::fs::read_to_string(&bl)?;
            for line in text.lines().skip(1) {
                writeln!(batch_out, "{},{line}", t.index)?;
            }
        }
    }
    regret.flush()?;
    pct.flush()?;
    roc_full.flush()?;
    roc_top.flush()?;
    batch_out.flush()?;
    Ok(())
}
