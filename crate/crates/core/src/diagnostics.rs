//! Per-sample magnitude/margin diagnostics and forward-latency timing.
//!
//! For every evaluated sample we keep the bottleneck magnitude `‖g‖₂`, the gap
//! between the two largest softmax probabilities, and whether each attack
//! guessed its membership right. [`magnitude_margin_table`] bins those records
//! on a magnitude × margin grid, separately for members and non-members, and
//! reports the Pearson correlation between the two axes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, PerAttack};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::{MagnitudeSource, Model, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub probs: Vec<f64>,
    pub label: usize,
    pub is_member: bool,
    /// ℓ2 norm of the bottleneck representation.
    pub magnitude: f64,
    /// Top-1 minus top-2 probability.
    pub margin: f64,
    pub attack_correct: PerAttack<bool>,
}

impl PredictionRecord {
    pub fn new(sample_id: usize, probs: Vec<f64>, label: usize, is_member: bool, magnitude: f64) -> Self {
        let margin = margin(&probs).unwrap_or(0.0);
        PredictionRecord {
            sample_id,
            probs,
            label,
            is_member,
            magnitude,
            margin,
            attack_correct: PerAttack::default(),
        }
    }

    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Difference between the largest and second-largest probability.
pub fn margin(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(LabError::Input("margin needs at least two classes".into()));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}

/// Pearson correlation; `None` when either column is constant or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson over tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub is_member: bool,
    pub magnitude_source: MagnitudeSource,
    /// Attack whose per-sample correctness is averaged in each cell.
    pub attack: AttackKind,
    pub magnitude_edges: Vec<f64>,
    pub margin_edges: Vec<f64>,
    /// Row-major over (magnitude bin, margin bin).
    pub counts: Vec<usize>,
    /// Mean attack correctness per cell, `None` for empty cells.
    pub mean_attack_acc: Vec<Option<f64>>,
    pub pearson: Option<f64>,
    pub warnings: Vec<String>,
}

impl BinTable {
    pub fn bins(&self) -> (usize, usize) {
        (self.magnitude_edges.len() - 1, self.margin_edges.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mag_lo,mag_hi,margin_lo,margin_hi,count,mean_attack_acc\n");
        let (bm, bg) = self.bins();
        for i in 0..bm {
            for j in 0..bg {
                let k = i * bg + j;
                let acc = self.mean_attack_acc[k].map_or(String::new(), |a| format!("{a}"));
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    self.magnitude_edges[i],
                    self.magnitude_edges[i + 1],
                    self.margin_edges[j],
                    self.margin_edges[j + 1],
                    self.counts[k],
                    acc
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTables {
    pub members: BinTable,
    pub nonmembers: BinTable,
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect()
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if bins == 1 || hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor() as isize;
    b.clamp(0, bins as isize - 1) as usize
}

/// Bins records on magnitude × margin with equal-width bins over the range
/// observed across both membership classes, so the two tables share axes.
pub fn magnitude_margin_table(
    records: &[PredictionRecord],
    bins_mag: usize,
    bins_margin: usize,
    attack: AttackKind,
    source: MagnitudeSource,
) -> Result<DiagnosticTables> {
    if bins_mag == 0 || bins_margin == 0 {
        return Err(LabError::Input("bin counts must be positive".into()));
    }
    if !records.iter().any(|r| r.is_member) || !records.iter().any(|r| !r.is_member) {
        return Err(LabError::Input(
            "diagnostics need at least one member and one non-member record".into(),
        ));
    }
    let range = |f: fn(&PredictionRecord) -> f64| {
        records.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
    };
    let (mag_lo, mag_hi) = range(|r| r.magnitude);
    let (mar_lo, mar_hi) = range(|r| r.margin);
    let mut warnings = Vec::new();
    let mut bins_mag = bins_mag;
    let mut bins_margin = bins_margin;
    if mag_hi <= mag_lo {
        warnings.push(format!("all magnitudes equal {mag_lo}; using a single magnitude bin"));
        bins_mag = 1;
    }
    if mar_hi <= mar_lo {
        warnings.push(format!("all margins equal {mar_lo}; using a single margin bin"));
        bins_margin = 1;
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let table = |member: bool| {
        let mut counts = vec![0usize; bins_mag * bins_margin];
        let mut hits = vec![0usize; bins_mag * bins_margin];
        let (mut mags, mut margins) = (Vec::new(), Vec::new());
        for r in records.iter().filter(|r| r.is_member == member) {
            let i = bin_of(r.magnitude, mag_lo, mag_hi, bins_mag);
            let j = bin_of(r.margin, mar_lo, mar_hi, bins_margin);
            counts[i * bins_margin + j] += 1;
            if *r.attack_correct.get(attack) {
                hits[i * bins_margin + j] += 1;
            }
            mags.push(r.magnitude);
            margins.push(r.margin);
        }
        let mean_attack_acc = counts
            .iter()
            .zip(&hits)
            .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
            .collect();
        BinTable {
            is_member: member,
            magnitude_source: source,
            attack,
            magnitude_edges: edges(mag_lo, mag_hi, bins_mag),
            margin_edges: edges(mar_lo, mar_hi, bins_margin),
            counts,
            mean_attack_acc,
            pearson: pearson(&mags, &margins),
            warnings: warnings.clone(),
        }
    };
    Ok(DiagnosticTables {
        members: table(true),
        nonmembers: table(false),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iters: usize,
}

fn check_bench_args(iters: usize, warmup: usize) -> Result<()> {
    if iters < 10 {
        return Err(LabError::Input(format!("latency bench needs iters >= 10, got {iters}")));
    }
    if warmup < 1 {
        return Err(LabError::Input("latency bench needs warmup >= 1".into()));
    }
    Ok(())
}

fn time_forward(model: &Model, batch: &Matrix) -> Result<f64> {
    let t = Instant::now();
    std::hint::black_box(model.forward_with(batch, Mode::Eval, None)?);
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

fn stats(times: &[f64]) -> LatencyStats {
    let n = times.len();
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        iters: n,
    }
}

/// Wall-clock statistics of evaluation-mode forward passes over `batch`.
pub fn latency_bench(model: &Model, batch: &Matrix, iters: usize, warmup: usize) -> Result<LatencyStats> {
    check_bench_args(iters, warmup)?;
    for _ in 0..warmup {
        time_forward(model, batch)?;
    }
    let times = (0..iters)
        .map(|_| time_forward(model, batch))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats(&times))
}

/// Like [`latency_bench`] for two models, alternating them every iteration
/// so that drift in machine load hits both equally.
pub fn latency_compare(
    a: &Model,
    b: &Model,
    batch: &Matrix,
    iters: usize,
    warmup: usize,
) -> Result<(LatencyStats, LatencyStats)> {
    check_bench_args(iters, warmup)?;
    for _ in 0..warmup {
        time_forward(a, batch)?;
        time_forward(b, batch)?;
    }
    let (mut ta, mut tb) = (Vec::with_capacity(iters), Vec::with_capacity(iters));
    for _ in 0..iters {
        ta.push(time_forward(a, batch)?);
        tb.push(time_forward(b, batch)?);
    }
    Ok((stats(&ta), stats(&tb)))
}
