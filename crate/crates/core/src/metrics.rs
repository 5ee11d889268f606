//! Calibration metrics: reliability bins, ECE, NLL, temperature fitting and
//! bin-wise confidence shift between two models.
//!
//! All accumulation is in f64, sequential in sample order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::zeroshot::{argmax, LogitSet};

pub const DEFAULT_BINS: usize = 15;
pub const NLL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no labeled rows")]
    NoLabeledRows,
    #[error("need at least {need} labeled rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("labels differ at row {0}")]
    LabelMismatch(usize),
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("invalid temperature bounds [{0}, {1}]")]
    Bounds(f64, f64),
}

/// Stable softmax of one row, in f64.
pub fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confidences {
    pub probs: Tensor<f32>,
    pub conf: Vec<f64>,
    pub pred: Vec<usize>,
}

pub fn softmax_confidences(l: &LogitSet) -> Confidences {
    let (n, c) = (l.n(), l.classes());
    let mut probs = Vec::with_capacity(n * c);
    let mut conf = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    for i in 0..n {
        let p = softmax_row(l.logits.row(i));
        let k = argmax(l.logits.row(i));
        conf.push(p[k]);
        pred.push(k);
        probs.extend(p.iter().map(|&v| v as f32));
    }
    Confidences {
        probs: Tensor::new(vec![n, c], probs).expect("n*c"),
        conf,
        pred,
    }
}

/// Equal-width bin of a confidence: bin `i` covers `(i/n, (i+1)/n]`, bin 0 also holds 0.
pub fn bin_index(conf: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut i = ((conf * nb).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    while i > 0 && conf <= i as f64 / nb {
        i -= 1;
    }
    while i + 1 < n_bins && conf > (i + 1) as f64 / nb {
        i += 1;
    }
    i
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<Bin>,
    pub ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub n_bins: usize,
    pub n: usize,
}

struct Labeled {
    conf: f64,
    correct: bool,
    p_true: f64,
}

fn labeled_rows(l: &LogitSet) -> Vec<Labeled> {
    let mut out = Vec::new();
    for (i, &label) in l.labels.data().iter().enumerate() {
        if label < 0 {
            continue;
        }
        let row = l.logits.row(i);
        let p = softmax_row(row);
        let k = argmax(row);
        out.push(Labeled {
            conf: p[k],
            correct: k as i64 == label,
            p_true: p[label as usize],
        });
    }
    out
}

/// Reliability bins, ECE and NLL over the labeled rows.
pub fn ece(l: &LogitSet, n_bins: usize) -> Result<ReliabilityReport, MetricError> {
    if n_bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    let rows = labeled_rows(l);
    if rows.is_empty() {
        return Err(MetricError::NoLabeledRows);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hit = vec![0usize; n_bins];
    let mut nll_sum = 0.0;
    for r in &rows {
        let b = bin_index(r.conf, n_bins);
        count[b] += 1;
        conf_sum[b] += r.conf;
        hit[b] += r.correct as usize;
        nll_sum += -r.p_true.max(NLL_CLAMP).ln();
    }
    let n = rows.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (mc, acc) = if count[b] > 0 {
            let k = count[b] as f64;
            (conf_sum[b] / k, hit[b] as f64 / k)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += count[b] as f64 / n * (acc - mc).abs();
        }
        bins.push(Bin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            mean_confidence: mc,
            empirical_accuracy: acc,
        });
    }
    Ok(ReliabilityReport {
        bins,
        ece,
        nll: nll_sum / n,
        accuracy: hit.iter().sum::<usize>() as f64 / n,
        n_bins,
        n: rows.len(),
    })
}

/// Mean negative log-likelihood of the labeled rows of `logits / t`.
pub fn nll_at_temperature(l: &LogitSet, t: f64) -> Result<f64, MetricError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut scaled = Vec::new();
    for (i, &label) in l.labels.data().iter().enumerate() {
        if label < 0 {
            continue;
        }
        scaled.clear();
        scaled.extend(l.logits.row(i).iter().map(|&v| f64::from(v) / t));
        let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let p = (scaled[label as usize] - lse).exp();
        sum += -p.max(NLL_CLAMP).ln();
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoLabeledRows);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub t_star: f64,
    pub nll_before: f64,
    pub nll_after: f64,
}

pub const T_LO: f64 = 0.01;
pub const T_HI: f64 = 100.0;

/// Single-temperature recalibration by golden-section search on `ln t`.
///
/// NLL of `logits / t` is convex in `1/t`, hence unimodal in `ln t`. The
/// search stops at a relative bracket width of 1e-4; both endpoints and
/// `t = 1` are then compared directly, smaller `t` winning ties.
pub fn fit_temperature(l: &LogitSet, t_lo: f64, t_hi: f64) -> Result<TemperatureFit, MetricError> {
    if !(t_lo > 0.0 && t_lo < t_hi && t_hi.is_finite()) {
        return Err(MetricError::Bounds(t_lo, t_hi));
    }
    let labeled = l.labels.data().iter().filter(|&&y| y >= 0).count();
    if labeled == 0 {
        return Err(MetricError::NoLabeledRows);
    }
    if labeled < 2 {
        return Err(MetricError::TooFewRows { need: 2, got: labeled });
    }
    let f = |log_t: f64| nll_at_temperature(l, log_t.exp()).expect("labeled rows exist");
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (t_lo.ln(), t_hi.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let nll_before = nll_at_temperature(l, 1.0)?;
    let mut candidates = vec![(t_lo, f(t_lo.ln())), (mid.exp(), f(mid)), (t_hi, f(t_hi.ln()))];
    if (t_lo..=t_hi).contains(&1.0) {
        candidates.push((1.0, nll_before));
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (t_star, nll_after) = candidates
        .into_iter()
        .fold((f64::NAN, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
    Ok(TemperatureFit {
        t_star,
        nll_before,
        nll_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftGroup {
    pub source_bin: usize,
    pub count: usize,
    pub mean_conf_before: f64,
    pub mean_conf_after: f64,
    /// `None` when the group holds no labeled row.
    pub mean_acc_before: Option<f64>,
    pub mean_acc_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinShiftReport {
    pub n_bins: usize,
    pub groups: Vec<ShiftGroup>,
}

/// Tracks the samples of each "before" confidence bin through the "after" model.
/// Only non-empty groups are reported.
pub fn bin_shift(before: &LogitSet, after: &LogitSet, n_bins: usize) -> Result<BinShiftReport, MetricError> {
    if n_bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    if before.n() != after.n() {
        return Err(MetricError::LengthMismatch(before.n(), after.n()));
    }
    if let Some(i) = (0..before.n()).find(|&i| before.labels.data()[i] != after.labels.data()[i]) {
        return Err(MetricError::LabelMismatch(i));
    }
    let cb = softmax_confidences(before);
    let ca = softmax_confidences(after);
    #[derive(Default, Clone)]
    struct Acc {
        count: usize,
        conf_b: f64,
        conf_a: f64,
        labeled: usize,
        hit_b: usize,
        hit_a: usize,
    }
    let mut acc = vec![Acc::default(); n_bins];
    for i in 0..before.n() {
        let g = &mut acc[bin_index(cb.conf[i], n_bins)];
        g.count += 1;
        g.conf_b += cb.conf[i];
        g.conf_a += ca.conf[i];
        let label = before.labels.data()[i];
        if label >= 0 {
            g.labeled += 1;
            g.hit_b += (cb.pred[i] as i64 == label) as usize;
            g.hit_a += (ca.pred[i] as i64 == label) as usize;
        }
    }
    let groups = acc
        .into_iter()
        .enumerate()
        .filter(|(_, g)| g.count > 0)
        .map(|(b, g)| {
            let k = g.count as f64;
            let frac = |h: usize| (g.labeled > 0).then(|| h as f64 / g.labeled as f64);
            ShiftGroup {
                source_bin: b,
                count: g.count,
                mean_conf_before: g.conf_b / k,
                mean_conf_after: g.conf_a / k,
                mean_acc_before: frac(g.hit_b),
                mean_acc_after: frac(g.hit_a),
            }
        })
        .collect();
    Ok(BinShiftReport { n_bins, groups })
}
