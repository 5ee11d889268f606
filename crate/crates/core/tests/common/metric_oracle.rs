//! Naive reference implementations of the calibration and OOD metrics.

use qreli_core::zeroshot::LogitSet;
use qreli_core::{Rng, Tensor};

fn probs(row: &[f32]) -> Vec<f64> {
    let m = row.iter().map(|&v| f64::from(v)).fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// First index of the maximum logit.
fn first_max(row: &[f32]) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Brute-force ECE with `m` equal-width right-closed bins; confidence 0
/// belongs to the first bin.
pub fn ece(l: &LogitSet, m: usize) -> f64 {
    let mut rows = Vec::new();
    for i in 0..l.n() {
        let y = l.labels.data()[i];
        if y < 0 {
            continue;
        }
        let row = l.logits.row(i);
        let k = first_max(row);
        rows.push((probs(row)[k], k as i64 == y));
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let members: Vec<&(f64, bool)> = rows
            .iter()
            .filter(|(c, _)| (*c > lo && *c <= hi) || (b == 0 && *c == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let conf = members.iter().map(|(c, _)| c).sum::<f64>() / k;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / k;
        total += k / n * (acc - conf).abs();
    }
    total
}

pub fn nll(l: &LogitSet) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..l.n() {
        let y = l.labels.data()[i];
        if y < 0 {
            continue;
        }
        sum -= probs(l.logits.row(i))[y as usize].max(1e-12).ln();
        n += 1.0;
    }
    sum / n
}

/// Pairwise AUROC with ties counted as one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// FPR at the highest ID-score threshold whose TPR reaches `tpr`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let needed = tpr * id.len() as f64 - 1e-9;
    let mut best: Option<f64> = None;
    for &t in id {
        let hits = id.iter().filter(|&&v| v >= t).count() as f64;
        if hits >= needed && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("some threshold reaches any tpr <= 1");
    ood.iter().filter(|&&v| v >= t).count() as f64 / ood.len() as f64
}

/// Random logits with a mix of scales, duplicated rows, ties and unlabeled rows.
pub fn random_logits(rng: &mut Rng, n: usize, c: usize) -> LogitSet {
    let scale = [0.1, 1.0, 5.0, 30.0][rng.index(4)];
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        if i > 0 && rng.uniform() < 0.05 {
            let prev: Vec<f32> = data[(i - 1) * c..i * c].to_vec();
            data.extend(prev);
            continue;
        }
        for _ in 0..c {
            let v = rng.normal(0.0, scale);
            // coarse rounding on some rows produces exact ties
            let v = if rng.uniform() < 0.1 { v.round() } else { v };
            data.push(v as f32);
        }
    }
    let labels: Vec<i64> = (0..n)
        .map(|_| if rng.uniform() < 0.05 { -1 } else { rng.index(c) as i64 })
        .collect();
    let mut labels = labels;
    if labels.iter().all(|&y| y < 0) {
        labels[0] = 0;
    }
    LogitSet::new(Tensor::new(vec![n, c], data).unwrap(), Tensor::vector(labels)).unwrap()
}

/// Random scores with a controllable share of exact ties.
pub fn random_scores(rng: &mut Rng, n: usize, shift: f64) -> Vec<f64> {
    let quantized = rng.uniform() < 0.3;
    (0..n)
        .map(|_| {
            let v = rng.normal(shift, 1.0);
            if quantized {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect()
}
