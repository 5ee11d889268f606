use serde::{Deserialize, Serialize};

use crate::fmt::sig6;
use crate::metrics::{ece, DEFAULT_BINS};
use crate::tensor::Tensor;
use crate::zeroshot::{accuracy, EmbeddingSet, LogitSet};

use super::{
    adamw_step, backward, forward, forward_features, AdamW, Distill, HeadInit, QatConfig, QatError, QatState,
    UniqueSamples,
};

/// Light QAT schedule: 100 steps of batch 100 drawn from 100 unique samples,
/// AdamW at 1e-6. LoRA rank 8 / alpha 16 as in the full schedule.
pub fn light_qat_config(dim: usize, bits_w: u32, bits_a: u32, seed: u64) -> QatConfig {
    QatConfig {
        layer_dims: vec![dim, dim],
        bits_w,
        bits_a,
        use_lsq: false,
        per_channel_weights: false,
        lora_rank: 8,
        lora_alpha: 16.0,
        lr_base: 1e-6,
        lr_lsq_scale: 1e-6,
        optimizer: AdamW::default(),
        steps: 100,
        batch: 100,
        unique_samples: UniqueSamples::Count(100),
        distill: Distill::None,
        seed,
        init: HeadInit::Identity,
        decay_lora: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub distill: f64,
}

fn l2_normalize_rows(y: &Tensor<f32>) -> Result<(Vec<f64>, Vec<f64>), QatError> {
    let (n, d) = y.dims2()?;
    let mut out = Vec::with_capacity(n * d);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = y.row(i);
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(QatError::NumericalDivergence {
                stage: "feature normalization",
                step: 0,
                last_good: None,
            });
        }
        out.extend(row.iter().map(|&v| f64::from(v) / norm));
        norms.push(norm);
    }
    Ok((out, norms))
}

fn logits_of(unit: &[f64], rows: usize, text: &Tensor<f32>, scale: f64) -> Vec<f64> {
    let (c, d) = (text.shape()[0], text.shape()[1]);
    let mut out = vec![0.0; rows * c];
    for b in 0..rows {
        let f = &unit[b * d..(b + 1) * d];
        for k in 0..c {
            let t = text.row(k);
            out[b * c + k] = scale * f.iter().zip(t).map(|(&x, &y)| x * f64::from(y)).sum::<f64>();
        }
    }
    out
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let lse = max + row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v / tau - lse).collect()
}

/// Zero-shot logits of head outputs against the set's class text.
pub fn head_logits(features: &Tensor<f32>, set: &EmbeddingSet) -> Result<LogitSet, QatError> {
    let rows = features.shape()[0];
    let (unit, _) = l2_normalize_rows(features)?;
    let logits = logits_of(&unit, rows, &set.class_text, f64::from(set.logit_scale));
    Ok(LogitSet::new(
        Tensor::new(vec![rows, set.classes()], logits.into_iter().map(|v| v as f32).collect())?,
        set.labels.clone(),
    )?)
}

/// Mean cross-entropy over labeled rows of a row-major `rows×c` logit buffer.
pub fn task_loss(logits: &[f64], labels: &[i64], c: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (b, &y) in labels.iter().enumerate() {
        if y < 0 {
            continue;
        }
        sum -= log_softmax(&logits[b * c..(b + 1) * c], 1.0)[y as usize];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Distillation loss between student and teacher, given normalized features
/// and their logits (`rows×d` and `rows×c`).
pub fn distill_loss(
    kind: Distill,
    student_unit: &[f64],
    teacher_unit: &[f64],
    student_logits: &[f64],
    teacher_logits: &[f64],
    c: usize,
) -> f64 {
    match kind {
        Distill::None => 0.0,
        Distill::MseNormalizedFeatures { .. } => {
            let n = student_unit.len().max(1) as f64;
            student_unit
                .iter()
                .zip(teacher_unit)
                .map(|(s, t)| (s - t) * (s - t))
                .sum::<f64>()
                / n
        }
        Distill::KlDivergence { tau, .. } => {
            let rows = student_logits.len() / c;
            let tau = f64::from(tau);
            let mut kl = 0.0;
            for b in 0..rows {
                let ls = log_softmax(&student_logits[b * c..(b + 1) * c], tau);
                let lt = log_softmax(&teacher_logits[b * c..(b + 1) * c], tau);
                kl += lt.iter().zip(&ls).map(|(t, s)| t.exp() * (t - s)).sum::<f64>();
            }
            kl / rows.max(1) as f64
        }
    }
}

/// Loss of head outputs and its gradient with respect to them.
pub(crate) fn loss_and_grad(
    features: &Tensor<f32>,
    teacher: Option<&Tensor<f32>>,
    labels: &[i64],
    set: &EmbeddingSet,
    distill: Distill,
) -> Result<(LossBreakdown, Tensor<f32>), QatError> {
    let (rows, d) = features.dims2()?;
    let c = set.classes();
    let scale = f64::from(set.logit_scale);
    let (unit, norms) = l2_normalize_rows(features)?;
    let logits = logits_of(&unit, rows, &set.class_text, scale);
    let alpha = f64::from(distill.alpha());

    let labeled = labels.iter().filter(|&&y| y >= 0).count().max(1) as f64;
    let mut g_logits = vec![0.0f64; rows * c];
    for b in 0..rows {
        let y = labels[b];
        if y < 0 {
            continue;
        }
        let lp = log_softmax(&logits[b * c..(b + 1) * c], 1.0);
        for k in 0..c {
            let onehot = if k as i64 == y { 1.0 } else { 0.0 };
            g_logits[b * c + k] += (1.0 - alpha) * (lp[k].exp() - onehot) / labeled;
        }
    }
    let task = task_loss(&logits, labels, c);

    let mut g_unit = vec![0.0f64; rows * d];
    let mut dist = 0.0;
    if let (Some(teacher), true) = (teacher, alpha > 0.0) {
        let (t_unit, _) = l2_normalize_rows(teacher)?;
        let t_logits = logits_of(&t_unit, rows, &set.class_text, scale);
        dist = distill_loss(distill, &unit, &t_unit, &logits, &t_logits, c);
        match distill {
            Distill::MseNormalizedFeatures { .. } => {
                let n = (rows * d) as f64;
                for k in 0..rows * d {
                    g_unit[k] += alpha * 2.0 * (unit[k] - t_unit[k]) / n;
                }
            }
            Distill::KlDivergence { tau, .. } => {
                let tau = f64::from(tau);
                for b in 0..rows {
                    let ls = log_softmax(&logits[b * c..(b + 1) * c], tau);
                    let lt = log_softmax(&t_logits[b * c..(b + 1) * c], tau);
                    for k in 0..c {
                        g_logits[b * c + k] += alpha * (ls[k].exp() - lt[k].exp()) / (tau * rows as f64);
                    }
                }
            }
            Distill::None => {}
        }
    }

    // logits = scale · unit · textᵀ
    for b in 0..rows {
        for k in 0..c {
            let g = g_logits[b * c + k] * scale;
            if g == 0.0 {
                continue;
            }
            for (j, &t) in set.class_text.row(k).iter().enumerate() {
                g_unit[b * d + j] += g * f64::from(t);
            }
        }
    }
    // unit = y / |y|  ⇒  dy = (du - unit (unit · du)) / |y|
    let mut grad = Vec::with_capacity(rows * d);
    for b in 0..rows {
        let u = &unit[b * d..(b + 1) * d];
        let gu = &g_unit[b * d..(b + 1) * d];
        let proj: f64 = u.iter().zip(gu).map(|(a, g)| a * g).sum();
        grad.extend(u.iter().zip(gu).map(|(a, g)| ((g - a * proj) / norms[b]) as f32));
    }
    let breakdown = LossBreakdown {
        total: (1.0 - alpha) * task + alpha * dist,
        task,
        distill: dist,
    };
    Ok((breakdown, Tensor::new(vec![rows, d], grad)?))
}

/// Zero-shot logits of the head on an evaluation set.
pub fn evaluate(state: &QatState, cfg: &QatConfig, set: &EmbeddingSet) -> Result<LogitSet, QatError> {
    let features = forward_features(state, cfg, &set.image)?;
    head_logits(&features, set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: u64,
    pub set: String,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
}

impl TimelineRow {
    pub const CSV_HEADER: &'static str = "step,set,accuracy,ece,nll";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            self.set,
            sig6(self.accuracy),
            sig6(self.ece),
            sig6(self.nll)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: QatState,
    pub timeline: Vec<TimelineRow>,
    /// Training loss per step.
    pub losses: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from(TimelineRow::CSV_HEADER);
        out.push('\n');
        for row in &self.timeline {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }
}

fn gather(set: &EmbeddingSet, idx: &[usize]) -> (Tensor<f32>, Vec<i64>) {
    let d = set.dim();
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(set.image.row(i));
        y.push(set.labels.data()[i]);
    }
    (Tensor::new(vec![idx.len(), d], x).expect("row-sized"), y)
}

fn checkpoint_rows(
    state: &QatState,
    cfg: &QatConfig,
    eval_sets: &[(String, EmbeddingSet)],
) -> Result<Vec<TimelineRow>, QatError> {
    let mut rows = Vec::with_capacity(eval_sets.len());
    for (name, set) in eval_sets {
        let logits = evaluate(state, cfg, set)?;
        let report = ece(&logits, DEFAULT_BINS).map_err(|e| QatError::Config(format!("eval set {name}: {e}")))?;
        rows.push(TimelineRow {
            step: state.step,
            set: name.clone(),
            accuracy: accuracy(&logits)?,
            ece: report.ece,
            nll: report.nll,
        });
    }
    Ok(rows)
}

/// Runs quantization-aware training from `init`.
///
/// Batches cycle through the first `unique_samples` rows of `train_set`
/// (batch `k` of global step `t` is row `(t·batch + k) mod U`, so a resumed
/// run continues the cycle). The teacher for
/// distillation is `init` evaluated in full precision. With LSQ, activation
/// step sizes of a fresh state are calibrated on the unique pool first, so the
/// step-0 model is the static PTQ model. `checkpoints` count steps of this
/// run (0 = before its first update); timeline rows carry the global step.
pub fn train(
    cfg: &QatConfig,
    init: QatState,
    train_set: &EmbeddingSet,
    eval_sets: &[(String, EmbeddingSet)],
    checkpoints: &[u64],
) -> Result<TrainOutcome, QatError> {
    cfg.validate()?;
    if let Some(&c) = checkpoints.iter().find(|&&c| c > cfg.steps) {
        return Err(QatError::Config(format!("checkpoint {c} beyond {} steps", cfg.steps)));
    }
    let available = train_set.n();
    let unique = cfg.unique_samples.resolve(available);
    if unique > available || unique == 0 {
        return Err(QatError::Config(format!(
            "unique_samples {unique} but training set has {available} rows"
        )));
    }
    if train_set.dim() != cfg.layer_dims[0] || train_set.class_text.shape()[1] != *cfg.layer_dims.last().unwrap() {
        return Err(QatError::Config(format!(
            "layer_dims {:?} do not match embedding dim {} / text dim {}",
            cfg.layer_dims,
            train_set.dim(),
            train_set.class_text.shape()[1]
        )));
    }

    let pool: Vec<usize> = (0..unique).collect();
    let (pool_x, _) = gather(train_set, &pool);
    let teacher_cfg = cfg.full_precision();
    let teacher_features = if cfg.distill.alpha() > 0.0 {
        Some(forward_features(&init, &teacher_cfg, &pool_x)?)
    } else {
        None
    };

    let mut state = init;
    if cfg.use_lsq && state.step == 0 {
        state.calibrate_activations(cfg, &pool_x)?;
    }

    let mut timeline = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let first = state.step;
    let diverged = |stage: &'static str, step: u64, state: &QatState, timeline: &Vec<TimelineRow>, losses: &Vec<_>| {
        QatError::NumericalDivergence {
            stage,
            step,
            last_good: Some(Box::new(TrainOutcome {
                state: state.clone(),
                timeline: timeline.clone(),
                losses: losses.clone(),
            })),
        }
    };

    for t in 0..cfg.steps {
        if checkpoints.contains(&t) {
            timeline.extend(checkpoint_rows(&state, cfg, eval_sets)?);
        }
        let step_no = first + t;
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|k| ((step_no as usize) * cfg.batch + k) % unique)
            .collect();
        let (x, labels) = gather(train_set, &idx);
        let teacher = teacher_features.as_ref().map(|tf| {
            let d = tf.shape()[1];
            let rows: Vec<f32> = idx.iter().flat_map(|&i| tf.row(i).to_vec()).collect();
            Tensor::new(vec![idx.len(), d], rows).expect("row-sized")
        });
        let (y, tape) = match forward(&state, cfg, &x) {
            Ok(v) => v,
            Err(QatError::NumericalDivergence { stage, .. }) => {
                return Err(diverged(stage, step_no, &state, &timeline, &losses))
            }
            Err(e) => return Err(e),
        };
        let (loss, grad_y) = match loss_and_grad(&y, teacher.as_ref(), &labels, train_set, cfg.distill) {
            Ok(v) if v.0.total.is_finite() => v,
            Ok(_) | Err(QatError::NumericalDivergence { .. }) => {
                return Err(diverged("loss", step_no, &state, &timeline, &losses))
            }
            Err(e) => return Err(e),
        };
        let grads = backward(&tape, &grad_y)?;
        if !grads.all_finite() {
            return Err(diverged("backward", step_no, &state, &timeline, &losses));
        }
        let mut next = state.clone();
        adamw_step(&mut next, &grads, cfg);
        if !next.all_finite() {
            return Err(diverged("update", step_no, &state, &timeline, &losses));
        }
        state = next;
        losses.push(loss);
    }
    if checkpoints.contains(&cfg.steps) {
        timeline.extend(checkpoint_rows(&state, cfg, eval_sets)?);
    }
    Ok(TrainOutcome {
        state,
        timeline,
        losses,
    })
}
