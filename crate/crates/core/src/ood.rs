//! Zero-shot OOD scorers and detection metrics.
//!
//! Every scorer is oriented so that a higher score means "more in-distribution".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::softmax_row;
use crate::tensor::{cosine_normalize, Tensor, TensorError};
use crate::zeroshot::{cosine_sims, zero_shot_logits, EmbeddingSet, LogitSet, ZeroShotError};

#[derive(Debug, Error)]
pub enum OodError {
    #[error("scorer {0} needs negative text embeddings")]
    MissingNegatives(&'static str),
    #[error("scorer {0} needs embeddings, got logits")]
    NeedsEmbeddings(&'static str),
    #[error("{0} side has no scores")]
    EmptySide(&'static str),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("tpr must lie in (0, 1], got {0}")]
    Tpr(f64),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    Msp,
    Energy { t: f64 },
    Mcm { tau: f64 },
    GenericNegative { tau: f64 },
    NegLabel { tau: f64 },
}

impl ScorerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Energy { .. } => "energy",
            ScorerKind::Mcm { .. } => "mcm",
            ScorerKind::GenericNegative { .. } => "generic-negative",
            ScorerKind::NegLabel { .. } => "neglabel",
        }
    }

    fn temperature(&self) -> Option<f64> {
        match *self {
            ScorerKind::Msp => None,
            ScorerKind::Energy { t } => Some(t),
            ScorerKind::Mcm { tau } | ScorerKind::GenericNegative { tau } | ScorerKind::NegLabel { tau } => {
                Some(tau)
            }
        }
    }

    fn uses_negatives(&self) -> bool {
        matches!(self, ScorerKind::GenericNegative { .. } | ScorerKind::NegLabel { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Unit-norm negative concept embeddings, `M×D`.
    pub negative_text: Option<Tensor<f32>>,
}

impl ScorerConfig {
    pub fn new(kind: ScorerKind) -> Self {
        Self {
            kind,
            negative_text: None,
        }
    }

    /// Attaches negatives, L2-normalizing their rows.
    pub fn with_negatives(mut self, negatives: &Tensor<f32>) -> Result<Self, OodError> {
        self.negative_text = Some(cosine_normalize(negatives)?);
        Ok(self)
    }

    fn validate(&self) -> Result<(), OodError> {
        if let Some(t) = self.kind.temperature() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(OodError::Temperature(t));
            }
        }
        if self.kind.uses_negatives() && self.negative_text.as_ref().is_none_or(|n| n.is_empty()) {
            return Err(OodError::MissingNegatives(self.kind.name()));
        }
        Ok(())
    }
}

/// What a scorer can be applied to.
pub enum ScoreInput<'a> {
    Embeddings(&'a EmbeddingSet),
    Logits(&'a LogitSet),
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn msp(logits: &[f32]) -> f64 {
    softmax_row(logits).into_iter().fold(0.0, f64::max)
}

/// Negated energy, `T * logsumexp(logits / T)`.
pub fn energy(logits: &[f32], t: f64) -> f64 {
    t * logsumexp(logits.iter().map(|&v| f64::from(v) / t))
}

/// Maximum concept matching: largest softmax of `sims / tau`.
pub fn mcm(sims: &[f32], tau: f64) -> f64 {
    let scaled = sims.iter().map(|&s| f64::from(s) / tau);
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    (max - logsumexp(scaled)).exp()
}

/// Softmax mass on the ID concepts against ID plus negative concepts.
pub fn negative_mass(id_sims: &[f32], neg_sims: &[f32], tau: f64) -> f64 {
    let id = id_sims.iter().map(|&s| f64::from(s) / tau);
    let all = id.clone().chain(neg_sims.iter().map(|&s| f64::from(s) / tau));
    (logsumexp(id) - logsumexp(all)).exp()
}

/// Scores every row of the input.
pub fn score(cfg: &ScorerConfig, input: ScoreInput<'_>) -> Result<Vec<f64>, OodError> {
    cfg.validate()?;
    let kind = cfg.kind;
    match (kind, input) {
        (ScorerKind::Msp | ScorerKind::Energy { .. }, ScoreInput::Embeddings(e)) => {
            score(cfg, ScoreInput::Logits(&zero_shot_logits(e)?))
        }
        (ScorerKind::Msp, ScoreInput::Logits(l)) => Ok((0..l.n()).map(|i| msp(l.logits.row(i))).collect()),
        (ScorerKind::Energy { t }, ScoreInput::Logits(l)) => {
            Ok((0..l.n()).map(|i| energy(l.logits.row(i), t)).collect())
        }
        (_, ScoreInput::Logits(_)) => Err(OodError::NeedsEmbeddings(kind.name())),
        (ScorerKind::Mcm { tau }, ScoreInput::Embeddings(e)) => {
            let sims = cosine_sims(&e.image, &e.class_text)?;
            Ok((0..e.n()).map(|i| mcm(sims.row(i), tau)).collect())
        }
        (ScorerKind::GenericNegative { tau } | ScorerKind::NegLabel { tau }, ScoreInput::Embeddings(e)) => {
            let negatives = cfg.negative_text.as_ref().expect("validated");
            let id_sims = cosine_sims(&e.image, &e.class_text)?;
            let neg_sims = cosine_sims(&e.image, negatives)?;
            Ok((0..e.n())
                .map(|i| negative_mass(id_sims.row(i), neg_sims.row(i), tau))
                .collect())
        }
    }
}

fn check_side(name: &'static str, s: &[f64]) -> Result<(), OodError> {
    if s.is_empty() {
        return Err(OodError::EmptySide(name));
    }
    if let Some(i) = s.iter().position(|v| !v.is_finite()) {
        return Err(OodError::NonFiniteScore(i));
    }
    Ok(())
}

/// Exact AUROC via the Mann–Whitney rank sum with midranks for ties.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, OodError> {
    check_side("ID", id_scores)?;
    check_side("OOD", ood_scores)?;
    let (n, m) = (id_scores.len(), ood_scores.len());
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are 1-based; a tie block [i, j) shares rank (i + 1 + j) / 2.
    let mut rank_sum_id = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let ids = all[i..j].iter().filter(|x| x.1).count();
        rank_sum_id += midrank * ids as f64;
        i = j;
    }
    let u = rank_sum_id - (n * (n + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// Fraction of OOD scores at or above the `ceil(tpr * N)`-th largest ID score.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64, OodError> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(OodError::Tpr(tpr));
    }
    check_side("ID", id_scores)?;
    check_side("OOD", ood_scores)?;
    let n = id_scores.len();
    // 1e-9 absorbs products like 0.95 * 20 landing one ulp above an integer
    let k = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let above = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(above as f64 / ood_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn evaluate(id_scores: &[f64], ood_scores: &[f64]) -> Result<OodReport, OodError> {
    Ok(OodReport {
        auroc: auroc(id_scores, ood_scores)?,
        fpr_at_95tpr: fpr_at_tpr(id_scores, ood_scores, 0.95)?,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}
