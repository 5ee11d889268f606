//! Zero-shot classification against frozen class-text embeddings.

use thiserror::Error;

use crate::bundle::{BundleError, TensorBundle};
use crate::tensor::{cosine_normalize, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} at row {row} outside [-1, {classes})")]
    Label { row: usize, label: i64, classes: usize },
    #[error("logit scale must be finite and non-negative, got {0}")]
    LogitScale(f32),
    #[error("no labeled rows")]
    NoLabeledRows,
    #[error("accuracies mix fraction and percent conventions: {0} vs {1}")]
    MixedScale(f32, f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("bad metadata {key}: {msg}")]
    Meta { key: String, msg: String },
}

/// Image embeddings with labels and the class-text anchors they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub image: Tensor<f32>,
    /// `-1` marks an unlabeled row.
    pub labels: Tensor<i64>,
    pub class_text: Tensor<f32>,
    pub logit_scale: f32,
    pub names: Option<Vec<String>>,
}

impl EmbeddingSet {
    /// Builds a set, L2-normalizing image and text rows unless `prenormalized`.
    pub fn new(
        image: Tensor<f32>,
        labels: Tensor<i64>,
        class_text: Tensor<f32>,
        logit_scale: f32,
        prenormalized: bool,
    ) -> Result<Self, ZeroShotError> {
        let (image, class_text) = if prenormalized {
            (image, class_text)
        } else {
            (cosine_normalize(&image)?, cosine_normalize(&class_text)?)
        };
        let set = Self {
            image,
            labels,
            class_text,
            logit_scale,
            names: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ZeroShotError> {
        let (n, d) = self.image.dims2()?;
        let (c, dt) = self.class_text.dims2()?;
        if d != dt {
            return Err(ZeroShotError::DimensionMismatch(format!(
                "image dim {d} vs text dim {dt}"
            )));
        }
        if self.labels.shape() != [n] {
            return Err(ZeroShotError::DimensionMismatch(format!(
                "{} labels for {n} images",
                self.labels.len()
            )));
        }
        for (row, &label) in self.labels.data().iter().enumerate() {
            if label < -1 || label >= c as i64 {
                return Err(ZeroShotError::Label { row, label, classes: c });
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return Err(ZeroShotError::LogitScale(self.logit_scale));
        }
        if let Some(names) = &self.names {
            if names.len() != c {
                return Err(ZeroShotError::DimensionMismatch(format!(
                    "{} class names for {c} classes",
                    names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.class_text.shape()[0]
    }

    /// Reads `image`, `labels`, `class_text` and `meta.logit_scale` from a bundle.
    ///
    /// Meta `prenormalized = "true"` skips row normalization; `class_names` may
    /// hold a JSON array of names.
    pub fn from_bundle(b: &TensorBundle) -> Result<Self, ZeroShotError> {
        let logit_scale = parse_meta_f32(b, "logit_scale")?.unwrap_or(100.0);
        let prenormalized = b.meta.get("prenormalized").is_some_and(|v| v == "true");
        let mut set = Self::new(
            b.f32("image")?.clone(),
            b.i64("labels")?.clone(),
            b.f32("class_text")?.clone(),
            logit_scale,
            prenormalized,
        )?;
        if let Some(raw) = b.meta.get("class_names") {
            let names: Vec<String> = serde_json::from_str(raw).map_err(|e| ZeroShotError::Meta {
                key: "class_names".into(),
                msg: e.to_string(),
            })?;
            set.names = Some(names);
            set.validate()?;
        }
        Ok(set)
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new()
            .with("image", self.image.clone())
            .with("labels", self.labels.clone())
            .with("class_text", self.class_text.clone());
        b.set_meta("logit_scale", self.logit_scale.to_string());
        b.set_meta("prenormalized", "true");
        if let Some(names) = &self.names {
            b.set_meta("class_names", serde_json::to_string(names).expect("strings serialize"));
        }
        b
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut image = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            image.extend_from_slice(self.image.row(r));
            labels.push(self.labels.data()[r]);
        }
        Self {
            image: Tensor::new(vec![rows.len(), d], image).expect("row-sized"),
            labels: Tensor::vector(labels),
            class_text: self.class_text.clone(),
            logit_scale: self.logit_scale,
            names: self.names.clone(),
        }
    }
}

pub(crate) fn parse_meta_f32(b: &TensorBundle, key: &str) -> Result<Option<f32>, ZeroShotError> {
    b.meta
        .get(key)
        .map(|v| {
            v.trim().parse::<f32>().map_err(|e| ZeroShotError::Meta {
                key: key.into(),
                msg: e.to_string(),
            })
        })
        .transpose()
}

/// Logits with the labels of the rows they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    pub logits: Tensor<f32>,
    pub labels: Tensor<i64>,
}

impl LogitSet {
    pub fn new(logits: Tensor<f32>, labels: Tensor<i64>) -> Result<Self, ZeroShotError> {
        let (n, _) = logits.dims2()?;
        if labels.shape() != [n] {
            return Err(ZeroShotError::DimensionMismatch(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        logits.ensure_finite()?;
        Ok(Self { logits, labels })
    }

    pub fn n(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self, ZeroShotError> {
        Self::new(b.f32("logits")?.clone(), b.i64("labels")?.clone())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        TensorBundle::new()
            .with("logits", self.logits.clone())
            .with("labels", self.labels.clone())
    }

    /// Logits divided by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        Self {
            logits: self.logits.map(|v| (f64::from(v) / t) as f32),
            labels: self.labels.clone(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let c = self.classes();
        let mut logits = Vec::with_capacity(rows.len() * c);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            logits.extend_from_slice(self.logits.row(r));
            labels.push(self.labels.data()[r]);
        }
        Self {
            logits: Tensor::new(vec![rows.len(), c], logits).expect("row-sized"),
            labels: Tensor::vector(labels),
        }
    }
}

/// `logits[i, c] = logit_scale * <image_i, text_c>`.
pub fn zero_shot_logits(e: &EmbeddingSet) -> Result<LogitSet, ZeroShotError> {
    e.validate()?;
    let sims = cosine_sims(&e.image, &e.class_text)?;
    let logits = sims.map(|v| e.logit_scale * v);
    Ok(LogitSet {
        logits,
        labels: e.labels.clone(),
    })
}

/// Row-wise dot products `a · bᵀ`, accumulated in f64.
pub fn cosine_sims(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>, ZeroShotError> {
    let (n, d) = a.dims2()?;
    let (c, db) = b.dims2()?;
    if d != db {
        return Err(ZeroShotError::DimensionMismatch(format!("{d} vs {db}")));
    }
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..c {
            let dot: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            out.push(dot as f32);
        }
    }
    Ok(Tensor::new(vec![n, c], out)?)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over labeled rows.
pub fn accuracy(l: &LogitSet) -> Result<f64, ZeroShotError> {
    let mut labeled = 0usize;
    let mut correct = 0usize;
    for (i, &label) in l.labels.data().iter().enumerate() {
        if label < 0 {
            continue;
        }
        labeled += 1;
        if argmax(l.logits.row(i)) as i64 == label {
            correct += 1;
        }
    }
    if labeled == 0 {
        return Err(ZeroShotError::NoLabeledRows);
    }
    Ok(correct as f64 / labeled as f64)
}

/// Accuracy drop from the normal to the counter group, in percentage points.
///
/// Both inputs are fractions or both are percentages; values above 1 are
/// read as percentages.
pub fn vulnerability(acc_normal: f32, acc_counter: f32) -> Result<f32, ZeroShotError> {
    let pct = |v: f32| v > 1.0;
    let (a, b) = match (pct(acc_normal), pct(acc_counter)) {
        (true, true) => (f64::from(acc_normal), f64::from(acc_counter)),
        (false, false) => (f64::from(acc_normal) * 100.0, f64::from(acc_counter) * 100.0),
        _ => return Err(ZeroShotError::MixedScale(acc_normal, acc_counter)),
    };
    // Table values carry two decimals; rounding to 1e-4 pp keeps f32 noise out.
    Ok((((a - b) * 1e4).round() / 1e4) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn set(image: Vec<f32>, n: usize, text: Vec<f32>, c: usize, scale: f32) -> EmbeddingSet {
        let d = image.len() / n;
        EmbeddingSet::new(
            Tensor::new(vec![n, d], image).unwrap(),
            Tensor::vector(vec![0; n]),
            Tensor::new(vec![c, d], text).unwrap(),
            scale,
            false,
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_logits() {
        let e = set(vec![1.0, 0.0], 1, vec![1.0, 0.0, 0.0, 1.0], 2, 100.0);
        assert_eq!(zero_shot_logits(&e).unwrap().logits.data(), &[100.0, 0.0]);
    }

    #[test]
    fn zero_logit_scale() {
        let e = set(vec![0.3, 0.7, -1.0, 2.0], 2, vec![1.0, 0.0, 0.5, 1.0], 2, 0.0);
        assert!(zero_shot_logits(&e).unwrap().logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_match_naive_matmul() {
        let mut rng = Rng::new(5);
        let img = rng.normal_tensor(vec![3, 4], 0.0, 1.0);
        let txt = rng.normal_tensor(vec![2, 4], 0.0, 1.0);
        let e = EmbeddingSet::new(img.clone(), Tensor::vector(vec![0, 1, -1]), txt.clone(), 50.0, false).unwrap();
        let l = zero_shot_logits(&e).unwrap();
        let norm = |r: &[f32]| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        for i in 0..3 {
            for c in 0..2 {
                let (a, b) = (img.row(i), txt.row(c));
                let mut dot = 0.0f64;
                for k in 0..4 {
                    dot += a[k] as f64 * b[k] as f64;
                }
                let expect = 50.0 * dot / (norm(a) * norm(b));
                assert!((l.logits.row(i)[c] as f64 - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn dimension_and_label_checks() {
        let r = EmbeddingSet::new(
            Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::vector(vec![0]),
            Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap(),
            1.0,
            false,
        );
        assert!(matches!(r, Err(ZeroShotError::DimensionMismatch(_))));
        let r = EmbeddingSet::new(
            Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::vector(vec![3]),
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            1.0,
            false,
        );
        assert!(matches!(r, Err(ZeroShotError::Label { label: 3, .. })));
    }

    #[test]
    fn accuracy_rules() {
        let l = LogitSet::new(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), Tensor::vector(vec![0])).unwrap();
        assert_eq!(accuracy(&l).unwrap(), 1.0);
        let l = LogitSet::new(
            Tensor::new(vec![3, 2], vec![2.0, 1.0, 0.0, 1.0, 5.0, 0.0]).unwrap(),
            Tensor::vector(vec![0, 1, -1]),
        )
        .unwrap();
        assert_eq!(accuracy(&l).unwrap(), 1.0);
        let unl = LogitSet::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), Tensor::vector(vec![-1])).unwrap();
        assert!(matches!(accuracy(&unl), Err(ZeroShotError::NoLabeledRows)));
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let logits = rng.normal_tensor(vec![40, 5], 0.0, 1.0);
            let labels: Vec<i64> = (0..40).map(|_| rng.index(6) as i64 - 1).collect();
            let l = LogitSet::new(logits.clone(), Tensor::vector(labels.clone())).unwrap();
            let (mut hit, mut tot) = (0, 0);
            for i in 0..40 {
                if labels[i] < 0 {
                    continue;
                }
                tot += 1;
                let r = logits.row(i);
                let best = (0..5).fold(0, |b, j| if r[j] > r[b] { j } else { b });
                hit += (best as i64 == labels[i]) as usize;
            }
            if tot > 0 {
                assert_eq!(accuracy(&l).unwrap(), hit as f64 / tot as f64);
            }
        }
    }

    #[test]
    fn vulnerability_table_rows() {
        assert_eq!(vulnerability(83.1, 66.4).unwrap(), 16.7);
        assert_eq!(vulnerability(84.0, 60.9).unwrap(), 23.1);
        assert_eq!(vulnerability(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(vulnerability(0.831, 0.664).unwrap(), 16.7);
        assert!(matches!(vulnerability(0.8, 66.4), Err(ZeroShotError::MixedScale(..))));
    }

    #[test]
    fn bundle_round_trip() {
        let mut e = set(vec![1.0, 0.0, 0.0, 2.0], 2, vec![1.0, 0.0, 0.0, 1.0], 2, 100.0);
        e.names = Some(vec!["cat".into(), "dog".into()]);
        let back = EmbeddingSet::from_bundle(&e.to_bundle()).unwrap();
        assert_eq!(back, e);
    }
}
