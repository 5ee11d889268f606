//! Seeded synthetic data for tests, demos and the `synth` CLI command.
//!
//! The classification task places class prototypes at random unit vectors,
//! draws image features around them and rotates everything by a random
//! orthogonal matrix `R`, then shrinks a few embedding channels by a gain
//! `g` (`x ∝ G⁻¹·R·z`). The matching FP32 head is `Rᵀ·G`: it maps embeddings
//! back into the class-text space exactly, but its columns for the shrunken
//! channels are `g` times larger, which widens the per-tensor quantization
//! range the way outlier channels do in real projections.

use crate::qat::{QatConfig, QatError, QatState};
use crate::rng::Rng;
use crate::spectral::FeatureMapSet;
use crate::tensor::Tensor;
use crate::zeroshot::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub train: usize,
    pub eval: usize,
    /// Norm of the isotropic noise added to a unit prototype.
    pub noise: f64,
    /// Strength of the perturbation that is orthogonalized into `R`.
    /// Zero gives `R = I`.
    pub mixing: f64,
    /// Gain of the first `outlier_channels` embedding channels; the rest have gain 1.
    pub outlier_gain: f64,
    pub outlier_channels: usize,
    pub seed: u64,
}

impl Default for GaussianTaskSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 10,
            train: 1000,
            eval: 1000,
            noise: 1.0,
            mixing: 4.0,
            outlier_gain: 1.0,
            outlier_channels: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianTask {
    pub spec: GaussianTaskSpec,
    pub train: EmbeddingSet,
    pub eval: EmbeddingSet,
    /// Head weight `Rᵀ·G`, `dim×dim`.
    pub head: Tensor<f32>,
    rotation: Vec<f64>,
}

/// Orthonormalizes the columns of a square row-major matrix (modified Gram-Schmidt).
fn orthonormalize(m: &mut [f64], d: usize) {
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = (0..d).map(|i| m[i * d + j] * m[i * d + k]).sum();
            for i in 0..d {
                m[i * d + j] -= dot * m[i * d + k];
            }
        }
        let norm = (0..d).map(|i| m[i * d + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..d {
            m[i * d + j] /= norm;
        }
    }
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

/// Draws `n` rotated, normalized samples around `prototypes[labels[i]]`.
fn sample_images(
    rng: &mut Rng,
    prototypes: &[f64],
    labels: &[usize],
    rotation: &[f64],
    gain: &[f64],
    noise: f64,
) -> Tensor<f32> {
    let d = gain.len();
    let sigma = noise / (d as f64).sqrt();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        let z: Vec<f64> = (0..d).map(|j| prototypes[y * d + j] + sigma * rng.standard_normal()).collect();
        let x: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| rotation[i * d + j] * z[j]).sum::<f64>() / gain[i])
            .collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(x.iter().map(|v| (v / norm) as f32));
    }
    Tensor::new(vec![labels.len(), d], data).expect("sample shape")
}

pub fn gaussian_task(spec: &GaussianTaskSpec) -> GaussianTask {
    let d = spec.dim;
    let mut root = Rng::new(spec.seed);
    let mut proto_rng = root.fork(1);
    let mut rot_rng = root.fork(2);
    let mut train_rng = root.fork(3);
    let mut eval_rng = root.fork(4);

    let prototypes = unit_rows(&mut proto_rng, spec.classes, d);
    let gain: Vec<f64> = (0..d)
        .map(|i| if i < spec.outlier_channels { spec.outlier_gain } else { 1.0 })
        .collect();
    let mut rotation = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let g = rot_rng.standard_normal() * spec.mixing / (d as f64).sqrt();
            rotation[i * d + j] = g + if i == j { 1.0 } else { 0.0 };
        }
    }
    orthonormalize(&mut rotation, d);

    let text = Tensor::new(vec![spec.classes, d], prototypes.iter().map(|&v| v as f32).collect()).expect("text shape");
    let make = |rng: &mut Rng, n: usize| {
        let labels: Vec<usize> = (0..n).map(|_| rng.index(spec.classes)).collect();
        let image = sample_images(rng, &prototypes, &labels, &rotation, &gain, spec.noise);
        let labels = Tensor::new(vec![n], labels.iter().map(|&y| y as i64).collect()).expect("label shape");
        EmbeddingSet::new(image, labels, text.clone(), 100.0, true).expect("synthetic set is valid")
    };
    let train = make(&mut train_rng, spec.train);
    let eval = make(&mut eval_rng, spec.eval);

    let mut head = vec![0.0f32; d * d];
    for i in 0..d {
        for j in 0..d {
            head[i * d + j] = (rotation[j * d + i] * gain[j]) as f32;
        }
    }
    GaussianTask {
        spec: *spec,
        train,
        eval,
        head: Tensor::new(vec![d, d], head).expect("head shape"),
        rotation,
    }
}

impl GaussianTask {
    fn gain(&self, channel: usize) -> f64 {
        if channel < self.spec.outlier_channels {
            self.spec.outlier_gain
        } else {
            1.0
        }
    }

    /// The FP32 head as a single-layer QAT state (`layer_dims` must be `[dim, dim]`).
    pub fn fp32_head(&self, cfg: &QatConfig) -> Result<QatState, QatError> {
        QatState::from_weights(cfg, vec![self.head.clone()], vec![vec![0.0; self.spec.dim]])
    }

    /// Embeddings of `n` samples from prototypes that have no class text.
    /// Labels are `-1`; the returned negatives are those unseen prototypes,
    /// usable as negative-label text.
    pub fn ood(&self, n: usize, unseen_classes: usize, seed: u64) -> (EmbeddingSet, Tensor<f32>) {
        let d = self.spec.dim;
        let mut rng = Rng::new(seed).fork(5);
        let protos = unit_rows(&mut rng, unseen_classes, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(unseen_classes)).collect();
        let gain: Vec<f64> = (0..d).map(|i| self.gain(i)).collect();
        let image = sample_images(&mut rng, &protos, &labels, &self.rotation, &gain, self.spec.noise);
        let set = EmbeddingSet::new(
            image,
            Tensor::new(vec![n], vec![-1; n]).expect("label shape"),
            self.train.class_text.clone(),
            self.train.logit_scale,
            true,
        )
        .expect("synthetic set is valid");
        let negatives = Tensor::new(vec![unseen_classes, d], protos.iter().map(|&v| v as f32).collect())
            .expect("negatives shape");
        (set, negatives)
    }
}

/// Smooth random feature maps `n×(h·w)×d`: a few low-frequency plane waves
/// per channel plus white noise of standard deviation `noise`.
pub fn feature_maps(n: usize, grid: (usize, usize), d: usize, noise: f64, seed: u64) -> FeatureMapSet {
    let (h, w) = grid;
    let mut rng = Rng::new(seed).fork(6);
    let mut data = vec![0.0f32; n * h * w * d];
    for s in 0..n {
        for c in 0..d {
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.index(3) as f64,
                        rng.index(3) as f64,
                        rng.uniform_range(0.0, std::f64::consts::TAU),
                        rng.standard_normal(),
                    )
                })
                .collect();
            let offset = rng.standard_normal();
            for y in 0..h {
                for x in 0..w {
                    let mut v = offset;
                    for &(ky, kx, phase, amp) in &waves {
                        let arg = std::f64::consts::TAU * (ky * y as f64 / h as f64 + kx * x as f64 / w as f64) + phase;
                        v += amp * arg.cos();
                    }
                    v += noise * rng.standard_normal();
                    data[(s * h * w + y * w + x) * d + c] = v as f32;
                }
            }
        }
    }
    FeatureMapSet::new(Tensor::new(vec![n, h * w, d], data).expect("map shape"), grid).expect("grid matches")
}
