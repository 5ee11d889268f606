//! Desk-scale quantization-aware training.
//!
//! The trainable artifact is a small linear/MLP head over frozen image
//! embeddings. Each layer computes
//!
//! ```text
//! z = fq_a(h) · fq_w(W)ᵀ + b + (alpha / r) · (h · Aᵀ) · Bᵀ
//! ```
//!
//! i.e. the base path is fake-quantized (weights and input activations) while
//! the LoRA path sees the full-precision input. Hidden layers apply GELU; the
//! last layer's output is the feature vector that gets cosine-scored against
//! the frozen class-text anchors.
//!
//! Gradients use the straight-through estimator for `round` and the LSQ
//! step-size gradient, scaled by `1 / sqrt(N * Q_max)`.

mod layer;
mod optim;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{compute_qparams, qrange, Granularity, QuantConfig};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use crate::zeroshot::ZeroShotError;

pub use layer::{backward, forward, forward_features, Gradients, Tape};
pub use optim::adamw_step;
pub use train::{
    distill_loss, evaluate, head_logits, light_qat_config, task_loss, train, LossBreakdown, TimelineRow,
    TrainOutcome,
};

/// Bit-widths at or above this value disable quantization.
pub const FULL_PRECISION_BITS: u32 = 32;
/// Lower bound re-applied to LSQ scales after every update.
pub const MIN_SCALE: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum QatError {
    #[error("invalid QAT config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected}")]
    Shape { got: Vec<usize>, expected: String },
    #[error("tape does not match this state: {0}")]
    TapeMismatch(String),
    #[error("non-finite value during {stage} at step {step}")]
    NumericalDivergence {
        stage: &'static str,
        step: u64,
        /// State and timeline as of the last finite step.
        last_good: Option<Box<TrainOutcome>>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distill {
    None,
    /// Mean squared error between L2-normalized student and teacher features.
    MseNormalizedFeatures { alpha: f32 },
    /// `KL(teacher || student)` of the softmax of logits divided by `tau`.
    KlDivergence { alpha: f32, tau: f32 },
}

impl Distill {
    pub fn alpha(&self) -> f32 {
        match *self {
            Distill::None => 0.0,
            Distill::MseNormalizedFeatures { alpha } | Distill::KlDivergence { alpha, .. } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllSamples {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UniqueSamples {
    Count(usize),
    All(AllSamples),
}

impl UniqueSamples {
    pub fn resolve(&self, available: usize) -> usize {
        match *self {
            UniqueSamples::Count(n) => n,
            UniqueSamples::All(_) => available,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Identity projection; requires square layers.
    Identity,
    /// Gaussian with variance `1 / fan_in`.
    Random,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    /// `[d_in, hidden..., d_out]`.
    pub layer_dims: Vec<usize>,
    pub bits_w: u32,
    pub bits_a: u32,
    pub use_lsq: bool,
    #[serde(default)]
    pub per_channel_weights: bool,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lr_base: f32,
    pub lr_lsq_scale: f32,
    #[serde(default)]
    pub optimizer: AdamW,
    pub steps: u64,
    pub batch: usize,
    pub unique_samples: UniqueSamples,
    pub distill: Distill,
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: HeadInit,
    /// Apply weight decay to the LoRA factors as well as `W`.
    #[serde(default = "default_true")]
    pub decay_lora: bool,
}

fn default_init() -> HeadInit {
    HeadInit::Identity
}

impl QatConfig {
    pub fn validate(&self) -> Result<(), QatError> {
        let bad = |m: String| Err(QatError::Config(m));
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad(format!("layer_dims {:?} needs >= 2 positive sizes", self.layer_dims));
        }
        for (name, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if bits < FULL_PRECISION_BITS && !(2..=16).contains(&bits) {
                return bad(format!("{name} = {bits}; use 2..=16 or 32"));
            }
        }
        if self.lora_rank < 1 {
            return bad("lora_rank must be >= 1".into());
        }
        if self.steps < 1 || self.batch < 1 {
            return bad("steps and batch must be >= 1".into());
        }
        if let UniqueSamples::Count(0) = self.unique_samples {
            return bad("unique_samples must be >= 1".into());
        }
        let alpha = self.distill.alpha();
        if !(0.0..=1.0).contains(&alpha) {
            return bad(format!("distillation alpha {alpha} outside [0, 1]"));
        }
        if let Distill::KlDivergence { tau, .. } = self.distill {
            if !(tau > 0.0) {
                return bad("distillation tau must be positive".into());
            }
        }
        if !(self.lr_base >= 0.0 && self.lr_lsq_scale >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        Ok(())
    }

    pub fn quantize_weights(&self) -> bool {
        self.bits_w < FULL_PRECISION_BITS
    }

    pub fn quantize_activations(&self) -> bool {
        self.bits_a < FULL_PRECISION_BITS
    }

    /// Same head, quantization switched off.
    pub fn full_precision(&self) -> Self {
        Self {
            bits_w: FULL_PRECISION_BITS,
            bits_a: FULL_PRECISION_BITS,
            ..self.clone()
        }
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// One value per trainable tensor of a layer. Used for parameters, gradients
/// and optimizer moments alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    /// `out×in`, row-major.
    pub w: Vec<f32>,
    pub bias: Vec<f32>,
    /// LoRA down-projection, `r×in`.
    pub lora_a: Vec<f32>,
    /// LoRA up-projection, `out×r`.
    pub lora_b: Vec<f32>,
    /// Weight step sizes: one, or one per output channel.
    pub s_w: Vec<f32>,
    /// Input-activation step size (single element).
    pub s_a: Vec<f32>,
}

impl LayerTensors {
    pub fn zeros_like(other: &LayerTensors) -> Self {
        let z = |v: &Vec<f32>| vec![0.0; v.len()];
        Self {
            w: z(&other.w),
            bias: z(&other.bias),
            lora_a: z(&other.lora_a),
            lora_b: z(&other.lora_b),
            s_w: z(&other.s_w),
            s_a: z(&other.s_a),
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.w, &self.bias, &self.lora_a, &self.lora_b, &self.s_w, &self.s_a]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub params: LayerTensors,
    pub m: LayerTensors,
    pub v: LayerTensors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QatState {
    pub layers: Vec<Layer>,
    pub step: u64,
}

impl QatState {
    /// Builds a head from FP32 weights and biases (`out×in` row-major per layer).
    ///
    /// LoRA starts at `A ~ N(0, 0.02²)`, `B = 0`; weight step sizes start at the
    /// MinMax PTQ scale and activation step sizes at 1 until
    /// [`QatState::calibrate_activations`] runs.
    pub fn from_weights(cfg: &QatConfig, weights: Vec<Tensor<f32>>, biases: Vec<Vec<f32>>) -> Result<Self, QatError> {
        cfg.validate()?;
        if weights.len() != cfg.n_layers() || biases.len() != cfg.n_layers() {
            return Err(QatError::Config(format!(
                "{} weight tensors for {} layers",
                weights.len(),
                cfg.n_layers()
            )));
        }
        let mut rng = Rng::new(cfg.seed).fork(0x10_4a);
        let mut layers = Vec::with_capacity(weights.len());
        for (l, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (in_dim, out_dim) = (cfg.layer_dims[l], cfg.layer_dims[l + 1]);
            if w.shape() != [out_dim, in_dim] || b.len() != out_dim {
                return Err(QatError::Shape {
                    got: w.shape().to_vec(),
                    expected: format!("[{out_dim}, {in_dim}] with {out_dim} biases"),
                });
            }
            let r = cfg.lora_rank;
            let lora_a = (0..r * in_dim).map(|_| rng.normal(0.0, 0.02) as f32).collect();
            let s_w = if cfg.quantize_weights() {
                initial_weight_scales(&w, cfg)
            } else {
                vec![1.0; if cfg.per_channel_weights { out_dim } else { 1 }]
            };
            let params = LayerTensors {
                w: w.into_data(),
                bias: b,
                lora_a,
                lora_b: vec![0.0; out_dim * r],
                s_w,
                s_a: vec![1.0],
            };
            layers.push(Layer {
                in_dim,
                out_dim,
                rank: r,
                m: LayerTensors::zeros_like(&params),
                v: LayerTensors::zeros_like(&params),
                params,
            });
        }
        Ok(Self { layers, step: 0 })
    }

    /// Fresh head initialised per `cfg.init`, biases zero.
    pub fn init(cfg: &QatConfig) -> Result<Self, QatError> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(0x1417);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..cfg.n_layers() {
            let (i, o) = (cfg.layer_dims[l], cfg.layer_dims[l + 1]);
            let w = match cfg.init {
                HeadInit::Identity => {
                    if i != o {
                        return Err(QatError::Config(format!("identity init needs square layers, got {o}x{i}")));
                    }
                    let mut w = vec![0.0; i * o];
                    (0..i).for_each(|k| w[k * i + k] = 1.0);
                    Tensor::new(vec![o, i], w)?
                }
                HeadInit::Random => rng.normal_tensor(vec![o, i], 0.0, (1.0 / i as f64).sqrt()),
            };
            weights.push(w);
            biases.push(vec![0.0; o]);
        }
        Self::from_weights(cfg, weights, biases)
    }

    /// Sets each layer's activation step size to the MinMax scale of its input
    /// on `x`, propagating through the already-calibrated quantized layers.
    pub fn calibrate_activations(&mut self, cfg: &QatConfig, x: &Tensor<f32>) -> Result<(), QatError> {
        if !cfg.quantize_activations() {
            return Ok(());
        }
        let (_, qmax) = qrange(cfg.bits_a, true);
        let mut h = x.clone();
        for l in 0..self.layers.len() {
            let amax = h.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            self.layers[l].params.s_a = vec![if amax > 0.0 { amax / qmax as f32 } else { 1.0 }];
            h = layer::layer_output(&self.layers[l], cfg, &h, l + 1 < self.layers.len())?;
        }
        Ok(())
    }

    pub fn weight(&self, l: usize) -> Tensor<f32> {
        let layer = &self.layers[l];
        Tensor::new(vec![layer.out_dim, layer.in_dim], layer.params.w.clone()).expect("layer shape")
    }

    /// Fake-quantized base weight of layer `l` as the forward pass sees it.
    pub fn quantized_weight(&self, cfg: &QatConfig, l: usize) -> Tensor<f32> {
        let layer = &self.layers[l];
        let wq = layer::quantize_weights(layer, cfg).wq;
        Tensor::new(vec![layer.out_dim, layer.in_dim], wq).expect("layer shape")
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params.all_finite())
    }

    /// Serializes parameters, moments and step into a tensor bundle.
    pub fn to_bundle(&self, cfg: &QatConfig) -> crate::bundle::TensorBundle {
        let mut b = crate::bundle::TensorBundle::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (o, i, r) = (layer.out_dim, layer.in_dim, layer.rank);
            let t = |shape: Vec<usize>, v: &Vec<f32>| Tensor::new(shape, v.clone()).expect("layer shape");
            for (kind, set) in [("param", &layer.params), ("adam_m", &layer.m), ("adam_v", &layer.v)] {
                let p = if kind == "param" { format!("layer{l}") } else { format!("layer{l}.{kind}") };
                b.insert(format!("{p}.weight"), t(vec![o, i], &set.w));
                b.insert(format!("{p}.bias"), t(vec![o], &set.bias));
                b.insert(format!("{p}.lora_a"), t(vec![r, i], &set.lora_a));
                b.insert(format!("{p}.lora_b"), t(vec![o, r], &set.lora_b));
                b.insert(format!("{p}.s_w"), t(vec![set.s_w.len()], &set.s_w));
                b.insert(format!("{p}.s_a"), t(vec![1], &set.s_a));
            }
            if cfg.quantize_weights() {
                b.insert(format!("layer{l}.weight_quantized"), self.quantized_weight(cfg, l));
            }
        }
        b.set_meta("step", self.step.to_string());
        b.set_meta("layer_dims", serde_json::to_string(&cfg.layer_dims).expect("ints serialize"));
        b
    }

    /// Reads a head from a bundle.
    ///
    /// A bundle written by [`QatState::to_bundle`] restores the full state
    /// (LoRA factors, step sizes, Adam moments and step). A bundle holding only
    /// `layer{l}.weight` and `layer{l}.bias` starts a fresh state from them.
    pub fn from_bundle(cfg: &QatConfig, b: &crate::bundle::TensorBundle) -> Result<Self, QatError> {
        let get = |name: String| {
            b.f32(&name)
                .cloned()
                .map_err(|e| QatError::Config(format!("initial head: {e}")))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..cfg.n_layers() {
            weights.push(get(format!("layer{l}.weight"))?);
            biases.push(get(format!("layer{l}.bias"))?.into_data());
        }
        let mut state = Self::from_weights(cfg, weights, biases)?;
        if !b.contains("layer0.adam_m.weight") {
            return Ok(state);
        }
        for (l, layer) in state.layers.iter_mut().enumerate() {
            for kind in ["param", "adam_m", "adam_v"] {
                let p = if kind == "param" { format!("layer{l}") } else { format!("layer{l}.{kind}") };
                let target = match kind {
                    "param" => &mut layer.params,
                    "adam_m" => &mut layer.m,
                    _ => &mut layer.v,
                };
                for (field, dst) in [
                    ("weight", &mut target.w),
                    ("bias", &mut target.bias),
                    ("lora_a", &mut target.lora_a),
                    ("lora_b", &mut target.lora_b),
                    ("s_w", &mut target.s_w),
                    ("s_a", &mut target.s_a),
                ] {
                    let src = get(format!("{p}.{field}"))?;
                    if src.len() != dst.len() {
                        return Err(QatError::Config(format!(
                            "{p}.{field} has {} values, expected {}",
                            src.len(),
                            dst.len()
                        )));
                    }
                    *dst = src.into_data();
                }
            }
        }
        state.step = b
            .meta
            .get("step")
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|e| QatError::Config(format!("checkpoint step: {e}")))?
            .unwrap_or(0);
        Ok(state)
    }
}

fn initial_weight_scales(w: &Tensor<f32>, cfg: &QatConfig) -> Vec<f32> {
    let qc = QuantConfig {
        granularity: if cfg.per_channel_weights {
            Granularity::PerChannel(0)
        } else {
            Granularity::PerTensor
        },
        ..QuantConfig::weights(cfg.bits_w)
    };
    match compute_qparams(w, &qc) {
        Ok((qp, _)) => qp.scale,
        Err(_) => vec![1.0; if cfg.per_channel_weights { w.shape()[0] } else { 1 }],
    }
}
