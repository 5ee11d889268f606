//! Quantization-reliability toolkit.
//!
//! Works on tensors exported from a vision-language model (image and text
//! embeddings, logits, token feature maps) and provides:
//!
//! * fake quantization (quantize, clamp, dequantize) with range calibration
//!   and a unique-value verifier,
//! * a desk-scale quantization-aware training loop for a linear head with a
//!   parallel LoRA path, STE and LSQ gradients,
//! * zero-shot classification, calibration metrics and temperature fitting,
//! * zero-shot OOD scorers with exact AUROC / FPR@95TPR,
//! * 2D Fourier spectra of feature maps and relative spectral error.

pub mod bundle;
pub mod fixtures;
pub mod fmt;
pub mod metrics;
pub mod ood;
pub mod qat;
pub mod quantize;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod zeroshot;

pub use bundle::{read_bundle, write_bundle, BundleError, TensorBundle};
pub use rng::Rng;
pub use tensor::{cosine_normalize, Tensor, TensorError};
