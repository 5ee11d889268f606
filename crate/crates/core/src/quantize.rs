//! Fake quantization: quantize, clamp, dequantize, all in f32.
//!
//! `out = (clamp(round(x / scale + zp), qmin, qmax) - zp) * scale`, with
//! rounding half away from zero. The division is carried out in f64 so that
//! values already on the grid map back to themselves exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit-width {0} outside 2..=16")]
    Bits(u32),
    #[error("percentile {0} outside (0, 1]")]
    Percentile(f64),
    #[error("cannot calibrate an empty tensor")]
    Empty,
    #[error("channel axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("tensor shape {shape:?} does not fit parameters with {groups} groups on axis {axis:?}")]
    GroupMismatch {
        shape: Vec<usize>,
        groups: usize,
        axis: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Calibration {
    MinMax,
    /// Quantile `p` of `|x|` (symmetric) or of `x` (asymmetric, with `1 - p` for the low end).
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub calibration: Calibration,
}

impl QuantConfig {
    pub fn new(
        bits: u32,
        symmetric: bool,
        granularity: Granularity,
        calibration: Calibration,
    ) -> Result<Self, QuantError> {
        let cfg = Self {
            bits,
            symmetric,
            granularity,
            calibration,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-tensor MinMax, symmetric. The usual weight setup.
    pub fn weights(bits: u32) -> Self {
        Self {
            bits,
            symmetric: true,
            granularity: Granularity::PerTensor,
            calibration: Calibration::MinMax,
        }
    }

    /// Per-tensor MinMax, asymmetric. The usual activation setup.
    pub fn activations(bits: u32) -> Self {
        Self {
            symmetric: false,
            ..Self::weights(bits)
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=16).contains(&self.bits) {
            return Err(QuantError::Bits(self.bits));
        }
        if let Calibration::Percentile(p) = self.calibration {
            if !(p > 0.0 && p <= 1.0) {
                return Err(QuantError::Percentile(p));
            }
        }
        Ok(())
    }

    pub fn qrange(&self) -> (i32, i32) {
        qrange(self.bits, self.symmetric)
    }
}

/// Integer range for a bit-width: `[-(2^(b-1)-1), 2^(b-1)-1]` symmetric, `[0, 2^b-1]` otherwise.
pub fn qrange(bits: u32, symmetric: bool) -> (i32, i32) {
    if symmetric {
        let qmax = (1i32 << (bits - 1)) - 1;
        (-qmax, qmax)
    } else {
        (0, ((1i64 << bits) - 1) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<i32>,
    pub qmin: i32,
    pub qmax: i32,
    /// Channel axis for per-channel parameters, `None` for per-tensor.
    pub axis: Option<usize>,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32, qmin: i32, qmax: i32) -> Self {
        Self {
            scale: vec![scale],
            zero_point: vec![zero_point],
            qmin,
            qmax,
            axis: None,
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.qmin >= self.qmax {
            return Err(QuantError::InvalidParams(format!(
                "qmin {} >= qmax {}",
                self.qmin, self.qmax
            )));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(QuantError::InvalidParams("scale/zero_point length".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(QuantError::InvalidParams(format!("scale {s} must be positive")));
        }
        if self.axis.is_none() && self.scale.len() != 1 {
            return Err(QuantError::InvalidParams("per-tensor params need one group".into()));
        }
        Ok(())
    }

    /// Representable output interval for group `g`.
    pub fn output_range(&self, g: usize) -> (f32, f32) {
        let s = self.scale[g];
        let zp = self.zero_point[g];
        ((self.qmin - zp) as f32 * s, (self.qmax - zp) as f32 * s)
    }
}

/// Calibration warning: a group whose range collapsed to zero got scale 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateRange {
    pub group: usize,
}

/// Quantizes one value. Returns the dequantized value and whether the
/// rounded integer fell inside `[qmin, qmax]` before clamping.
#[inline]
pub fn fake_quantize_value(x: f32, scale: f32, zero_point: i32, qmin: i32, qmax: i32) -> (f32, bool) {
    let q = (f64::from(x) / f64::from(scale) + f64::from(zero_point)).round();
    let inside = q >= f64::from(qmin) && q <= f64::from(qmax);
    let q = q.clamp(f64::from(qmin), f64::from(qmax)) as i32;
    ((q - zero_point) as f32 * scale, inside)
}

/// Yields the group index of every flat element of a tensor with `shape`.
fn group_of(shape: &[usize], axis: Option<usize>) -> impl Fn(usize) -> usize {
    let (stride, extent) = match axis {
        Some(a) => (shape[a + 1..].iter().product::<usize>(), shape[a]),
        None => (1, 1),
    };
    move |i| (i / stride) % extent
}

fn check_groups(shape: &[usize], qp: &QuantParams) -> Result<(), QuantError> {
    let groups = match qp.axis {
        None => 1,
        Some(a) if a < shape.len() => shape[a],
        Some(_) => 0,
    };
    if groups != qp.scale.len() {
        return Err(QuantError::GroupMismatch {
            shape: shape.to_vec(),
            groups: qp.scale.len(),
            axis: qp.axis,
        });
    }
    Ok(())
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Derives scale and zero-point per group from the tensor's range.
///
/// Asymmetric ranges are widened to contain 0 so that zero stays exactly
/// representable and the zero-point never has to be clamped.
pub fn compute_qparams(
    t: &Tensor<f32>,
    cfg: &QuantConfig,
) -> Result<(QuantParams, Vec<DegenerateRange>), QuantError> {
    cfg.validate()?;
    if t.is_empty() {
        return Err(QuantError::Empty);
    }
    if let Some(i) = t.first_non_finite() {
        return Err(QuantError::NonFinite(i));
    }
    let shape = t.shape();
    let (axis, groups) = match cfg.granularity {
        Granularity::PerTensor => (None, 1),
        Granularity::PerChannel(a) if a < shape.len() => (Some(a), shape[a]),
        Granularity::PerChannel(a) => {
            return Err(QuantError::Axis {
                axis: a,
                shape: shape.to_vec(),
            })
        }
    };
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); groups];
    let group = group_of(shape, axis);
    for (i, &v) in t.data().iter().enumerate() {
        members[group(i)].push(f64::from(v));
    }

    let (qmin, qmax) = cfg.qrange();
    let mut scale = Vec::with_capacity(groups);
    let mut zero_point = Vec::with_capacity(groups);
    let mut warnings = Vec::new();
    for (g, vals) in members.iter_mut().enumerate() {
        let (s, zp) = if cfg.symmetric {
            let amax = match cfg.calibration {
                Calibration::MinMax => vals.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Calibration::Percentile(p) => {
                    let mut abs: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
                    abs.sort_by(f64::total_cmp);
                    quantile_sorted(&abs, p)
                }
            };
            (amax / f64::from(qmax), 0)
        } else {
            let (lo, hi) = match cfg.calibration {
                Calibration::MinMax => vals
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
                Calibration::Percentile(p) => {
                    vals.sort_by(f64::total_cmp);
                    (quantile_sorted(vals, 1.0 - p), quantile_sorted(vals, p))
                }
            };
            let (lo, hi) = (lo.min(0.0), hi.max(0.0));
            let s = (hi - lo) / f64::from(qmax - qmin);
            let zp = if s > 0.0 {
                ((-lo / s).round() as i64).clamp(i64::from(qmin), i64::from(qmax)) as i32
            } else {
                0
            };
            (s, zp)
        };
        let s = s as f32;
        if s > 0.0 && s.is_finite() {
            scale.push(s);
            zero_point.push(zp);
        } else {
            log::warn!("degenerate quantization range in group {g}; using scale 1.0");
            warnings.push(DegenerateRange { group: g });
            scale.push(1.0);
            zero_point.push(if cfg.symmetric { 0 } else { qmin });
        }
    }
    Ok((
        QuantParams {
            scale,
            zero_point,
            qmin,
            qmax,
            axis,
        },
        warnings,
    ))
}

pub fn fake_quantize(t: &Tensor<f32>, qp: &QuantParams) -> Result<Tensor<f32>, QuantError> {
    qp.validate()?;
    check_groups(t.shape(), qp)?;
    let group = group_of(t.shape(), qp.axis);
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = group(i);
            fake_quantize_value(x, qp.scale[g], qp.zero_point[g], qp.qmin, qp.qmax).0
        })
        .collect();
    Ok(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub unique_count: usize,
    pub limit: u64,
    pub pass: bool,
}

/// Counts distinct f32 bit patterns; passes when there are at most `2^bits`.
pub fn verify_unique_values(t: &Tensor<f32>, bits: u32) -> VerificationReport {
    let mut patterns: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
    patterns.sort_unstable();
    patterns.dedup();
    let limit = 1u64 << bits.min(63);
    VerificationReport {
        unique_count: patterns.len(),
        limit,
        pass: patterns.len() as u64 <= limit,
    }
}
