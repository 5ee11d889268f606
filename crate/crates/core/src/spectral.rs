//! 2D Fourier analysis of token feature maps.
//!
//! Tokens of each sample are laid out on their patch grid, transformed per
//! channel with an unnormalized 2D DFT, reduced to magnitudes, averaged over
//! channels and samples, and finally shifted so DC sits at
//! `(g_h / 2, g_w / 2)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, TensorBundle};
use crate::quantize::{compute_qparams, fake_quantize, QuantConfig, QuantError};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_EPSILON: f32 = 1e-9;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("bad grid spec {0:?}, expected e.g. \"7x7\"")]
    GridSpec(String),
    #[error("epsilon must be positive")]
    Epsilon,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub fn parse_grid(spec: &str) -> Result<(usize, usize), SpectralError> {
    let bad = || SpectralError::GridSpec(spec.to_string());
    let (h, w) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Patch-token features `N×T×D` with `T = g_h·g_w` (class token already removed).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    pub tokens: Tensor<f32>,
    pub grid: (usize, usize),
}

impl FeatureMapSet {
    pub fn new(tokens: Tensor<f32>, grid: (usize, usize)) -> Result<Self, SpectralError> {
        let set = Self { tokens, grid };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        let [_, t, _] = self.tokens.shape() else {
            return Err(SpectralError::GridMismatch(format!(
                "tokens must be N×T×D, got {:?}",
                self.tokens.shape()
            )));
        };
        if *t != self.grid.0 * self.grid.1 {
            return Err(SpectralError::GridMismatch(format!(
                "{t} tokens do not fill a {}x{} grid",
                self.grid.0, self.grid.1
            )));
        }
        self.tokens.ensure_finite()?;
        Ok(())
    }

    /// Reads `tokens` and the grid, taken from `grid` if given, else `meta.grid`.
    pub fn from_bundle(b: &TensorBundle, grid: Option<(usize, usize)>) -> Result<Self, SpectralError> {
        let grid = match (grid, b.meta.get("grid")) {
            (Some(g), _) => g,
            (None, Some(spec)) => parse_grid(spec)?,
            (None, None) => return Err(SpectralError::GridSpec("<missing>".into())),
        };
        Self::new(b.f32("tokens")?.clone(), grid)
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.tokens.shape();
        (s[0], s[1], s[2])
    }
}

/// DC-centred magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap {
    pub mag: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RseMap {
    pub rse: Tensor<f32>,
    pub epsilon: f32,
}

struct Fft2 {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    h: usize,
    w: usize,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows: planner.plan_fft_forward(w),
            cols: planner.plan_fft_forward(h),
            h,
            w,
        }
    }

    /// In-place unnormalized 2D DFT of a row-major `h×w` buffer.
    ///
    /// The mean is taken out before transforming and put back on the DC bin,
    /// so a constant map has exactly zero energy outside DC on every grid.
    fn run(&self, buf: &mut [Complex<f64>], column: &mut Vec<Complex<f64>>) {
        let n = buf.len() as f64;
        let mean = buf.iter().map(|c| c.re).sum::<f64>() / n;
        for c in buf.iter_mut() {
            c.re -= mean;
        }
        self.transform(buf, column);
        buf[0].re += mean * n;
    }

    fn transform(&self, buf: &mut [Complex<f64>], column: &mut Vec<Complex<f64>>) {
        for r in buf.chunks_exact_mut(self.w) {
            self.rows.process(r);
        }
        column.resize(self.h, Complex::default());
        for c in 0..self.w {
            for r in 0..self.h {
                column[r] = buf[r * self.w + c];
            }
            self.cols.process(column);
            for r in 0..self.h {
                buf[r * self.w + c] = column[r];
            }
        }
    }
}

/// Moves the zero frequency to `(h/2, w/2)`.
pub fn fftshift(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = map[u * w + v];
        }
    }
    out
}

/// Unshifted magnitude of one `h×w` real map.
pub fn dft_magnitude(map: &[f32], h: usize, w: usize) -> Vec<f64> {
    let fft = Fft2::new(h, w);
    let mut buf: Vec<Complex<f64>> = map.iter().map(|&v| Complex::new(f64::from(v), 0.0)).collect();
    fft.run(&mut buf, &mut Vec::new());
    buf.iter().map(|c| c.norm()).collect()
}

pub fn spectrum(f: &FeatureMapSet) -> Result<SpectrumMap, SpectralError> {
    f.validate()?;
    let (n, t, d) = f.dims();
    let (h, w) = f.grid;
    let fft = Fft2::new(h, w);
    let mut acc = vec![0.0f64; t];
    let mut buf = vec![Complex::default(); t];
    let mut column = Vec::new();
    let data = f.tokens.data();
    for s in 0..n {
        let sample = &data[s * t * d..(s + 1) * t * d];
        let mut per_sample = vec![0.0f64; t];
        for ch in 0..d {
            for tok in 0..t {
                buf[tok] = Complex::new(f64::from(sample[tok * d + ch]), 0.0);
            }
            fft.run(&mut buf, &mut column);
            for (a, c) in per_sample.iter_mut().zip(&buf) {
                *a += c.norm();
            }
        }
        for (a, p) in acc.iter_mut().zip(&per_sample) {
            *a += p / d.max(1) as f64;
        }
    }
    let mean: Vec<f64> = acc.iter().map(|v| v / n.max(1) as f64).collect();
    let shifted = fftshift(&mean, h, w);
    Ok(SpectrumMap {
        mag: Tensor::new(vec![h, w], shifted.into_iter().map(|v| v as f32).collect())?,
    })
}

/// `|quant - base| / (base + eps)` per frequency bin.
pub fn rse(base: &SpectrumMap, quant: &SpectrumMap, epsilon: f32) -> Result<RseMap, SpectralError> {
    if !(epsilon > 0.0) {
        return Err(SpectralError::Epsilon);
    }
    if base.mag.shape() != quant.mag.shape() {
        return Err(SpectralError::GridMismatch(format!(
            "{:?} vs {:?}",
            base.mag.shape(),
            quant.mag.shape()
        )));
    }
    let eps = f64::from(epsilon);
    let data = base
        .mag
        .data()
        .iter()
        .zip(quant.mag.data())
        .map(|(&b, &q)| ((f64::from(q) - f64::from(b)).abs() / (f64::from(b) + eps)) as f32)
        .collect();
    Ok(RseMap {
        rse: Tensor::new(base.mag.shape().to_vec(), data)?,
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

/// Band of each bin of a shifted `h×w` map: 0 low, 1 mid, 2 high.
///
/// The radius is measured from DC in per-axis normalized coordinates and
/// divided by the largest radius on the grid; bands are `[0,1/3)`,
/// `[1/3,2/3)` and `[2/3,1]`.
pub fn band_labels(h: usize, w: usize) -> Vec<u8> {
    let axis = |i: usize, n: usize| {
        let half = (n / 2).max(1) as f64;
        (i as f64 - (n / 2) as f64) / half
    };
    let radii: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).map(move |j| axis(i, h).hypot(axis(j, w))))
        .collect();
    let rmax = radii.iter().copied().fold(0.0, f64::max);
    radii
        .into_iter()
        .map(|r| {
            let r = if rmax > 0.0 { r / rmax } else { 0.0 };
            if r < 1.0 / 3.0 {
                0
            } else if r < 2.0 / 3.0 {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Mean value per radial band. An empty band reports 0.
pub fn band_energy(map: &Tensor<f32>) -> Result<Bands, SpectralError> {
    let (h, w) = map.dims2()?;
    let labels = band_labels(h, w);
    let mut sum = [0.0f64; 3];
    let mut count = [0usize; 3];
    for (&v, &b) in map.data().iter().zip(&labels) {
        sum[b as usize] += f64::from(v);
        count[b as usize] += 1;
    }
    let mean = |b: usize| if count[b] > 0 { sum[b] / count[b] as f64 } else { 0.0 };
    Ok(Bands {
        low: mean(0),
        mid: mean(1),
        high: mean(2),
    })
}

/// Proxy quantized maps: fake-quantizes exported FP32 tokens per sample.
pub fn proxy_quantize(f: &FeatureMapSet, cfg: &QuantConfig) -> Result<FeatureMapSet, SpectralError> {
    let (n, t, d) = f.dims();
    let mut out = Vec::with_capacity(n * t * d);
    for s in 0..n {
        let sample = Tensor::new(vec![t, d], f.tokens.data()[s * t * d..(s + 1) * t * d].to_vec())?;
        let (qp, _) = compute_qparams(&sample, cfg)?;
        out.extend_from_slice(fake_quantize(&sample, &qp)?.data());
    }
    FeatureMapSet::new(Tensor::new(vec![n, t, d], out)?, f.grid)
}
