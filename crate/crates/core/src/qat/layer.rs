use crate::quantize::{compute_qparams, fake_quantize_value, qrange, QuantConfig};
use crate::tensor::Tensor;

use super::{Layer, LayerTensors, QatConfig, QatError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu(z: f32) -> f32 {
    let z = f64::from(z);
    let t = (SQRT_2_OVER_PI * (z + GELU_C * z * z * z)).tanh();
    (0.5 * z * (1.0 + t)) as f32
}

fn gelu_grad(z: f32) -> f32 {
    let z = f64::from(z);
    let t = (SQRT_2_OVER_PI * (z + GELU_C * z * z * z)).tanh();
    (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * z * z)) as f32
}

/// Result of fake-quantizing one tensor, with what the backward pass needs.
pub(crate) struct Quantized {
    pub wq: Vec<f32>,
    /// STE mask: the rounded value fell inside the clamp range.
    pub pass: Vec<bool>,
    /// `∂fq/∂s` per element before gradient scaling: `round(v) - v` inside,
    /// `qmin` / `qmax` when saturated. Zero unless the scale is learned.
    pub ds: Vec<f32>,
    /// LSQ gradient scale `1 / sqrt(N * Q_max)` per scale group.
    pub grad_scale: f32,
    /// Elements per scale group (a group is a contiguous run).
    pub group_len: usize,
}

impl Quantized {
    fn identity(x: &[f32]) -> Self {
        Self {
            wq: x.to_vec(),
            pass: vec![true; x.len()],
            ds: vec![0.0; x.len()],
            grad_scale: 0.0,
            group_len: x.len().max(1),
        }
    }
}

/// LSQ quantizer with zero-point 0 and a symmetric signed range.
fn lsq(x: &[f32], scales: &[f32], bits: u32) -> Quantized {
    let (qmin, qmax) = qrange(bits, true);
    let group_len = x.len() / scales.len();
    let mut out = Quantized {
        wq: Vec::with_capacity(x.len()),
        pass: Vec::with_capacity(x.len()),
        ds: Vec::with_capacity(x.len()),
        grad_scale: (1.0 / ((group_len as f64) * f64::from(qmax)).sqrt()) as f32,
        group_len,
    };
    for (i, &v) in x.iter().enumerate() {
        let s = scales[i / group_len];
        let (y, inside) = fake_quantize_value(v, s, 0, qmin, qmax);
        let ratio = f64::from(v) / f64::from(s);
        let r = ratio.round();
        let ds = if inside {
            r - ratio
        } else if r < f64::from(qmin) {
            f64::from(qmin)
        } else {
            f64::from(qmax)
        };
        out.wq.push(y);
        out.pass.push(inside);
        out.ds.push(ds as f32);
    }
    out
}

/// Static or dynamic calibrated quantizer: scale taken from the data, detached.
fn calibrated(x: &[f32], rows: usize, cfg: &QuantConfig) -> Quantized {
    let t = Tensor::new(vec![rows, x.len() / rows.max(1)], x.to_vec()).expect("rows divide length");
    let (qp, _) = compute_qparams(&t, cfg).expect("finite, non-empty input");
    let group_len = x.len() / qp.scale.len();
    let mut out = Quantized {
        wq: Vec::with_capacity(x.len()),
        pass: Vec::with_capacity(x.len()),
        ds: vec![0.0; x.len()],
        grad_scale: 0.0,
        group_len,
    };
    for (i, &v) in x.iter().enumerate() {
        let g = i / group_len;
        let (y, inside) = fake_quantize_value(v, qp.scale[g], qp.zero_point[g], qp.qmin, qp.qmax);
        out.wq.push(y);
        out.pass.push(inside);
    }
    out
}

pub(crate) fn quantize_weights(layer: &Layer, cfg: &QatConfig) -> Quantized {
    let w = &layer.params.w;
    if !cfg.quantize_weights() {
        return Quantized::identity(w);
    }
    if cfg.use_lsq {
        return lsq(w, &layer.params.s_w, cfg.bits_w);
    }
    let qc = QuantConfig {
        granularity: if cfg.per_channel_weights {
            crate::quantize::Granularity::PerChannel(0)
        } else {
            crate::quantize::Granularity::PerTensor
        },
        ..QuantConfig::weights(cfg.bits_w)
    };
    calibrated(w, layer.out_dim, &qc)
}

fn quantize_input(layer: &Layer, cfg: &QatConfig, h: &[f32], rows: usize) -> Quantized {
    if !cfg.quantize_activations() {
        return Quantized::identity(h);
    }
    if cfg.use_lsq {
        return lsq(h, &layer.params.s_a, cfg.bits_a);
    }
    calibrated(h, rows, &QuantConfig::activations(cfg.bits_a))
}

/// Per-layer record of the forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    lora_scale: f32,
    h: Vec<f32>,
    hq: Vec<f32>,
    a_pass: Vec<bool>,
    a_ds: Vec<f32>,
    a_grad_scale: f32,
    wq: Vec<f32>,
    w_pass: Vec<bool>,
    w_ds: Vec<f32>,
    w_grad_scale: f32,
    w_group_len: usize,
    n_weight_scales: usize,
    lora_a: Vec<f32>,
    lora_b: Vec<f32>,
    u: Vec<f32>,
    /// Pre-activation output.
    z: Vec<f32>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    layers: Vec<LayerTape>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Parameter gradients per layer plus the gradient w.r.t. the head input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerTensors>,
    pub input: Tensor<f32>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(LayerTensors::all_finite)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn layer_forward(layer: &Layer, cfg: &QatConfig, h: &[f32], rows: usize) -> LayerTape {
    let (din, dout, r) = (layer.in_dim, layer.out_dim, layer.rank);
    let aq = quantize_input(layer, cfg, h, rows);
    let wq = quantize_weights(layer, cfg);
    let c = cfg.lora_scale();
    let p = &layer.params;

    let mut u = vec![0.0f32; rows * r];
    for b in 0..rows {
        let hb = &h[b * din..(b + 1) * din];
        for k in 0..r {
            u[b * r + k] = dot(hb, &p.lora_a[k * din..(k + 1) * din]) as f32;
        }
    }
    let mut z = vec![0.0f32; rows * dout];
    for b in 0..rows {
        let hqb = &aq.wq[b * din..(b + 1) * din];
        let ub = &u[b * r..(b + 1) * r];
        for o in 0..dout {
            let base = dot(hqb, &wq.wq[o * din..(o + 1) * din]);
            let lora = dot(ub, &p.lora_b[o * r..(o + 1) * r]);
            z[b * dout + o] = (base + f64::from(p.bias[o]) + f64::from(c) * lora) as f32;
        }
    }
    LayerTape {
        in_dim: din,
        out_dim: dout,
        rank: r,
        lora_scale: c,
        h: h.to_vec(),
        hq: aq.wq,
        a_pass: aq.pass,
        a_ds: aq.ds,
        a_grad_scale: aq.grad_scale,
        wq: wq.wq,
        w_pass: wq.pass,
        w_ds: wq.ds,
        w_grad_scale: wq.grad_scale,
        w_group_len: wq.group_len,
        n_weight_scales: p.s_w.len(),
        lora_a: p.lora_a.clone(),
        lora_b: p.lora_b.clone(),
        u,
        z,
    }
}

/// Output of one layer (GELU applied when `hidden`).
pub(crate) fn layer_output(layer: &Layer, cfg: &QatConfig, h: &Tensor<f32>, hidden: bool) -> Result<Tensor<f32>, QatError> {
    let rows = h.shape()[0];
    let tape = layer_forward(layer, cfg, h.data(), rows);
    let z = if hidden { tape.z.iter().map(|&v| gelu(v)).collect() } else { tape.z };
    Ok(Tensor::new(vec![rows, layer.out_dim], z)?)
}

fn check_input(state: &super::QatState, x: &Tensor<f32>) -> Result<usize, QatError> {
    let din = state.layers.first().map_or(0, |l| l.in_dim);
    match x.shape() {
        [rows, d] if *d == din => {
            if x.first_non_finite().is_some() {
                return Err(QatError::NumericalDivergence {
                    stage: "input",
                    step: state.step,
                    last_good: None,
                });
            }
            Ok(*rows)
        }
        other => Err(QatError::Shape {
            got: other.to_vec(),
            expected: format!("[batch, {din}]"),
        }),
    }
}

/// Runs the head on `x` (`B×d_in`), returning outputs `B×d_out` and the tape.
pub fn forward(state: &super::QatState, cfg: &QatConfig, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tape), QatError> {
    let rows = check_input(state, x)?;
    let mut tapes = Vec::with_capacity(state.layers.len());
    let mut h = x.data().to_vec();
    let last = state.layers.len() - 1;
    for (l, layer) in state.layers.iter().enumerate() {
        let tape = layer_forward(layer, cfg, &h, rows);
        if l < last {
            h = tape.z.iter().map(|&v| gelu(v)).collect();
        }
        tapes.push(tape);
    }
    let y = tapes[last].z.clone();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(QatError::NumericalDivergence {
            stage: "forward",
            step: state.step,
            last_good: None,
        });
    }
    let dout = state.layers[last].out_dim;
    Ok((
        Tensor::new(vec![rows, dout], y)?,
        Tape {
            batch: rows,
            layers: tapes,
        },
    ))
}

/// Forward pass without keeping a tape.
pub fn forward_features(state: &super::QatState, cfg: &QatConfig, x: &Tensor<f32>) -> Result<Tensor<f32>, QatError> {
    check_input(state, x)?;
    let mut h = x.clone();
    let last = state.layers.len() - 1;
    for (l, layer) in state.layers.iter().enumerate() {
        h = layer_output(layer, cfg, &h, l < last)?;
    }
    if h.first_non_finite().is_some() {
        return Err(QatError::NumericalDivergence {
            stage: "forward",
            step: state.step,
            last_good: None,
        });
    }
    Ok(h)
}

/// Backpropagates `grad_y` (`B×d_out`) through a recorded forward pass.
pub fn backward(tape: &Tape, grad_y: &Tensor<f32>) -> Result<Gradients, QatError> {
    if grad_y.shape() != [tape.batch, tape.out_dim()] {
        return Err(QatError::TapeMismatch(format!(
            "grad_y shape {:?}, tape expects [{}, {}]",
            grad_y.shape(),
            tape.batch,
            tape.out_dim()
        )));
    }
    let rows = tape.batch;
    let mut gz = grad_y.data().to_vec();
    let mut grads: Vec<LayerTensors> = Vec::with_capacity(tape.layers.len());
    let mut grad_input = Vec::new();
    for (l, t) in tape.layers.iter().enumerate().rev() {
        let (din, dout, r) = (t.in_dim, t.out_dim, t.rank);
        let c = f64::from(t.lora_scale);

        let mut g_bias = vec![0.0f32; dout];
        for (o, gb) in g_bias.iter_mut().enumerate() {
            *gb = (0..rows).map(|b| f64::from(gz[b * dout + o])).sum::<f64>() as f32;
        }

        // d wq = gzᵀ · hq ;  d hq = gz · wq
        let mut g_wq = vec![0.0f64; dout * din];
        let mut g_hq = vec![0.0f64; rows * din];
        for b in 0..rows {
            for o in 0..dout {
                let g = f64::from(gz[b * dout + o]);
                if g == 0.0 {
                    continue;
                }
                let hq = &t.hq[b * din..(b + 1) * din];
                let wq = &t.wq[o * din..(o + 1) * din];
                let row_w = &mut g_wq[o * din..(o + 1) * din];
                for i in 0..din {
                    row_w[i] += g * f64::from(hq[i]);
                }
                let row_h = &mut g_hq[b * din..(b + 1) * din];
                for i in 0..din {
                    row_h[i] += g * f64::from(wq[i]);
                }
            }
        }

        let mut g_w = vec![0.0f32; dout * din];
        let mut g_sw = vec![0.0f64; t.n_weight_scales];
        for (k, gw) in g_w.iter_mut().enumerate() {
            if t.w_pass[k] {
                *gw = g_wq[k] as f32;
            }
            g_sw[k / t.w_group_len] += g_wq[k] * f64::from(t.w_ds[k]);
        }
        let g_sw: Vec<f32> = g_sw.iter().map(|v| (v * f64::from(t.w_grad_scale)) as f32).collect();

        let mut g_sa = 0.0f64;
        let mut g_h = vec![0.0f64; rows * din];
        for k in 0..rows * din {
            if t.a_pass[k] {
                g_h[k] = g_hq[k];
            }
            g_sa += g_hq[k] * f64::from(t.a_ds[k]);
        }
        let g_sa = (g_sa * f64::from(t.a_grad_scale)) as f32;

        // LoRA: z += c · u · Bᵀ with u = h · Aᵀ
        let mut g_b = vec![0.0f32; dout * r];
        for o in 0..dout {
            for k in 0..r {
                let s: f64 = (0..rows).map(|b| f64::from(gz[b * dout + o]) * f64::from(t.u[b * r + k])).sum();
                g_b[o * r + k] = (c * s) as f32;
            }
        }
        let mut gu = vec![0.0f64; rows * r];
        for b in 0..rows {
            for k in 0..r {
                let s: f64 = (0..dout)
                    .map(|o| f64::from(gz[b * dout + o]) * f64::from(t.lora_b[o * r + k]))
                    .sum();
                gu[b * r + k] = c * s;
            }
        }
        let mut g_a = vec![0.0f32; r * din];
        for k in 0..r {
            for i in 0..din {
                let s: f64 = (0..rows).map(|b| gu[b * r + k] * f64::from(t.h[b * din + i])).sum();
                g_a[k * din + i] = s as f32;
            }
        }
        for b in 0..rows {
            for k in 0..r {
                let g = gu[b * r + k];
                if g == 0.0 {
                    continue;
                }
                for i in 0..din {
                    g_h[b * din + i] += g * f64::from(t.lora_a[k * din + i]);
                }
            }
        }

        grads.push(LayerTensors {
            w: g_w,
            bias: g_bias,
            lora_a: g_a,
            lora_b: g_b,
            s_w: g_sw,
            s_a: vec![g_sa],
        });

        if l > 0 {
            let prev = &tape.layers[l - 1];
            gz = g_h
                .iter()
                .zip(&prev.z)
                .map(|(&g, &z)| (g * f64::from(gelu_grad(z))) as f32)
                .collect();
        } else {
            grad_input = g_h.iter().map(|&v| v as f32).collect();
        }
    }
    grads.reverse();
    let din = tape.layers[0].in_dim;
    Ok(Gradients {
        layers: grads,
        input: Tensor::new(vec![rows, din], grad_input)?,
    })
}
