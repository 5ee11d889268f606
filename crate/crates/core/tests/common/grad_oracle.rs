//! Finite-difference oracle for the QAT head.
//!
//! The shadow model recomputes the head in f64 from scratch. Quantizers are
//! linearized at the base point: for each element the rounding residual
//! `round(v) - v` (or the saturation level) and, for data-calibrated
//! quantizers, the scale and zero point are frozen. Around that point the
//! shadow is smooth, and its exact derivatives are what the straight-through
//! and LSQ estimators define. Central differences of the shadow are therefore
//! the reference for the analytic backward pass.

use qreli_core::qat::{backward, forward, QatConfig, QatState};
use qreli_core::quantize::{compute_qparams, qrange, Granularity, QuantConfig};
use qreli_core::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct Params64 {
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s_w: Vec<f64>,
    pub s_a: f64,
}

#[derive(Clone, Copy, Debug)]
enum Elem {
    /// `fq(x) = x + s·residual`
    Inside(f64),
    /// `fq(x) = s·level`
    Saturated(f64),
}

#[derive(Clone, Debug)]
enum Frozen {
    Off,
    /// Scale comes from a parameter (LSQ).
    Learned(Vec<Elem>),
    /// Scale fixed at the base point; one scale per group.
    Fixed(Vec<Elem>, Vec<f64>),
}

#[derive(Clone, Debug)]
struct FrozenLayer {
    act: Frozen,
    weight: Frozen,
}

fn round_half_away(v: f64) -> f64 {
    v.signum() * (v.abs() + 0.5).floor()
}

fn freeze(x: &[f64], scales: &[f64], zps: &[i32], qmin: i32, qmax: i32) -> Vec<Elem> {
    let group = x.len() / scales.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = scales[i / group];
            let zp = f64::from(zps[i / group]);
            let ratio = v / s;
            let q = round_half_away(ratio) + zp;
            if q < f64::from(qmin) {
                Elem::Saturated(f64::from(qmin) - zp)
            } else if q > f64::from(qmax) {
                Elem::Saturated(f64::from(qmax) - zp)
            } else {
                Elem::Inside(round_half_away(ratio) - ratio)
            }
        })
        .collect()
}

fn apply(x: &[f64], elems: &[Elem], scales: &[f64]) -> Vec<f64> {
    let group = x.len() / scales.len();
    x.iter()
        .zip(elems)
        .enumerate()
        .map(|(i, (&v, e))| {
            let s = scales[i / group];
            match *e {
                Elem::Inside(r) => v + s * r,
                Elem::Saturated(level) => s * level,
            }
        })
        .collect()
}

fn gelu(z: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * z * (1.0 + (k * (z + 0.044715 * z.powi(3))).tanh())
}

fn fixed_qparams(x: &[f64], rows: usize, qc: &QuantConfig) -> (Vec<f64>, Vec<i32>, i32, i32) {
    let t = Tensor::new(vec![rows, x.len() / rows], x.iter().map(|&v| v as f32).collect()).unwrap();
    let (qp, _) = compute_qparams(&t, qc).unwrap();
    (qp.scale.iter().map(|&s| f64::from(s)).collect(), qp.zero_point, qp.qmin, qp.qmax)
}

/// Shadow forward. With `frozen = None` the quantizer decisions are taken at
/// this point and returned.
fn shadow(
    cfg: &QatConfig,
    params: &[Params64],
    x: &[f64],
    rows: usize,
    frozen: Option<&[FrozenLayer]>,
) -> (Vec<f64>, Vec<FrozenLayer>) {
    let mut h = x.to_vec();
    let mut decisions = Vec::new();
    let c = f64::from(cfg.lora_alpha) / cfg.lora_rank as f64;
    let last = params.len() - 1;
    for (l, p) in params.iter().enumerate() {
        let din = cfg.layer_dims[l];
        let dout = cfg.layer_dims[l + 1];
        let r = cfg.lora_rank;
        let fl = match frozen {
            Some(f) => f[l].clone(),
            None => {
                let act = if cfg.bits_a >= 32 {
                    Frozen::Off
                } else if cfg.use_lsq {
                    let (qmin, qmax) = qrange(cfg.bits_a, true);
                    Frozen::Learned(freeze(&h, &[p.s_a], &[0], qmin, qmax))
                } else {
                    let (s, zp, qmin, qmax) = fixed_qparams(&h, rows, &QuantConfig::activations(cfg.bits_a));
                    Frozen::Fixed(freeze(&h, &s, &zp, qmin, qmax), s)
                };
                let weight = if cfg.bits_w >= 32 {
                    Frozen::Off
                } else if cfg.use_lsq {
                    let (qmin, qmax) = qrange(cfg.bits_w, true);
                    Frozen::Learned(freeze(&p.w, &p.s_w, &vec![0; p.s_w.len()], qmin, qmax))
                } else {
                    let qc = QuantConfig {
                        granularity: if cfg.per_channel_weights {
                            Granularity::PerChannel(0)
                        } else {
                            Granularity::PerTensor
                        },
                        ..QuantConfig::weights(cfg.bits_w)
                    };
                    let (s, zp, qmin, qmax) = fixed_qparams(&p.w, dout, &qc);
                    Frozen::Fixed(freeze(&p.w, &s, &zp, qmin, qmax), s)
                };
                FrozenLayer { act, weight }
            }
        };
        let hq = match &fl.act {
            Frozen::Off => h.clone(),
            Frozen::Learned(e) => apply(&h, e, &[p.s_a]),
            Frozen::Fixed(e, s) => apply(&h, e, s),
        };
        let wq = match &fl.weight {
            Frozen::Off => p.w.clone(),
            Frozen::Learned(e) => apply(&p.w, e, &p.s_w),
            Frozen::Fixed(e, s) => apply(&p.w, e, s),
        };
        let mut z = vec![0.0; rows * dout];
        for bi in 0..rows {
            let mut u = vec![0.0; r];
            for (k, uk) in u.iter_mut().enumerate() {
                *uk = (0..din).map(|i| h[bi * din + i] * p.a[k * din + i]).sum();
            }
            for o in 0..dout {
                let base: f64 = (0..din).map(|i| hq[bi * din + i] * wq[o * din + i]).sum();
                let lora: f64 = (0..r).map(|k| u[k] * p.b[o * r + k]).sum();
                z[bi * dout + o] = base + p.bias[o] + c * lora;
            }
        }
        h = if l < last { z.iter().map(|&v| gelu(v)).collect() } else { z };
        decisions.push(fl);
    }
    (h, decisions)
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn params64(state: &QatState) -> Vec<Params64> {
    state
        .layers
        .iter()
        .map(|l| Params64 {
            w: to64(&l.params.w),
            bias: to64(&l.params.bias),
            a: to64(&l.params.lora_a),
            b: to64(&l.params.lora_b),
            s_w: to64(&l.params.s_w),
            s_a: f64::from(l.params.s_a[0]),
        })
        .collect()
}

fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic.iter().zip(reference).map(|(a, r)| (a - r).powi(2)).sum::<f64>().sqrt();
    let norm = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-10 && an < 1e-10 {
        0.0
    } else {
        diff / norm.max(1e-10)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub label: String,
    /// `(tensor name, relative error)` for every checked tensor.
    pub errors: Vec<(String, f64)>,
    pub saturated_fraction: f64,
}

impl GradCheck {
    pub fn worst(&self) -> (String, f64) {
        self.errors
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |w, e| if e.1 > w.1 { e } else { w })
    }
}

enum Which {
    W,
    Bias,
    A,
    B,
    Sw,
    Sa,
}

fn param_mut<'a>(p: &'a mut Params64, which: &Which) -> &'a mut [f64] {
    match which {
        Which::W => &mut p.w,
        Which::Bias => &mut p.bias,
        Which::A => &mut p.a,
        Which::B => &mut p.b,
        Which::Sw => &mut p.s_w,
        Which::Sa => std::slice::from_mut(&mut p.s_a),
    }
}

/// Compares `backward` against central differences of the shadow model for
/// the scalar loss `Σ cot · y`.
pub fn check_gradients(label: &str, cfg: &QatConfig, state: &QatState, x: &Tensor<f32>, cot: &Tensor<f32>) -> GradCheck {
    let rows = x.shape()[0];
    let (_, tape) = forward(state, cfg, x).expect("forward");
    let grads = backward(&tape, cot).expect("backward");

    let base = params64(state);
    let x64 = to64(x.data());
    let c64 = to64(cot.data());
    let (_, frozen) = shadow(cfg, &base, &x64, rows, None);
    let loss = |p: &[Params64]| -> f64 {
        let (y, _) = shadow(cfg, p, &x64, rows, Some(&frozen));
        y.iter().zip(&c64).map(|(a, b)| a * b).sum()
    };

    let mut saturated = 0usize;
    let mut total = 0usize;
    for f in &frozen {
        for fr in [&f.act, &f.weight] {
            if let Frozen::Learned(e) | Frozen::Fixed(e, _) = fr {
                total += e.len();
                saturated += e.iter().filter(|e| matches!(e, Elem::Saturated(_))).count();
            }
        }
    }

    let mut errors = Vec::new();
    let learn_scales = cfg.use_lsq;
    for (l, g) in grads.layers.iter().enumerate() {
        let din = cfg.layer_dims[l];
        let dout = cfg.layer_dims[l + 1];
        let mut checks = vec![
            ("w", Which::W, to64(&g.w)),
            ("bias", Which::Bias, to64(&g.bias)),
            ("lora_a", Which::A, to64(&g.lora_a)),
            ("lora_b", Which::B, to64(&g.lora_b)),
        ];
        if learn_scales && cfg.bits_w < 32 {
            checks.push(("s_w", Which::Sw, to64(&g.s_w)));
        }
        if learn_scales && cfg.bits_a < 32 {
            checks.push(("s_a", Which::Sa, to64(&g.s_a)));
        }
        for (name, which, analytic) in checks {
            let n = param_mut(&mut base.clone()[l], &which).len();
            let mut fd = vec![0.0; n];
            for (k, slot) in fd.iter_mut().enumerate() {
                let center = param_mut(&mut base.clone()[l], &which)[k];
                let is_scale = matches!(which, Which::Sw | Which::Sa);
                let h = if is_scale { 1e-3 * center } else { 1e-3 };
                let mut plus = base.clone();
                param_mut(&mut plus[l], &which)[k] = center + h;
                let mut minus = base.clone();
                param_mut(&mut minus[l], &which)[k] = center - h;
                *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
            // LSQ step sizes get the 1/sqrt(N·Qmax) gradient scale.
            if matches!(which, Which::Sw) {
                let (_, qmax) = qrange(cfg.bits_w, true);
                let group = (din * dout) / n;
                let g = 1.0 / ((group as f64) * f64::from(qmax)).sqrt();
                fd.iter_mut().for_each(|v| *v *= g);
            }
            if matches!(which, Which::Sa) {
                let (_, qmax) = qrange(cfg.bits_a, true);
                let g = 1.0 / ((rows * din) as f64 * f64::from(qmax)).sqrt();
                fd.iter_mut().for_each(|v| *v *= g);
            }
            errors.push((format!("layer{l}.{name}"), rel_err(&analytic, &fd)));
        }
    }
    GradCheck {
        label: label.to_string(),
        errors,
        saturated_fraction: if total == 0 { 0.0 } else { saturated as f64 / total as f64 },
    }
}

/// Seeded toy head for gradient checking. With LSQ, even seeds use generous
/// step sizes (interior regime) and odd seeds shrink them so a large share of
/// weights and activations saturate. Every fifth seed uses data-calibrated
/// quantizers instead.
pub fn gradient_case(seed: u64) -> (String, QatConfig, QatState, Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed).fork(77);
    let n_layers = 1 + rng.index(3);
    let dims: Vec<usize> = (0..=n_layers).map(|_| 2 + rng.index(5)).collect();
    let bits_w = [3, 4, 8][rng.index(3)];
    let bits_a = [4, 8, 32][rng.index(3)];
    let use_lsq = seed % 5 != 4;
    let rows = 3 + rng.index(4);
    let cfg = QatConfig {
        layer_dims: dims.clone(),
        bits_w,
        bits_a,
        use_lsq,
        per_channel_weights: seed % 3 == 0,
        lora_rank: 1 + rng.index(3),
        lora_alpha: rng.uniform_range(0.5, 4.0) as f32,
        lr_base: 1e-3,
        lr_lsq_scale: 1e-3,
        optimizer: Default::default(),
        steps: 1,
        batch: rows,
        unique_samples: qreli_core::qat::UniqueSamples::Count(1),
        distill: qreli_core::qat::Distill::None,
        seed,
        init: qreli_core::qat::HeadInit::Random,
        decay_lora: true,
    };
    let x = rng.normal_tensor(vec![rows, dims[0]], 0.0, 1.0);
    let mut state = QatState::init(&cfg).unwrap();
    state.calibrate_activations(&cfg, &x).unwrap();
    let interior = seed % 2 == 0;
    for layer in &mut state.layers {
        for b in &mut layer.params.bias {
            *b = rng.normal(0.0, 0.1) as f32;
        }
        for b in &mut layer.params.lora_b {
            *b = rng.normal(0.0, 0.3) as f32;
        }
        let factor = |rng: &mut Rng| {
            if interior {
                rng.uniform_range(1.05, 1.6)
            } else {
                rng.uniform_range(0.15, 0.45)
            }
        };
        for s in &mut layer.params.s_w {
            *s = (f64::from(*s) * factor(&mut rng)) as f32;
        }
        let f = factor(&mut rng);
        layer.params.s_a[0] = (f64::from(layer.params.s_a[0]) * f) as f32;
    }
    let cot = rng.normal_tensor(vec![rows, *dims.last().unwrap()], 0.0, 1.0);
    let label = format!(
        "seed={seed} dims={dims:?} w{bits_w}a{bits_a} lsq={use_lsq} per_channel={} {}",
        cfg.per_channel_weights,
        match (use_lsq, interior) {
            (false, _) => "calibrated",
            (true, true) => "interior",
            (true, false) => "saturated",
        }
    );
    (label, cfg, state, x, cot)
}
