use super::{Gradients, QatConfig, QatState, MIN_SCALE};

struct Group {
    lr: f64,
    weight_decay: f64,
}

/// AdamW with decoupled weight decay.
///
/// `W`, bias and the LoRA factors use `lr_base`; step sizes use
/// `lr_lsq_scale` and are re-clamped to at least [`MIN_SCALE`]. Weight decay
/// applies to `W` (and LoRA when `decay_lora`), never to biases or scales.
pub fn adamw_step(state: &mut QatState, grads: &Gradients, cfg: &QatConfig) {
    let opt = cfg.optimizer;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - f64::from(opt.beta1).powi(t);
    let bc2 = 1.0 - f64::from(opt.beta2).powi(t);
    let (b1, b2, eps) = (f64::from(opt.beta1), f64::from(opt.beta2), f64::from(opt.eps));

    let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], group: Group| {
        for i in 0..p.len() {
            let gi = f64::from(g[i]);
            let mut pi = f64::from(p[i]);
            pi -= group.lr * group.weight_decay * pi;
            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pi -= group.lr * m_hat / (v_hat.sqrt() + eps);
            p[i] = pi as f32;
        }
    };

    let lr = f64::from(cfg.lr_base);
    let lr_s = f64::from(cfg.lr_lsq_scale);
    let wd = f64::from(opt.weight_decay);
    let lora_wd = if cfg.decay_lora { wd } else { 0.0 };
    for (layer, g) in state.layers.iter_mut().zip(&grads.layers) {
        let (p, m, v) = (&mut layer.params, &mut layer.m, &mut layer.v);
        update(&mut p.w, &g.w, &mut m.w, &mut v.w, Group { lr, weight_decay: wd });
        update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, Group { lr, weight_decay: 0.0 });
        update(&mut p.lora_a, &g.lora_a, &mut m.lora_a, &mut v.lora_a, Group { lr, weight_decay: lora_wd });
        update(&mut p.lora_b, &g.lora_b, &mut m.lora_b, &mut v.lora_b, Group { lr, weight_decay: lora_wd });
        update(&mut p.s_w, &g.s_w, &mut m.s_w, &mut v.s_w, Group { lr: lr_s, weight_decay: 0.0 });
        update(&mut p.s_a, &g.s_a, &mut m.s_a, &mut v.s_a, Group { lr: lr_s, weight_decay: 0.0 });
        for s in p.s_w.iter_mut().chain(p.s_a.iter_mut()) {
            *s = s.max(MIN_SCALE);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qat::tests::toy_config;
    use crate::qat::LayerTensors;
    use crate::tensor::Tensor;

    fn grads_filled(state: &QatState, value: f32) -> Gradients {
        let layers = state
            .layers
            .iter()
            .map(|l| {
                let mut g = LayerTensors::zeros_like(&l.params);
                for v in [&mut g.w, &mut g.bias, &mut g.lora_a, &mut g.lora_b, &mut g.s_w, &mut g.s_a] {
                    v.iter_mut().for_each(|x| *x = value);
                }
                g
            })
            .collect();
        Gradients {
            layers,
            input: Tensor::zeros(vec![0, 0]),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = toy_config();
        let mut s = QatState::init(&cfg).unwrap();
        let before = s.layers[0].params.clone();
        let g = grads_filled(&s, 0.0);
        adamw_step(&mut s, &g, &cfg);
        assert_eq!(s.layers[0].params, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = toy_config();
        let mut s = QatState::init(&cfg).unwrap();
        let before = s.layers[0].params.clone();
        let g = grads_filled(&s, 1.0);
        adamw_step(&mut s, &g, &cfg);
        let expect = f64::from(cfg.lr_base) / (1.0 + f64::from(cfg.optimizer.eps));
        for (a, b) in s.layers[0].params.w.iter().zip(&before.w) {
            assert!((f64::from(b - a) - expect).abs() < 1e-7);
        }
        let expect_s = f64::from(cfg.lr_lsq_scale);
        assert!((f64::from(before.s_a[0] - s.layers[0].params.s_a[0]) - expect_s).abs() < 1e-7);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut cfg = toy_config();
        cfg.optimizer.weight_decay = 0.1;
        let mut s = QatState::init(&cfg).unwrap();
        let before = s.layers[0].params.clone();
        let g = grads_filled(&s, 0.0);
        adamw_step(&mut s, &g, &cfg);
        let shrink = 1.0 - f64::from(cfg.lr_base) * 0.1;
        for (a, b) in s.layers[0].params.w.iter().zip(&before.w) {
            assert!((f64::from(*a) - f64::from(*b) * shrink).abs() < 1e-7);
        }
        assert_eq!(s.layers[0].params.bias, before.bias);
    }

    #[test]
    fn scales_stay_positive() {
        let mut cfg = toy_config();
        cfg.lr_lsq_scale = 10.0;
        let mut s = QatState::init(&cfg).unwrap();
        let g = grads_filled(&s, 1.0);
        adamw_step(&mut s, &g, &cfg);
        assert_eq!(s.layers[0].params.s_w, vec![MIN_SCALE]);
        assert_eq!(s.layers[0].params.s_a, vec![MIN_SCALE]);
    }
}
