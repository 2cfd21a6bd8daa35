use crate::error::Result;
use crate::numcore::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments, one buffer per parameter in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update using the gradients stored on each parameter (missing
/// gradients count as zero). Weight decay is applied straight to the
/// weights and never enters the moment estimates.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            *w -= cfg.lr * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, lr: 0.1, ..Default::default() };
        adamw_step(&mut p, &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), before.get("w").unwrap().data());
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.05, lr: 0.1, ..Default::default() };
        adamw_step(&mut p, &mut st, &cfg).unwrap();
        let got = p.get("w").unwrap().data();
        for (g, w) in got.iter().zip([1.0, -2.0, 3.0]) {
            assert_eq!(*g, w * (1.0 - 0.005));
        }
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let mut p = store(&[0.5]);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        for _ in 0..2 {
            p.zero_grads();
            p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
            adamw_step(&mut p, &mut st, &cfg).unwrap();
        }
        // step 1: m=0.1, v=0.001, mhat=1, vhat=1 ; step 2: m=0.19, v=0.001999,
        // mhat=0.19/0.19=1, vhat=0.001999/0.001999=1
        let expected = 0.5 - 2.0 * 0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = store(&[1.0, 2.0]);
        p.get_mut("w").unwrap().accumulate_grad(&[3.0, -1.0]).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        adamw_step(&mut p, &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);
    }
}
