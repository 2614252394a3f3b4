//! AdamW with decoupled weight decay, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::numcore::{ParamStore, Tensor};
use std::collections::BTreeMap;

/// Learning rate at `step` (0-based): a linear ramp reaching `base` at the
/// last warmup step, then a half cosine that reaches 0 at the final step.
pub fn learning_rate(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps + 1);
    if span == 0 {
        return base;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One AdamW update of every parameter.
    pub(crate) fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, h: AdamHyper) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
                vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let (total, warm, base) = (100, 10, 1e-4);
        assert!((learning_rate(0, total, warm, base) - base / 10.0).abs() < 1e-20);
        assert_eq!(learning_rate(warm - 1, total, warm, base), base);
        assert_eq!(learning_rate(warm, total, warm, base), base);
        assert!(learning_rate(total - 1, total, warm, base) <= 1e-9 * base);
        for s in 1..warm {
            assert!(learning_rate(s, total, warm, base) > learning_rate(s - 1, total, warm, base));
        }
        for s in warm + 1..total {
            assert!(learning_rate(s, total, warm, base) <= learning_rate(s - 1, total, warm, base));
        }
        assert_eq!(learning_rate(3, 5, 0, 2.0), 0.5 * 2.0 * (1.0 + (std::f64::consts::PI * 0.75).cos()));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -1.0, 0.0]));
        let mut s = AdamState::new(&p);
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.5, -2.0, 0.0]))]);
        let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        s.update(&mut p, &g, 0.1, h);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6 && w[2] == 0.0);
        let h = AdamHyper { weight_decay: 0.5, ..h };
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        let before = p.get("w").unwrap().data()[2];
        s.update(&mut p, &zero, 0.1, h);
        assert_eq!(before, 0.0);
        assert!(p.get("w").unwrap().data()[0] < 0.9);
    }
}
