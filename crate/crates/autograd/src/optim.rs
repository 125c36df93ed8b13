//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::float::Float;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` belongs to parameter `i` of `store`;
    /// frozen parameters and missing gradients are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let c = self.config;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let wd = T::of(c.weight_decay);
        let eps = T::of(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.entry(ParamId(i)).trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let p = store.get_mut(ParamId(i));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]));
        let before = store.get(id).clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..Default::default()
        });
        let grads = vec![Some(Tensor::from_f64(&[3], &[0.3, 0.1, -4.0]))];
        opt.step(&mut store, &grads);
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[0.0, 0.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &[Some(Tensor::from_f64(&[2], &[5.0, -0.2]))]);
        let p = store.get(id).data();
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![
            Some(Tensor::<f64>::from_f64(&[2], &[3.0, 0.0])),
            None,
            Some(Tensor::from_f64(&[1], &[4.0])),
        ];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
