use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay: each step first shrinks the parameter
/// by `lr * weight_decay * p`, then applies the bias-corrected Adam update.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    first: Vec<Option<Tensor<S>>>,
    second: Vec<Option<Tensor<S>>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the trainable-parameter gradients in `grads`.
    /// Parameters without a gradient still receive weight decay when trainable.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
        let pairs: Vec<(ParamId, Tensor<S>)> = grads.params().map(|(p, g)| (p, g.clone())).collect();
        self.step_with(store, &pairs, lr)
    }

    pub fn step_with(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if p.value.shape() != g.shape() {
                return Err(NnError::shape(
                    "adam_step",
                    format!("{}: param {:?} vs grad {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size = S::from_f64_lossy(lr / bc1);
        let inv_sqrt_bc2 = S::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);
        let decay = S::one() - S::from_f64_lossy(lr * c.weight_decay);

        for (id, g) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                continue;
            }
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = param
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &gv) in iter {
                *p *= decay;
                *m = b1 * *m + one_b1 * gv;
                *v = b2 * *v + one_b2 * gv * gv;
                *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec(&[1], vec![v]).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut s, id) = store_with(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step_with(&mut s, &[(id, Tensor::zeros(&[1]))], 0.1).unwrap();
        }
        assert_eq!(s.get(id).value.data()[0], 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step_with(&mut s, &[(id, Tensor::full(&[1], 1.0))], 0.1).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(id).value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn decay_only_path_scales_parameter() {
        let (mut s, id) = store_with(2.0);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 1e-5,
            ..AdamConfig::default()
        });
        adam.step_with(&mut s, &[(id, Tensor::zeros(&[1]))], 1.0).unwrap();
        assert!((s.get(id).value.data()[0] - 2.0 * (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, id) = store_with(2.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step_with(&mut s, &[(id, Tensor::zeros(&[2]))], 1.0).is_err());
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut s, id) = store_with(2.0);
        s.get_mut(id).trainable = false;
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        adam.step_with(&mut s, &[(id, Tensor::full(&[1], 1.0))], 1.0).unwrap();
        assert_eq!(s.get(id).value.data()[0], 2.0);
    }
}
