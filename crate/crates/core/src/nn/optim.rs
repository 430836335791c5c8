use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adaptive-moment optimizer settings. A nonzero `weight_decay` gives the
/// decoupled (AdamW) variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Keras-style Adam (epsilon 1e-7, no decay).
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<E: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig, params: &ParamStore<E>) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &Gradients<E>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (E::of(c.beta1), E::of(c.beta2));
        let (lr, eps, wd) = (E::of(c.learning_rate), E::of(c.eps), E::of(c.weight_decay));
        let (bc1, bc2) = (E::of(bc1), E::of(bc2));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                if c.weight_decay != 0.0 {
                    p[i] -= lr * wd * p[i];
                }
                m[i] = b1 * m[i] + (E::one() - b1) * gi;
                v[i] = b2 * v[i] + (E::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as a store named `m.<param>` / `v.<param>`.
    pub fn state(&self, params: &ParamStore<E>) -> ParamStore<E> {
        let mut s = ParamStore::new();
        for id in params.ids() {
            s.insert(format!("m.{}", params.name(id)), self.m[id.0].clone(), false);
            s.insert(format!("v.{}", params.name(id)), self.v[id.0].clone(), false);
        }
        s
    }

    pub fn restore(&mut self, params: &ParamStore<E>, state: &ParamStore<E>, step: u64) -> Result<()> {
        for id in params.ids() {
            let name = params.name(id);
            let (m, v) = match (state.by_name(&format!("m.{name}")), state.by_name(&format!("v.{name}"))) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::CheckpointMismatch(format!("optimizer state lacks {name}"))),
            };
            self.m[id.0] = m.clone();
            self.v[id.0] = v.clone();
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap(), true);
        let mut opt = Adam::new(AdamConfig::adam(0.1), &store);
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap());
            let wv = g.param(w);
            let y = g.linear(x, wv, None).unwrap();
            let l = g.mse(y, Tensor::full(vec![1, 1], 3.0)).unwrap();
            g.backward(l).unwrap()
        };
        opt.step(&mut store, &grads);
        // bias-corrected first step is lr * sign(g)
        let p = store.get(w).data();
        assert!((p[0] - 1.1).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap(), true);
        let mut opt = Adam::new(AdamConfig::adamw(0.1, 0.5), &store);
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap());
            let wv = g.param(w);
            let y = g.linear(x, wv, None).unwrap();
            let l = g.mse(y, Tensor::zeros(vec![1, 1])).unwrap();
            g.backward(l).unwrap()
        };
        opt.step(&mut store, &grads);
        assert!((store.get(w).data()[0] - 1.9).abs() < 1e-12);
    }
}
