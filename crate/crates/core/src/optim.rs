//! Adam with global-norm clipping, plus an exponential moving average of weights.

use crate::graph::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip_norm: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, clip_norm: f32) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f32) -> f32 {
        let norm = grads.0.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
            as f32;
        let scale = if norm > self.clip_norm && norm.is_finite() { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads.0[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Moving average with the usual `(1 + n) / (10 + n)` warm-up on the decay.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f32,
    updates: u64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f32) -> Self {
        Self { decay, updates: 0, shadow: params.values().to_vec() }
    }

    pub fn update(&mut self, params: &ParamStore) {
        self.updates += 1;
        let n = self.updates as f32;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (s, p) in self.shadow.iter_mut().zip(params.values()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap());
        let mut opt = Adam::new(&store, 10.0);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id);
                let loss = g.mse(w, Tensor::new(vec![3], vec![0.3, 0.3, 0.3]).unwrap()).unwrap();
                g.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 0.3).abs() < 1e-2));
    }

    #[test]
    fn ema_tracks_constant_parameters() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(vec![2], 1.0));
        let mut ema = Ema::new(&store, 0.99);
        store.values_mut()[0] = Tensor::full(vec![2], 3.0);
        for _ in 0..2000 {
            ema.update(&store);
        }
        assert!((ema.shadow()[0].data()[0] - 3.0).abs() < 1e-3);
    }
}
