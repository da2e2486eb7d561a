use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Tensor};

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// `v ← μ·v + g; θ ← θ − lr·v` for every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.dim()));
            *v *= self.momentum;
            *v += g;
            store.get_mut(id).scaled_add(-self.lr, v);
        }
    }

    /// Like [`Sgd::step`] but only touches `params`.
    pub fn step_params(&mut self, store: &mut ParamStore, grads: &Gradients, params: &[ParamId]) {
        for &id in params {
            if let Some(g) = grads.get(id) {
                let v = self
                    .velocity
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(g.dim()));
                *v *= self.momentum;
                *v += g;
                store.get_mut(id).scaled_add(-self.lr, v);
            }
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
