//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autograd::Mat;
use crate::nn::{GradSet, ParamSet};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<(String, String), (Mat, Mat)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor that has a gradient. `lr_for`
    /// gives the learning rate of each group. Weight decay is applied to
    /// matrices only (both dimensions > 1), never to biases, norms or scalars.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (group, tensors) in grads {
            let lr = lr_for(group);
            let Some(pg) = params.group_mut(group) else {
                continue;
            };
            for (name, g) in tensors {
                let Some(p) = pg.get_mut(name) else {
                    continue;
                };
                let (m, v) = self
                    .moments
                    .entry((group.clone(), name.clone()))
                    .or_insert_with(|| (Array2::zeros(p.raw_dim()), Array2::zeros(p.raw_dim())));
                let decay = if p.nrows() > 1 && p.ncols() > 1 {
                    self.weight_decay
                } else {
                    0.0
                };
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                ndarray::Zip::from(&mut *p)
                    .and(&mut *m)
                    .and(&mut *v)
                    .and(g)
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * (mhat / (vhat.sqrt() + eps) + decay * *p);
                    });
            }
        }
    }
}
