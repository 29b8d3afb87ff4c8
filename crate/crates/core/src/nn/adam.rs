use ndarray::ArrayD;

use super::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a fixed set of parameters. Moments are kept in f32 alongside
/// the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, config: AdamConfig) -> Self {
        let m: Vec<_> = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = m.clone();
        Self {
            config,
            ids,
            m,
            v,
            step: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps, wd) = (beta1 as f32, beta2 as f32, eps as f32, weight_decay as f32);
        for (k, &id) in self.ids.iter().enumerate() {
            let zeros;
            let grad = match grads.get(id) {
                Some(g) => g,
                None => {
                    zeros = ArrayD::zeros(store.value(id).raw_dim());
                    &zeros
                }
            };
            ndarray::Zip::from(store.value_mut(id))
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = if wd != 0.0 { g + wd * *p } else { g };
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let denom = v.sqrt() / bc2_sqrt + eps;
                    *p -= step_size * *m / denom;
                });
        }
    }
}
