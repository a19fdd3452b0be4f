use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam with decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0f32; params.get(id).len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", vec![3], vec![1.0, 1.0, 1.0]);
        let mut g = store.zero_grads();
        g.get_mut(id).copy_from_slice(&[0.5, -2.0, 0.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &g, 0.1);
        let p = store.get(id);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", vec![2], vec![3.0, -4.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let mut g = store.zero_grads();
            let p = store.get(id).to_vec();
            g.get_mut(id).copy_from_slice(&[2.0 * p[0], 2.0 * p[1]]);
            adam.step(&mut store, &g, 0.01);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }
}
