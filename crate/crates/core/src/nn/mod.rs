//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Layers are stateless descriptors holding [`ParamId`]s into a
//! [`ParamStore`]; forward functions return whatever the matching backward
//! needs, and backward functions accumulate into a [`Grads`] buffer laid out
//! like the store.

mod adam;
mod attention;
mod conv;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use attention::{attention_backward, attention_forward, AttentionCache};
pub use conv::{upsample2x, upsample2x_backward, Conv2d, ConvCache};
pub use layers::{
    add_modulated_grads, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward,
    modulate, silu_backward, silu_forward, Linear, LinearInit, NormCache,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, shaped parameter arrays.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param {name}");
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.shapes.push(shape);
        self.values
            .push(values.into_iter().map(T::from_f64).collect());
        ParamId(self.values.len() - 1)
    }

    pub fn add_copy(&mut self, name: impl Into<String>, src: ParamId) -> ParamId {
        let shape = self.shapes[src.0].clone();
        let values = self.values[src.0].iter().map(|v| v.to_f64()).collect();
        self.add(name, shape, values)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            data: self.values.iter().map(|v| vec![T::ZERO; v.len()]).collect(),
        }
    }

    /// Same layout with values converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64(x.to_f64())).collect())
                .collect(),
        }
    }

    /// Overwrite every parameter with `N(0, std^2)` noise. Test helper for
    /// moving a freshly initialized network away from its zero-initialized
    /// special case.
    pub fn randomize(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        for values in &mut self.values {
            for v in values.iter_mut() {
                *v = T::from_f64(rng.sample(normal));
            }
        }
    }
}

/// Gradient buffers matching a [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= f;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}

/// Xavier/Glorot uniform initialization for a `fan_out x fan_in` weight.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

pub fn normal_init(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| rng.sample(normal)).collect()
}
