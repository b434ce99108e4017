use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered collection of named parameters.
///
/// Insertion order is the checkpoint order and the order in which gradient
/// buffers are indexed.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_full(&mut self, name: &str, shape: &[usize], v: f32) -> Result<usize> {
        self.insert(name, Tensor::full(shape, v))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn by_id(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds per-parameter gradients (indexed by parameter id).
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            for (a, b) in self.params[id].grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn scale_grads(&mut self, s: f32) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Bias-corrected Adam update; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: AdamConfig) -> Result<()> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Sparse per-parameter gradient buffers produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f32>>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub(crate) fn add(&mut self, id: usize, g: &[f32]) {
        if id >= self.grads.len() {
            self.grads.resize(id + 1, None);
        }
        match &mut self.grads[id] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: usize) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (i, g)))
    }

    /// Sums `other` into `self` in parameter order.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vec![1.0, -2.0])).unwrap();
        s.adam_step(AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vec![0.0, 0.0, 0.0])).unwrap();
        s.get_mut("w").unwrap().grad = vec![3.0, -0.2, 1e-3];
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        s.adam_step(cfg).unwrap();
        // m̂ = g, v̂ = g² at t = 1, so the step is lr·g/(|g|+ε)
        let w = s.get("w").unwrap();
        for (x, sign) in w.value.data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-6, "{x}");
        }
        assert!(w.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vec![1.5, -0.7, 0.3, 2.0]))
            .unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        for _ in 0..500 {
            let p = s.get_mut("w").unwrap();
            let g: Vec<f32> = p.value.data().iter().map(|w| 2.0 * w).collect();
            p.grad = g;
            s.adam_step(cfg).unwrap();
        }
        let n: f32 = s.get("w").unwrap().value.data().iter().map(|w| w * w).sum::<f32>().sqrt();
        assert!(n < 1e-3, "norm {n}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row_vector(vec![0.0])).unwrap();
        s.insert("enc.w", Tensor::row_vector(vec![0.0])).unwrap();
        s.get_mut("enc.w").unwrap().grad[0] = f32::NAN;
        match s.adam_step(AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "enc.w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_zeros("x", &[2]).unwrap();
        assert!(s.init_zeros("x", &[2]).is_err());
    }
}
