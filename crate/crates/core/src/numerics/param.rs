use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    #[serde(skip_serializing, default)]
    gradient: Vec<f64>,
}

impl Parameter {
    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let gradient = vec![0.0; tensor.numel()];
        self.params.push(Parameter { name, tensor, gradient });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter initialised uniformly in `±sqrt(6 / (fan_in + fan_out))`.
    ///
    /// The generator is seeded from `(seed, name)` so a parameter's initial
    /// value does not depend on which other parameters exist.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = named_rng(seed, name);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, seed: u64) -> ParamId {
        let mut rng = named_rng(seed, name);
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::full(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.clear();
            p.gradient.resize(p.tensor.numel(), 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if p.gradient.len() != p.tensor.numel() {
                p.gradient = vec![0.0; p.tensor.numel()];
            }
            if let Some(g) = g {
                for (acc, v) in p.gradient.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    /// Copies values from `other` for every parameter whose name and shape match.
    /// Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.tensor(id);
                if src.shape() == p.tensor.shape() {
                    p.tensor = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Replaces the values with those of a store that has the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.name != q.name || p.tensor.shape() != q.tensor.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    q.name,
                    q.tensor.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = q.tensor.clone();
        }
        self.zero_grad();
        Ok(())
    }
}

fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ crate::textbank::fnv1a(name.as_bytes()))
}

/// Per-parameter gradients from one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.gradient.len() != m.len() {
                continue;
            }
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&p.gradient).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_clears_and_matches_shape() {
        let mut s = ParamStore::new();
        let id = s.add_xavier("w", 3, 2, 0);
        let mut g = ParamGrads::zeros_like(&s);
        g.0[0] = Some(vec![1.0; 6]);
        s.accumulate(&g);
        assert_eq!(s.get(id).gradient(), &[1.0; 6]);
        s.zero_grad();
        assert_eq!(s.get(id).gradient().len(), s.tensor(id).numel());
        assert!(s.get(id).gradient().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let mut a = ParamStore::new();
        a.add_xavier("x", 2, 2, 7);
        let ya = a.add_xavier("y", 4, 4, 7);
        let mut b = ParamStore::new();
        let yb = b.add_xavier("y", 4, 4, 7);
        assert_eq!(a.tensor(ya), b.tensor(yb));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row_vector(vec![1.0, -1.0]));
        let mut adam = Adam::new(&s);
        let mut g = ParamGrads::zeros_like(&s);
        g.0[0] = Some(vec![2.0, -3.0]);
        s.accumulate(&g);
        adam.step(&mut s, 0.1);
        let w = s.tensor(id).data();
        // first bias-corrected step has magnitude lr
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }
}
