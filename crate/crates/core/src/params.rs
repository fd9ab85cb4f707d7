//! Named parameters and plain SGD.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Globally unique parameter identity: store plus slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    store: u64,
    index: usize,
}

#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl Clone for ParamStore {
    /// A clone is a distinct store: tapes recorded against the original do
    /// not feed gradients into the copy.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(index))
    }

    /// Adds a parameter initialised uniformly in `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::new(shape, values)?, true)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; n])?, true)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.id,
            index: id.0,
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Adds the gradients that belong to this store into the trainable
    /// parameters. Frozen parameters are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in grads.iter() {
            if key.store != self.id {
                continue;
            }
            let p = &mut self.params[key.index];
            if p.trainable {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies all accumulated gradients by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad_mut() {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
    }

    /// One SGD update with global-norm clipping, then clears gradients.
    /// Returns the pre-clipping gradient norm.
    pub fn sgd_step(&mut self, lr: f64, clip: f64) -> f64 {
        let norm = self.grad_norm();
        let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (w, d) in p.tensor.values_mut().iter_mut().zip(&g) {
                *w -= lr * factor * d;
            }
        }
        self.zero_grad();
        norm
    }

    /// Copies values from `other` for every parameter name present in both.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::ParameterShape {
                        name: p.name.clone(),
                        expected: p.tensor.shape().to_vec(),
                        found: src.tensor.shape().to_vec(),
                    });
                }
                p.tensor = Tensor::new(src.tensor.shape().to_vec(), src.tensor.values().to_vec())?;
            }
        }
        Ok(())
    }

    /// Sets every value of every parameter to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.tensor.values_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Bitwise fingerprint of all parameter values, for freeze checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values().iter().map(|x| x.to_bits()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0), true).unwrap();
        assert!(matches!(
            s.add("w", Tensor::scalar(2.0), true),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let f = s.add("f", Tensor::vector(vec![3.0, 4.0]), false).unwrap();
        let before = s.get(f).tensor.values().to_vec();

        let mut tape = Tape::new();
        let wv = tape.param(&s, w);
        let fv = tape.param(&s, f);
        let prod = tape.mul(wv, fv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        s.accumulate(&grads);
        assert!(s.get(f).tensor.grad().is_none());
        assert_eq!(s.get(w).tensor.grad().unwrap(), &[3.0, 4.0]);
        s.sgd_step(0.1, 0.0);
        assert_eq!(s.get(f).tensor.values(), before.as_slice());
        assert_ne!(s.get(w).tensor.values(), &[1.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        s.get_mut(w).tensor.accumulate_grad(&[30.0, 40.0]);
        let norm = s.sgd_step(1.0, 1.0);
        assert_eq!(norm, 50.0);
        let v = s.get(w).tensor.values();
        assert!((v[0] + 0.6).abs() < 1e-12 && (v[1] + 0.8).abs() < 1e-12);
    }
}
