//! Named parameter storage that outlives a single tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {}", name);
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Replaces every value by the same-named array in `other`, checking shapes.
    pub fn load_from(&mut self, other: &[(String, Array)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("expected {} arrays, found {}", self.len(), other.len())));
        }
        for (name, arr) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {:?}", name)))?;
            if arr.shape() != self.values[id.0].shape() {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    name,
                    arr.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = arr.clone();
        }
        Ok(())
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|v| g.param(v.clone())).collect())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Substitutes another tape value for one parameter.
    pub fn with(mut self, id: ParamId, v: Var) -> Bound {
        self.0[id.0] = v;
        self
    }

    /// Gradients in store order; parameters the root does not reach get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Array> {
        self.0
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(g.shape(v))))
            .collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_bounds_and_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = uniform(&[10, 4], 4, &mut r1);
        assert_eq!(a, uniform(&[10, 4], 4, &mut r2));
        assert!(a.data().iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.add("a", Array::zeros(&[2]));
        s.add("b", Array::zeros(&[1, 3]));
        assert_eq!(s.count(""), 5);
        assert_eq!(s.count("b"), 3);
        let good = vec![("b".to_string(), Array::full(&[1, 3], 1.0)), ("a".to_string(), Array::zeros(&[2]))];
        s.load_from(&good).unwrap();
        assert_eq!(s.get(s.id("b").unwrap()).data(), &[1.0; 3]);
        let bad = vec![("a".to_string(), Array::zeros(&[3])), ("b".to_string(), Array::zeros(&[1, 3]))];
        assert!(s.load_from(&bad).is_err());
    }
}
