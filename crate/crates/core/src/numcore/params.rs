use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named weight tensors. Insertion order is the canonical order used
/// for checkpoints and gradient reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites a tensor by name, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .lookup
            .get(name)
            .ok_or_else(|| Error::Checkpoint { name: name.into(), msg: "no such parameter".into() })?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::Checkpoint {
                name: name.into(),
                msg: format!("shape {:?} does not match expected {:?}", value.shape(), self.tensors[i].shape()),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Same names in the same order with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.iter() {
            match other.id_of(name) {
                None => {
                    return Err(Error::Checkpoint { name: name.into(), msg: "missing from the other model".into() });
                }
                Some(id) if other.get(id).shape() != t.shape() => {
                    return Err(Error::Checkpoint {
                        name: name.into(),
                        msg: format!("shape {:?} vs {:?}", t.shape(), other.get(id).shape()),
                    });
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names.iter().find(|n| !self.lookup.contains_key(*n)) {
            return Err(Error::Checkpoint { name: extra.clone(), msg: "unexpected parameter".into() });
        }
        Ok(())
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, -limit, limit)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(lo, hi).expect("valid bounds");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_compat() {
        let mut a = ParamStore::new();
        let w = a.add("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(a.add("w", Tensor::scalar(0.0)).is_err());
        let mut tape = Tape::new();
        let b = a.bind(&mut tape, true);
        assert_eq!(tape.value(b[w]).data(), &[1.0, 2.0]);
        assert!(tape.requires_grad(b[w]));

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3])).unwrap();
        let err = a.check_compatible(&other).unwrap_err().to_string();
        assert!(err.contains("`w`") || err.contains("w"), "{err}");
        assert!(a.assign("w", Tensor::zeros(&[3])).is_err());
    }
}
