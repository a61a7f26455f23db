//! Named tensor store for the unfolding network and its binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors. Names are unique; iteration order is sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; fails on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::arg(format!("duplicate weight name {name:?}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::arg(format!("unknown weight {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("ModelWeights::set", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::arg(format!("missing weight {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that exactly the expected names are present with the expected
    /// shapes.
    pub fn check_layout(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        for (name, shape) in expected {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "weight {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains_key(*n)) {
            return Err(Error::arg(format!("unexpected weight {extra:?}")));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundWeights {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(t.clone())))
            .collect();
        BoundWeights { vars }
    }

    /// Global L2 norm of the gradients reached by the sweep, and the first
    /// weight whose gradient is not finite.
    pub fn gradient_norm(&self, bound: &BoundWeights, grads: &Gradients) -> (f64, Option<String>) {
        let mut sq = 0.0;
        for name in self.tensors.keys() {
            let Some(g) = bound.vars.get(name).and_then(|&v| grads.get(v)) else {
                continue;
            };
            if !g.all_finite() {
                return (f64::NAN, Some(name.clone()));
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        (sq.sqrt(), None)
    }

    /// `w -= lr * grad` for every weight reached by the sweep.
    pub fn apply_gradients(&mut self, bound: &BoundWeights, grads: &Gradients, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (name, t) in self.tensors.iter_mut() {
            let Some(g) = bound.vars.get(name).and_then(|&v| grads.get(v)) else {
                continue;
            };
            let data = t.data().iter().zip(g.data()).map(|(w, g)| w - lr * g).collect();
            *t = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        }
    }
}

/// Tape handles for every weight of a [`ModelWeights`].
#[derive(Clone, Debug)]
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("missing weight {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Points an existing name at another node, e.g. a probe variable.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::arg(format!("missing weight {name:?}")))?;
        *slot = var;
        Ok(())
    }

    /// A view that prepends `prefix` to every lookup.
    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }
}

/// Prefixed lookup into [`BoundWeights`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bound: &'a BoundWeights,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.bound.get(&format!("{}{}", self.prefix, name))
    }

    pub fn child(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(w.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(w.set("a", Tensor::zeros(&[3])).is_err());
        assert!(w.set("b", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn layout_check_reports_missing_and_extra() {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::zeros(&[2])).unwrap();
        let mut expected = BTreeMap::new();
        expected.insert("a".to_string(), vec![2]);
        assert!(w.check_layout(&expected).is_ok());
        expected.insert("b".to_string(), vec![1]);
        assert!(w.check_layout(&expected).is_err());
        expected.remove("b");
        w.insert("c", Tensor::zeros(&[1])).unwrap();
        assert!(w.check_layout(&expected).is_err());
    }

    #[test]
    fn scoped_lookup() {
        let mut w = ModelWeights::new();
        w.insert("stage0.embed.w", Tensor::zeros(&[1])).unwrap();
        let mut tape = Tape::new();
        let b = w.bind(&mut tape);
        let s = b.scope("stage0.");
        assert!(s.child("embed").get("w").is_ok());
        assert!(s.get("missing").is_err());
    }
}
