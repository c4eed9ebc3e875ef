//! Named parameter storage and binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;

use super::tape::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Arc<Array>,
    pub requires_grad: bool,
    pub grad: Option<Array>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Rounds every element to the nearest `f32` so that checkpoints stored as
/// `f32` reload to exactly the same values.
pub fn round_to_f32(a: &mut Array) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut data: Array, requires_grad: bool) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        round_to_f32(&mut data);
        self.tensors.insert(
            name,
            Tensor {
                data: Arc::new(data.as_standard_layout().into_owned()),
                requires_grad,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn data(&self, name: &str) -> Result<Arc<Array>> {
        Ok(self.get(name)?.data.clone())
    }

    /// Replaces a tensor's values (rounded to the `f32` grid).
    pub fn set_data(&mut self, name: &str, mut data: Array) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.data.shape() != data.shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} vs stored {:?}",
                data.shape(),
                t.data.shape()
            )));
        }
        round_to_f32(&mut data);
        t.data = Arc::new(data.as_standard_layout().into_owned());
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars, optionally restricted to a name prefix.
    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, t)| t.requires_grad && k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Moves all tensors of `other` into `self`.
    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (k, t) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::DuplicateParameter(k));
            }
            self.tensors.insert(k, t);
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(|t| t.grad = None);
    }

    /// Stores gradients by name; shapes must match.
    pub fn set_grads(&mut self, grads: BTreeMap<String, Array>) -> Result<()> {
        for (name, g) in grads {
            let t = self.get_mut(&name)?;
            if g.shape() != t.data.shape() {
                return Err(Error::shape(format!("gradient for {name}")));
            }
            t.grad = Some(g);
        }
        Ok(())
    }

    /// Binds every tensor onto `tape`; trainable tensors become leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    /// Binds every tensor as a constant (no gradients to parameters).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, frozen: bool) -> Bound<'t> {
        Bound {
            tape,
            source: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), (t.data.clone(), t.requires_grad && !frozen)))
                .collect(),
            vars: RefCell::new(BTreeMap::new()),
        }
    }
}

/// Parameters lazily materialized as tape variables.
pub struct Bound<'t> {
    tape: &'t Tape,
    source: BTreeMap<String, (Arc<Array>, bool)>,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let (data, trainable) = self
            .source
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = if *trainable {
            self.tape.leaf_shared(data.clone())
        } else {
            self.tape.constant_shared(data.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` through an existing variable instead of the stored tensor.
    pub fn with_override(self, name: &str, var: Var<'t>) -> Self {
        self.vars.borrow_mut().insert(name.to_string(), var);
        self
    }

    /// Raw value without creating a tape node.
    pub fn value(&self, name: &str) -> Result<Arc<Array>> {
        self.source
            .get(name)
            .map(|(d, _)| d.clone())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradients of every bound trainable tensor that was used.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", array![1.0].into_dyn(), true).unwrap();
        assert!(matches!(
            s.insert("a", array![2.0].into_dyn(), true),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn count_sums_trainable_sizes() {
        let mut s = ParameterStore::new();
        s.insert("g/w", Array::zeros(IxDyn(&[3, 4])), true).unwrap();
        s.insert("g/b", Array::zeros(IxDyn(&[4])), true).unwrap();
        s.insert("g/u", Array::zeros(IxDyn(&[7])), false).unwrap();
        s.insert("d/w", Array::zeros(IxDyn(&[5])), true).unwrap();
        assert_eq!(s.parameter_count(""), 21);
        assert_eq!(s.parameter_count("g/"), 16);
    }

    #[test]
    fn values_live_on_f32_grid() {
        let mut s = ParameterStore::new();
        s.insert("x", array![0.1].into_dyn(), true).unwrap();
        assert_eq!(s.get("x").unwrap().data[[0]], 0.1f32 as f64);
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut s = ParameterStore::new();
        s.insert("w", array![2.0].into_dyn(), true).unwrap();
        let tape = Tape::new();
        let b = s.bind_frozen(&tape);
        let loss = b.var("w").unwrap().square().sum();
        let g = tape.backward(loss).unwrap();
        assert!(b.gradients(&g).is_empty());
    }
}
