//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain shaped storage; differentiable computation happens on
//! a [`Graph`](graph::Graph), a tape of nodes built per forward pass and
//! consumed by [`Graph::backward`](graph::Graph::backward). Parameters live
//! in a [`ParamSet`] (named, insertion-ordered) and gradients come back as a
//! [`GradMap`] keyed by the same names.

pub mod gradcheck;
pub mod graph;
pub mod io;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shaped dense array of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element precision (f32 ↔ f64), routing through f64.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Named, insertion-ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].1)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.cast()).expect("names already unique");
        }
        out
    }
}

/// Gradients keyed by parameter name, one entry per registered parameter.
#[derive(Debug, Clone)]
pub struct GradMap<F: Scalar> {
    entries: Vec<(String, Vec<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> GradMap<F> {
    pub(crate) fn from_entries(entries: Vec<(String, Vec<F>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        GradMap { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.index.get(name).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![1.0f32; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tensor_rejects_zero_dimension() {
        assert!(Tensor::new(vec![2, 0], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn param_set_preserves_order_and_rejects_duplicates() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        assert!(p.insert("a", Tensor::scalar(3.0)).is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::new(vec![3], vec![1.5f32, -2.25, 0.125]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
