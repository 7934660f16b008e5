//! Named trainable parameters, their gradients and optimizer state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Allocated on the first gradient write; always the shape of `value`.
    #[serde(skip)]
    pub grad: Option<Tensor>,
    /// Momentum buffer, allocated by the optimizer.
    #[serde(skip)]
    pub velocity: Option<Tensor>,
}

/// Insertion-ordered parameter store. Iteration order is the order in which
/// parameters were registered, which keeps optimizer updates deterministic.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Non-trainable state such as batch-norm running statistics.
    buffers: Vec<(String, Vec<f64>)>,
    #[serde(skip)]
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            velocity: None,
        });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.buffer_index
            .get(name)
            .map(|&i| self.buffers[i].1.as_slice())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        match self.buffer_index.get(name) {
            Some(&i) => Ok(&mut self.buffers[i].1),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if grad.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{name}: grad {} vs param {}", grad.shape(), p.value.shape()),
            });
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Rebuilds the name lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        self.buffer_index = self.buffers.iter().enumerate().map(|(i, b)| (b.0.clone(), i)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        assert_eq!(
            s.insert("w", Tensor::zeros(Shape::new(1, 1, 1, 1))),
            Err(Error::DuplicateParam("w".into()))
        );
    }

    #[test]
    fn gradient_slot_matches_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(Shape::new(2, 1, 1, 1))).unwrap();
        assert!(s.accumulate_grad("w", &Tensor::zeros(Shape::new(1, 1, 1, 1))).is_err());
        s.accumulate_grad("w", &Tensor::full(Shape::new(2, 1, 1, 1), 1.5)).unwrap();
        s.accumulate_grad("w", &Tensor::full(Shape::new(2, 1, 1, 1), 1.0)).unwrap();
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap().data(), &[2.5, 2.5]);
    }

    #[test]
    fn json_round_trip_reindexes() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(Shape::new(1, 2, 1, 1), 0.25)).unwrap();
        s.insert_buffer("a.running_mean", vec![0.5, 1.0]).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let mut back: ParamStore = serde_json::from_str(&text).unwrap();
        back.reindex();
        assert_eq!(back.value("a").unwrap().data(), &[0.25, 0.25]);
        assert_eq!(back.buffer("a.running_mean").unwrap(), &[0.5, 1.0]);
    }
}
