//! Named learnable tensors and their gradients.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What role a parameter plays; only [`ParamKind::Weight`] is L2-regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    /// Normalization scale/shift.
    Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// The complete set θ of learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        id
    }

    /// Weight matrix with entries drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("weight shape");
        self.insert(name, ParamKind::Weight, t)
    }

    pub fn bias(&mut self, name: &str, width: usize, init: f64) -> ParamId {
        self.insert(name, ParamKind::Bias, Tensor::filled(&[1, width], init))
    }

    pub fn embedding<R: Rng>(&mut self, name: &str, rows: usize, dim: usize, scale: f64, rng: &mut R) -> ParamId {
        let data = (0..rows * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        let t = Tensor::matrix(rows, dim, data).expect("embedding shape");
        self.insert(name, ParamKind::Embedding, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Σ‖W‖² over weight matrices only.
    pub fn weight_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::config("parameter layouts differ"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || !a.value.same_shape(&b.value) {
                return Err(Error::config(format!(
                    "parameter {} does not match {}",
                    a.name, b.name
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        ParamStore { params, index }
    }
}

/// Accumulated gradients, one optional dense slot per parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Slot for `id`, zero-initialized to `shape` on first touch.
    pub fn slot_mut(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m: f64, (_, g)| {
            let a = g.max_abs();
            if m.is_nan() || a.is_nan() {
                f64::NAN
            } else {
                m.max(a)
            }
        })
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in self.iter_mut() {
            g.scale_in_place(s);
        }
    }
}
