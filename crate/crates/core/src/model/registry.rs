//! One declaration of the parameter layout, used both to create fresh
//! parameters and to resolve them by name in a loaded store.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(−1/√fan_in, 1/√fan_in) with `fan_in` the row count.
    FanIn,
    Uniform(f64),
    Const(f64),
}

pub trait Registry {
    fn declare(&mut self, name: &str, kind: ParamKind, shape: [usize; 2], init: Init) -> Result<ParamId>;

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.declare(name, ParamKind::Weight, [fan_in, fan_out], Init::FanIn)
    }

    fn bias(&mut self, name: &str, width: usize, value: f64) -> Result<ParamId> {
        self.declare(name, ParamKind::Bias, [1, width], Init::Const(value))
    }

    fn norm(&mut self, name: &str, width: usize, value: f64) -> Result<ParamId> {
        self.declare(name, ParamKind::Norm, [1, width], Init::Const(value))
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize, init: Init) -> Result<ParamId> {
        self.declare(name, ParamKind::Embedding, [rows, dim], init)
    }
}

/// Inserts freshly initialized parameters.
pub struct Creator<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Registry for Creator<'_, R> {
    fn declare(&mut self, name: &str, kind: ParamKind, shape: [usize; 2], init: Init) -> Result<ParamId> {
        let [rows, cols] = shape;
        let data: Vec<f64> = match init {
            Init::FanIn => {
                let b = 1.0 / (rows as f64).sqrt();
                (0..rows * cols).map(|_| self.rng.gen_range(-b..b)).collect()
            }
            Init::Uniform(b) => (0..rows * cols).map(|_| self.rng.gen_range(-b..b)).collect(),
            Init::Const(v) => vec![v; rows * cols],
        };
        if self.store.id(name).is_some() {
            return Err(Error::config(format!("parameter {name} declared twice")));
        }
        Ok(self.store.insert(name, kind, Tensor::matrix(rows, cols, data)?))
    }
}

/// Looks parameters up in an existing store, checking kind and shape.
pub struct Resolver<'a> {
    pub store: &'a ParamStore,
}

impl Registry for Resolver<'_> {
    fn declare(&mut self, name: &str, kind: ParamKind, shape: [usize; 2], _init: Init) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
        let p = self.store.get(id);
        if p.kind != kind || p.value.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} is {:?} {:?}, expected {kind:?} {shape:?}",
                p.kind,
                p.value.shape()
            )));
        }
        Ok(id)
    }
}
