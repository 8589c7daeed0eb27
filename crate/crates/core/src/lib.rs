//! Relation extraction over dependency trees: relative-position
//! self-attention, a contextualized GCN over path-pruned trees, and
//! entity-aware attention, trained with a small reverse-mode tape.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamKind, ParamStore};
pub use tensor::{Tape, Tensor, Var};
