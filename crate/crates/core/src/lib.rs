//! Mixed link networks.
//!
//! A small 64-bit tensor engine with reverse-mode gradients, the dense
//! topology evaluators (concatenative, additive and mixed connections),
//! builders for mixed link networks, static parameter/FLOP accounting and a
//! desk-scale training loop.
// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod blocks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Session, Var};
pub use params::ParamStore;
pub use tensor::{Precision, Shape, Tensor};
