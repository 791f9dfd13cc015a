//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built define-by-run: every op appends a node and computes
//! its value immediately. [`Graph::backward`] sweeps the nodes in reverse
//! insertion order, touching only nodes that depend on a requested leaf, so
//! constant subgraphs (frozen weights, clean references) cost nothing on the
//! way back.
//!
//! ```
//! use lsa_core::autodiff::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Array::scalar(3.0)).unwrap();
//! let y = g.mul(x, x).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! let grads = g.backward(y, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod array;
mod check;
mod graph;
pub mod kernels;

pub use array::{norm_l2, norm_linf, Array};
pub use check::{finite_difference_check, FdReport};
pub use graph::{Activation, CustomOp, GradientMap, Graph, LinearMap, NodeId, Op};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("node {0} is not in this graph")]
    UnknownNode(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
