//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! Ops are recorded on a [`Graph`] as they execute. [`Graph::backward`] walks
//! the tape in reverse and sums gradients where a node feeds several consumers.

mod gradcheck;
mod graph;
mod ops;
mod optim;

pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport, Mismatch};
pub use graph::{Gradients, Graph, Var};
pub use ops::{softmax, BatchNormState, GrlCoefficient, Mode, Reduction};
pub use optim::sgd_step;
