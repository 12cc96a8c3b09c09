//! Dense `f64` tensors, matrix kernels and a reverse-mode tape.
//!
//! All arithmetic uses a fixed serial accumulation order per output
//! element, so identical inputs give bit-identical outputs regardless of
//! how many threads the row-parallel kernels use.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{GradStore, Graph, NodeGrads, ParamId, ParamSource, Var};
pub use rng::Rng;
pub use tensor::Tensor;
