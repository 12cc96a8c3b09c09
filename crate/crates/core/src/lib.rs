//! Doubly slimmable transformer engine.
//!
//! One master weight set is trained once and then executed as any
//! `(width, depth)` submodel from a fixed grid. Width slimming keeps the
//! leading rows/columns of every backbone matrix (dropping trailing heads);
//! depth slimming keeps a scored subset of layers in their original order.
//!
//! ```text
//! synthdata ─► backbone (slim_layers over numerics) ─► trainer
//!                 ▲                                     │
//!              slim_space ◄── cost_model ◄── harness ◄──┘
//! ```

pub mod backbone;
pub mod cost_model;
pub mod error;
pub mod exec;
pub mod harness;
pub mod numerics;
pub mod slim_layers;
pub mod slim_space;
pub mod synthdata;
pub mod trainer;

pub use backbone::{Batch, ForwardOutput, ModelConfig, ParamStore, SlimModel, Variant};
pub use error::{DstError, Result};
pub use numerics::{Graph, Rng, Tensor, Var};
pub use slim_space::{ArchDescriptor, ArchSpace, DepthStrategy};

