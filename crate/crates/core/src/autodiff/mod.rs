//! Minimal reverse-mode automatic differentiation over dense tensors, plus
//! the Adam optimizer and the `DSDW` checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use graph::{backward, forward_eval, Feeds, Graph, Node, NodeId, Op};
pub use params::{glorot_uniform, Params};
