//! Dense `f64` arrays with a reverse-mode tape, limited to the operations the
//! CTR model needs.

mod array;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::grad_check;
pub use graph::{Binary, Graph, Unary, Var};

/// Stabilizer added to the variance inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-6;
