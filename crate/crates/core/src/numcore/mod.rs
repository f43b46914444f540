//! Deterministic tensor engine with reverse-mode differentiation, limited to
//! the operations the dual-branch classifier needs.

mod graph;
pub mod ops;
mod optim;
mod tensor;

pub use graph::{BinaryOp, Decision, Decisions, Graph, UnaryOp, Var};
pub use ops::PoolMode;
pub use optim::{sgd_step, OptimState};
pub use tensor::{Real, Tensor};
