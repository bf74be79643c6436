//! Reverse-mode automatic differentiation, a central-difference gradient
//! checker, and the Adam optimizer.

mod gemm;
mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{finite_diff_check, CoordinateCheck, GradCheckOptions, GradCheckReport, TensorCheck};
pub use graph::{gelu_scalar, AttentionSpan, Gradients, Graph, Var};
pub use optim::{adam_step, Adam, AdamConfig};
