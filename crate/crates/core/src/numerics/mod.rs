//! Dense tensors, a reverse-mode tape, and the small set of primitives the
//! detector needs.

pub mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use graph::{bce_logit, sigmoid, Gradients, Graph, Var};
pub use param::{Adam, ParamGrads, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

/// Numerical tolerances shared by tests and checks.
pub mod tol {
    /// Finite-difference step at f64.
    pub const FD_STEP: f64 = 1e-5;
    /// Maximum relative error between analytic and numeric gradients.
    pub const GRAD_REL_ERR: f64 = 1e-4;
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely.
    pub const GRAD_REL_FLOOR: f64 = 1e-3;
    /// Row sums of softmax outputs.
    pub const ROW_SUM: f64 = 1e-9;
    /// Exact-form equations (residual enhancement, pooled head replay).
    pub const EQUATION: f64 = 1e-9;
    /// `layer_norm` default epsilon.
    pub const LN_EPS: f64 = 1e-5;
}

#[cfg(test)]
mod tests;
