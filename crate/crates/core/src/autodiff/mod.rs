//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records each primitive as it is evaluated. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and
//! accumulates gradients into every node that depends on a leaf created
//! with [`Graph::leaf`] or [`Graph::param`].

mod graph;
mod matrix;
mod optim;
mod params;

pub use graph::{smooth_l1_elem, Gradients, Graph, Rulebook, Var, KERNEL_TAPS};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;

#[cfg(test)]
mod tests;
