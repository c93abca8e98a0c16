//! Dense-tensor arithmetic with reverse-mode autodiff and Adam.
//!
//! Deliberately minimal: just the operations the trajectory denoiser and the
//! behavior-cloning nets need, all in f64 so finite-difference checks hold to
//! tight tolerances.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Var, LAYER_NORM_EPS, SILU_SLOPE};
pub use tensor::Tensor;
