//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a flat row-major
//! `Vec<f64>` plus a shape, and a [`Tape`] is a define-by-run Wengert list
//! over exactly the operations the forecasting model needs. Every forward
//! operation checks its output for non-finite values and aborts the step
//! with the offending operation's name, so training failures are diagnosed
//! at the op that produced them rather than at the loss.
//!
//! [`adam`] implements the Adam update rule over named parameter tensors and
//! [`checkpoint`] serializes parameter stores to a flat binary archive with
//! an embedded JSON manifest.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
