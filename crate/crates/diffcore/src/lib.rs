//! Minimal dense-tensor differentiation for the QA2MN model.
//!
//! - [`Tensor`]: row-major `f64` storage
//! - [`Tape`]: eager ops recorded for one reverse sweep
//! - [`ParamStore`] / [`AdamState`]: named parameters and their optimizer
//! - [`checkpoint`]: `QA2MN`-tagged binary checkpoints
//! - [`gradcheck`]: finite-difference verification
//!
//! A tape and the parameters bound to it belong to one thread; frozen
//! [`ParamStore`]s are plain data and may be shared for read-only use.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{DiffError, Result};
pub use optim::{clip_gradients, global_norm, AdamState};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
