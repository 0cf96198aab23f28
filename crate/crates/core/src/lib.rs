//! Round-off-aware soft-error and bug detection for iterative stencil computations.

pub mod affine;
pub mod bench;
pub mod coeffs;
pub mod dd;
pub mod error;
pub mod error_model;
pub mod float;
pub mod injection;
pub mod interval;
pub mod runtime;
pub mod stencil;
pub mod synthesis;

pub use error::{Error, Result};
