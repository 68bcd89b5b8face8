//! Small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! Sized for recurrent policies with layers up to a few thousand units. Complex
//! quantities are carried as separate real/imaginary matrices; see
//! [`Tape::complex_mul`] and [`Tape::unit_modulus`].

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ndarray::Array2;
pub use params::{clip_global_norm, BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var, UNIT_MODULUS_FLOOR};
