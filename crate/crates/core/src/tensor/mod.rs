//! Minimal dense linear algebra with analytic gradients for exactly the
//! operations the model needs.

mod adam;
mod matrix;
mod scalar;
mod tape;

pub use adam::{adam_step, lr_at, AdamState};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use tape::{BatchStats, NormAxes, Tape, Var};
