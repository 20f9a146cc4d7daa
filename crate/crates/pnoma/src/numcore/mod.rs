//! Numeric foundation: tensors, reverse-mode differentiation, seeded RNG.
//!
//! Everything upstream (channel simulation, projections, the autoencoder,
//! training) is built from these pieces; nothing here knows about images,
//! users, or channels.

mod conv;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, GradCheckEntry, GradCheckReport, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE,
};
pub use rng::{streams, RngSnapshot, RngStream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
