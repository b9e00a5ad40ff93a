//! Minimal reverse-mode autodiff on `ndarray` f32 tensors.
//!
//! The engine is a flat tape: every op appends its output value and a
//! backward closure. It is single-threaded and allocation-happy by design,
//! which keeps every training and inference path bitwise deterministic —
//! a property the checkpointing and CLI reproducibility contracts depend on.

mod layers;
mod params;
mod tape;

pub use layers::*;
pub use params::*;
pub use tape::*;
