//! Minimal dense autodiff used by every model component.

pub mod gradcheck;
mod params;
mod tape;

pub use params::{truncated_normal, Binder, ParamStore};
pub use tape::{Gradients, Matrix, Segment, Tape, Var};

#[cfg(test)]
mod tests;
