//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! A forward pass records every primitive on a [`Tape`]; [`Tape::backward`]
//! sweeps the record in reverse and accumulates parameter adjoints into the
//! [`ParamStore`].

mod check;
mod param;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckOptions, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{huber, BatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
