//! Dense tensors with reverse-mode differentiation over a fixed op set.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Probe};
pub use params::{BnUpdate, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tape::{BatchStats, Tape, Var, BN_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
