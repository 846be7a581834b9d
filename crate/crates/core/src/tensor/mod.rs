//! Sequence tensors and the layer substrate shared by every network module.
//!
//! Features are carried as channel-major `channels × length` grids. Layers
//! are exposed twice: as plain kernels in [`kernels`] and as recorded
//! operations on a reverse-mode [`Tape`]. The tape stores no parameter
//! values; operations reference entries of a [`ParamStore`] by [`ParamId`]
//! and backpropagation writes into a matching [`Gradients`] buffer.

mod gradcheck;
pub mod kernels;
mod mask;
mod params;
mod real;
mod seq;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use kernels::ConvSpec;
pub use mask::ValidityMask;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use seq::SeqTensor;
pub use tape::{Backward, Tape, Var};

/// Layer-norm epsilon used by every normalization in the network.
pub const LN_EPS: f64 = 1e-5;
