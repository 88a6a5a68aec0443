//! Minimal tensor autodiff: a single-use operation tape, a named parameter
//! registry and a finite-difference gradient checker.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_param};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{set_conv_backward_fault, Tape, Var};
