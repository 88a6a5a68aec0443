//! RGB-thermal semantic segmentation with condition-gated sparse expert
//! fusion, prior-biased attention and a self-calibrated decoder, built on a
//! small reverse-mode autodiff core.

pub mod attention;
pub mod autodiff;
pub mod conditioning;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod moe;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
