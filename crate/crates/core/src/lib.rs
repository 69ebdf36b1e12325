//! Non-autoregressive speech recognition by fusing an acoustic encoder and a
//! masked-LM linguistic encoder through parameter-free continuous
//! integrate-and-fire (CIF) alignment.
//!
//! The crate carries its own reverse-mode autodiff ([`autodiff`]) and builds
//! every model component on top of it: CIF ([`cif`]), CTC ([`ctc`]), toy
//! transformer encoders ([`encoders`]), the fused model with scheduled gold-rate
//! mixing ([`fusion`]), Adam training ([`training`]), synthetic data ([`data`])
//! and error-rate metrics ([`metrics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cif;
pub mod config;
pub mod ctc;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Target value marking a position that contributes no loss.
pub const IGNORE_INDEX: usize = usize::MAX;
