//! Trainable global frequency-domain filtering for image models.
//!
//! The [`gafl`] module holds the filter layer. Everything it needs to be
//! trained jointly with a base network lives alongside it: a reverse-mode
//! differentiation engine ([`autograd`]), 2-D real transforms
//! ([`spectral`]), miniature base networks ([`nets`]), loss recipes and
//! metrics ([`losses`]), optimizers ([`optim`]), synthetic data and PGM IO
//! ([`data`]), and the paired-experiment driver ([`harness`]).

pub mod autograd;
pub mod data;
pub mod error;
pub mod gafl;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
