//! Document-level neural machine translation with source and target memory
//! networks, trained stage-wise and decoded by block coordinate descent.

pub mod autodiff;
pub mod bcd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod docnmt;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod nmt;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamSet};
pub use tensor::Tensor;
