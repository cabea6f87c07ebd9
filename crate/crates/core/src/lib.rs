//! Per-pixel hyperspectral image classification with dual-domain grouped
//! selective state-space encoders and lightweight global attention.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dcss;
pub mod error;
pub mod gradcheck;
pub mod lgi;
pub mod network;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
