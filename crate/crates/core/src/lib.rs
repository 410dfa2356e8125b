pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod nets;
pub mod ot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
