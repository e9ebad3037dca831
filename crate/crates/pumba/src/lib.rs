//! Protein-protein interface scoring with bidirectional selective
//! state-space encoders.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod optim;
pub mod eval;
pub mod explain;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod vim;

pub use error::{Error, Result};
pub use tensor::Tensor;
