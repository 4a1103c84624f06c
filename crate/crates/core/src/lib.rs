pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod kernels;
pub mod mlp;
pub mod numerics;
pub mod sid;
pub mod targets;

pub use error::{PviError, Result};
