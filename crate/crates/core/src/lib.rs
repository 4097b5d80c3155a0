pub mod backbone;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod orchestrator;
pub mod seeds;
pub mod subspace;
pub mod task;
pub mod tensors;

pub use error::{Error, Result};
