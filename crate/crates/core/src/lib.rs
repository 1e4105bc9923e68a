pub mod cl3loop;
pub mod cli;
pub mod dataio;
pub mod driftwatch;
pub mod error;
pub mod fedcore;
pub mod fedwire;
pub mod metrics;
pub mod nnkernel;
pub mod seed;
pub mod transfer;

pub use error::{Error, Result};
