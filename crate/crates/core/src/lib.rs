pub mod bcr;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod rldf;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
