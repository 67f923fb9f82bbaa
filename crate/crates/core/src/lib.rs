pub mod attend;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod export;
pub mod mining;
pub mod network;
pub mod optim;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
