pub mod baselines;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod media_io;
pub mod nn;
pub mod roi;
pub mod signals;
pub mod selftest;
pub mod synth;
pub mod train_eval;

pub use error::{Error, Result};
