pub mod alignment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod signal_prep;
pub mod synth;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
