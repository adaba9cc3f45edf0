pub mod assignment;
pub mod config;
pub mod detection;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod evolution;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod reduction;
pub mod synth;

pub use error::{Error, Result};
