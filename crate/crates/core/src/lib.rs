pub mod autograd;
pub mod error;
pub mod fusion;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scenegraph;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
