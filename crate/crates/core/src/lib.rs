pub mod dataset;
pub mod error;
pub mod flow;
pub mod harness;
pub mod imaging;
pub mod keyframe;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod preprocess;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
