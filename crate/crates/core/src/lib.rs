// `as f64` on Scalar values is a no-op unless the f32 feature is on.
#![allow(clippy::unnecessary_cast)]

pub mod analysis;
pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod gghost;
pub mod ghost;
pub mod params;
pub mod program;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
