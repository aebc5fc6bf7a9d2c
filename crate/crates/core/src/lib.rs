pub mod alloc;
pub mod checkpoint;
pub mod data;
pub mod edges;
pub mod error;
pub mod export;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod resample;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
