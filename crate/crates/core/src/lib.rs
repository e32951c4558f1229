pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod imp;
pub mod landscape;
pub mod model;
pub mod prune;
pub mod rng;
pub mod scores;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
