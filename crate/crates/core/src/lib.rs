pub mod backbone;
pub mod bridge;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod raster;
pub mod training;
mod rawio;

pub use error::{Error, Result};
