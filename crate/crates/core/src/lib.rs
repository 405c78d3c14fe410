pub mod error;
pub mod dataio;
pub mod features;
pub mod fft;
pub mod grid;
pub mod homogenize;
pub mod metrics;
pub mod mining;
pub mod models;
pub mod selection;

pub use error::{Category, CoreError, Result};
