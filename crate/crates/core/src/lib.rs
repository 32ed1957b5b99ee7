pub mod datakit;
pub mod error;
pub mod hypercolumn;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod segmenter;

pub use error::{Error, Result};
