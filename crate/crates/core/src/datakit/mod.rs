//! Synthetic data, preprocessing, the on-disk volume format and the CLI.

pub mod cli;
mod normalize;
pub mod synth;
pub mod volume;

pub use normalize::normalize;
pub use synth::{generate_synthetic, generate_volume, generate_volumes, SynthConfig};
pub use volume::{list_volumes, Volume};
