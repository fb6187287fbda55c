pub mod audio;
pub mod config;
pub mod container;
pub mod dsp;
pub mod error;
pub mod features;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod recon;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Result, TimbreError};
pub use features::{AudioClip, FeatureStack};
