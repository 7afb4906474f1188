pub mod backbone;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod metrics;
pub mod params;
pub mod patchify;
pub mod pose;
pub mod train;

pub use error::{CoreError, Result};
