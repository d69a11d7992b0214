pub mod backbone;
pub mod container;
pub mod datapipe;
pub mod denoiser;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod nn;
pub mod raster;
pub mod simworld;
pub mod tokenizers;
pub mod trainengine;

pub use error::{Error, Result};
