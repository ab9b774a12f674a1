//! Structure-guided texture reconstruction for image inpainting.

pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod pconv;
pub mod recon;
pub mod report;
pub mod structure;
pub mod texture;
pub mod train;
pub mod variant;

pub use config::Config;
pub use error::{Error, Result};
pub use variant::ReconVariant;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
