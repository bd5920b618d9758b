//! Gap filling for multispectral image series.
//!
//! The crate covers the full pipeline: synthetic scene generation, cloud-mask
//! simulation via Gaussian random fields, from-scratch neural imputation
//! models (spatial CNNs and convolutional LSTMs), a linear-interpolation
//! baseline, pooled evaluation metrics, and water-quality index extraction.

pub mod baseline;
pub mod eval;
pub mod indices;
pub mod maskgen;
pub mod models;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;

pub use models::{ModelKind, ModelSpec};
pub use raster::{BandMetadata, CloudMask, ImageSeries, MultibandImage};
pub use train::{MultiRunResult, RunRecord, TrainConfig};
