//! Structure-preserving single-image deraining guided by the residue channel
//! prior: a three-stage wavelet multi-level network whose prior is refreshed
//! from each intermediate prediction.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rcp;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{ModelConfig, SpdNet, StageOutputs};
pub use params::ParamStore;
pub use rcp::{RgbImage, ResidueMap};
