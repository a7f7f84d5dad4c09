pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod params;
pub mod predictor;
pub mod sce;
pub mod streams;
pub mod train;

pub use error::{Error, Result};
