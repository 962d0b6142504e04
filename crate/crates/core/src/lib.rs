//! Channel equilibrium layers and their verification tooling.

pub mod ce;
pub mod checkpoint;
pub mod data;
pub mod decorrelate;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod norm;
pub mod par;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{CeError, Result};
pub use rng::Rng;
pub use tensor::{ChannelVector, CovMatrix, FeatureMap, Matrix};
