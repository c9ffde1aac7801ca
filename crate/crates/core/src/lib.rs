//! Visual query localization laboratory: query-conditioned detection heads,
//! proposal-set samplers, a detect-then-track localization pipeline, the
//! evaluation metrics and a synthetic video benchmark.

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod heads;
pub mod localize;
pub mod metrics;
pub mod params;
pub mod sampling;
pub mod seed;
pub mod synthgen;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use geometry::BBox;
