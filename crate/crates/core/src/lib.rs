//! Home location inference from geotagged check-ins.
//!
//! A random-forest pass keeps every location record that at least a small
//! share of trees votes as home. A regression network then scores the
//! survivors and picks one per user, and a classification network decides
//! whether that pick is confident enough to report.

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod forest;
pub mod geo;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synth;

pub use config::RunConfig;
pub use data::{CheckIn, Dataset, FeatureVector, HomePrediction, LocationRecord};
pub use error::{Error, Result};
pub use geo::GeoPoint;
pub use pipeline::PipelineArtifact;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
