//! Estimating where a short text message was written, as a probability
//! density over the globe.
//!
//! Each n-gram seen often enough in geotagged training messages gets a
//! two-dimensional gaussian mixture fitted to the origins of the messages
//! containing it. A new message is located by mixing the densities of its
//! known n-grams, weighted per n-gram. Estimates are scored for accuracy
//! (comprehensive and simple accuracy error), precision (prediction region
//! area) and calibration (observed coverage).

pub mod corpus;
pub mod error;
pub mod geo;
pub mod gmm;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod synthgen;
pub mod tokenize;
pub mod weighting;

pub use corpus::{RawRecord, Schedule};
pub use geo::GeoPoint;
pub use gmm::Gmm2D;
pub use model::{LocationModel, MessageDensity, TrainConfig, WeightingAlgo};
pub use tokenize::{Field, FieldSet, Message, NGram};
