use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
}

/// A corpus line that could not be turned into a record.
#[derive(Debug, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error)]
pub enum ParseErrorKind {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty id")]
    EmptyId,
    #[error("bad timestamp {0:?}")]
    Timestamp(String),
    #[error("only one of lon/lat present")]
    HalfCoordinate,
    #[error(transparent)]
    Coordinate(#[from] GeoError),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("bad corpus pattern {0:?}")]
    Pattern(String),
    #[error("pattern {0:?} matched no files")]
    NoFiles(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training record {0} has no geotag")]
    MissingOrigin(String),
    #[error("no field selected")]
    NoFields,
    #[error("no n-gram occurs at least {0} times")]
    NoNgrams(usize),
    #[error("weight optimization failed: {0}")]
    Optimization(#[from] OptimizeError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("objective became non-finite at iteration {iteration} (value {value})")]
    NonFinite { iteration: usize, value: f64 },
    #[error("parameter dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Failures reading a serialized model.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("model file truncated")]
    Truncated,
    #[error("model checksum mismatch")]
    Checksum,
    #[error("malformed model: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(String),
}
