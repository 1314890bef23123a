//! Benchmark harness, scenario generation and rendering for `kinoplan`.

pub mod fixtures;
pub mod harness;
pub mod render;
pub mod scenario;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown built-in `{0}`")]
    UnknownBuiltin(String),
    #[error("map {reference}: {message}")]
    Map { reference: String, message: String },
    #[error("suite: {0}")]
    Suite(String),
    #[error("records: {0}")]
    Records(String),
    #[error("records: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
