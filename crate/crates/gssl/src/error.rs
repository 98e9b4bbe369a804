//! Crate-level error type aggregating the per-module errors.

use thiserror::Error;

use crate::batching::BatchError;
use crate::config::ConfigError;
use crate::dataio::DataError;
use crate::engine::EngineError;
use crate::knngraph::GraphError;
use crate::model::ModelError;
use crate::partitioner::PartitionError;

/// Any error the pipeline can produce, tagged by the module it came from so
/// callers (the CLI in particular) can report the originating stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] EngineError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// IO failures from the CLI's own file handling (run directory setup,
    /// metrics/echo files); module-level formats wrap their own IO errors.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Name of the module the error originated in.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Data(_) => "dataio",
            Error::Graph(_) => "knngraph",
            Error::Partition(_) => "partitioner",
            Error::Batch(_) => "batching",
            Error::Model(_) => "model",
            Error::Train(_) => "engine",
            Error::Config(_) => "config",
            Error::Io { .. } => "cli",
        }
    }
}
