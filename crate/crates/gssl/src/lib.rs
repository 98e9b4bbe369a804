//! Graph-regularized semi-supervised training of feed-forward classifiers.
//!
//! The pipeline: build a kNN affinity graph over all points (labeled and
//! unlabeled), partition it into balanced blocks minimizing edge cut, group
//! blocks into meta-batches whose internal edges carry the graph regularizer,
//! then train with a composite loss (supervised cross-entropy, graph
//! divergence, entropy regularizer, L2) by sequential or barrier-synchronized
//! data-parallel SGD. Every stage is deterministic given its seeds.

pub mod batching;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod knngraph;
pub mod model;
pub mod partitioner;
pub mod util;

pub use error::Error;
