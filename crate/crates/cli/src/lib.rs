//! Batch driver: configuration, ingestion, shard planning and claiming, the
//! per-image pipeline, ordered output writing and the efficiency bench.

pub mod bench;
pub mod claim;
pub mod config;
pub mod corpus;
pub mod layout;
pub mod pipeline;
pub mod run;
pub mod shard;
pub mod writer;

pub use config::{ConfigError, Features, PipelineConfig};
pub use layout::Layout;
pub use pipeline::{Engine, RunError};
pub use run::{run_worker, RunOptions, Summary};
