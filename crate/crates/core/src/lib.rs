pub mod cache;
pub mod engine;
pub mod error;
pub mod index;
pub mod recovery;
pub mod replication;
pub mod sim;
pub mod stats;
pub mod types;
pub mod wal;
pub mod workload;

pub use error::{Error, Result};
pub use types::{quorum, Lsn, NodeId, PartitionId, RecordKind, Role};
