//! Quorum log replication.

mod follower;
mod leader;
mod state;
pub mod wire;

pub use follower::{check_promotion, EpochMeta, FollowerReplica, EPOCH_FILE};
pub use leader::{QuorumTracker, ReplyQueue, SendWindow};
pub use state::{freshness_score, read_gate, PartitionLsnState, ReadDecision};
pub use wire::ReplMessage;
