use std::io;

use thiserror::Error;

use crate::types::{Lsn, NodeId, PartitionId};
use crate::wal::LogPosition;

/// Errors returned by the storage engine and replication layer.
#[derive(Error, Debug)]
pub enum Error {
    /// Error from I/O operations.
    #[error("I/O error - {0}")]
    Io(#[from] io::Error),

    /// A record failed its checksum or could not be decoded.
    #[error("corrupt record at {position:?}: {reason}")]
    CorruptRecord {
        position: LogPosition,
        reason: &'static str,
    },

    /// A position does not resolve to a record.
    #[error("invalid log position {0:?}")]
    InvalidPosition(LogPosition),

    /// Appends must carry the next LSN of the partition.
    #[error("LSN out of order: expected {expected}, got {got}")]
    LsnGap { expected: Lsn, got: Lsn },

    #[error("empty key")]
    EmptyKey,

    /// The partition hit an I/O failure earlier and only serves reads.
    #[error("partition {0} is in read-only fault state")]
    Faulted(PartitionId),

    /// A snapshot file failed validation.
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(&'static str),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    /// A non-tail record is damaged; recovery refuses to skip it.
    #[error("unrecoverable log corruption in segment {segment} at offset {offset}")]
    Unrecoverable { segment: u32, offset: u64 },

    /// Modifications must go to the partition leader.
    #[error("not leader for partition {partition}; leader is {leader:?}")]
    NotLeader {
        partition: PartitionId,
        leader: Option<NodeId>,
    },

    /// Request queue is full; retry later.
    #[error("partition {0} queue full")]
    Backpressure(PartitionId),

    /// Follower read whose read view cannot be served.
    #[error("read view {requested} rejected (flushed {flushed}); retry later")]
    ReadRejected { requested: Lsn, flushed: Lsn },

    /// Promotion refused because a reachable peer has a longer log.
    #[error("promotion refused: peer {peer} has flushed {peer_flushed} > {local_flushed}")]
    PromotionRefused {
        peer: NodeId,
        peer_flushed: Lsn,
        local_flushed: Lsn,
    },

    /// A message from an older leader epoch.
    #[error("stale epoch {got} (current {current})")]
    StaleEpoch { got: u64, current: u64 },

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("engine stopped")]
    Stopped,

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
