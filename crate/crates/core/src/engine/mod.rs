//! Partitioned execution: key routing and the per-partition runtime.

mod partition;
mod runtime;

pub use partition::{partition_dir, BatchPath, Partition, PartitionConfig};
pub use runtime::{Engine, EngineConfig, NoTransport, Op, PartitionStatus, PromoteOutcome, Request, Response, Ticket, Transport};

use crate::types::PartitionId;

/// Stable partition for `key`: FNV-1a of the key bytes modulo the
/// partition count. Identical across processes and restarts.
pub fn route(key: &[u8], partitions: u32) -> PartitionId {
    assert!(partitions >= 1);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % partitions as u64) as PartitionId
}
