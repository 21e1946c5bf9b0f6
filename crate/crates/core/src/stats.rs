//! Instrumentation counters shared by the log, snapshot and recovery paths.
//!
//! Every byte the engine writes to disk goes through one of the `record_*`
//! helpers, so tests can check that user data is written exactly once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct IoStats {
    /// Bytes of framed records appended to active segments.
    pub log_bytes_written: AtomicU64,
    /// Bytes written into sorted segments by compaction (records + directory).
    pub compaction_bytes_written: AtomicU64,
    /// Bytes of index snapshot files.
    pub snapshot_bytes_written: AtomicU64,
    /// Bytes of MANIFEST rewrites.
    pub manifest_bytes_written: AtomicU64,
    /// Number of `write` calls against segment files.
    pub log_write_calls: AtomicU64,
    /// Number of file syncs on segment files.
    pub log_syncs: AtomicU64,
    /// Positioned record reads (`read_at`).
    pub record_reads: AtomicU64,
    /// Records decoded while scanning the log sequentially (scans, compaction).
    pub scan_records: AtomicU64,
    /// Records replayed into the index during recovery.
    pub recovery_records_read: AtomicU64,
}

pub type SharedStats = Arc<IoStats>;

macro_rules! getter {
    ($name:ident) => {
        pub fn $name(&self) -> u64 {
            self.$name.load(Ordering::Relaxed)
        }
    };
}

impl IoStats {
    pub fn new() -> SharedStats {
        Arc::new(IoStats::default())
    }

    pub(crate) fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    getter!(log_bytes_written);
    getter!(compaction_bytes_written);
    getter!(snapshot_bytes_written);
    getter!(manifest_bytes_written);
    getter!(log_write_calls);
    getter!(log_syncs);
    getter!(record_reads);
    getter!(scan_records);
    getter!(recovery_records_read);

    /// Total bytes written to disk by the engine, all file kinds included.
    pub fn total_bytes_written(&self) -> u64 {
        self.log_bytes_written()
            + self.compaction_bytes_written()
            + self.snapshot_bytes_written()
            + self.manifest_bytes_written()
    }
}
