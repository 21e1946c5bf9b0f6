//! Restart path: load the newest usable index snapshot and rebuild only the
//! log tail. Data is never redone; only the index is reconstructed.

use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tracing::{info, warn};

use crate::engine::{Partition, PartitionConfig};
use crate::error::{Error, Result};
use crate::index::{read_snapshot_header, RadixIndex, SnapshotInfo};
use crate::replication::PartitionLsnState;
use crate::stats::SharedStats;
use crate::types::{Lsn, PartitionId, RecordKind};
use crate::wal::{LogPosition, LogRecord, PartitionLog, TailReport};

pub const SNAPSHOT_FILE: &str = "index.snap";

pub fn snapshot_path(partition_dir: &Path) -> PathBuf {
    partition_dir.join(SNAPSHOT_FILE)
}

/// Who decides which recovered records are committed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitSource {
    /// Single node: everything durable is committed.
    Local,
    /// Replica: the commit point is relearned from the leader.
    Leader,
}

#[derive(Clone, Debug)]
pub struct RecoveryReport {
    /// Snapshot the index was seeded from, if one was usable.
    pub snapshot: Option<SnapshotInfo>,
    /// Records read from the log during recovery.
    pub records_read: u64,
    pub tail: TailReport,
    pub flushed: Lsn,
    pub elapsed: Duration,
}

impl RecoveryReport {
    pub fn full_rebuild(&self) -> bool {
        self.snapshot.is_none()
    }
}

fn apply_to_index(index: &mut RadixIndex, rec: &LogRecord, pos: LogPosition) {
    match rec.kind {
        RecordKind::Put => {
            index.put(rec.key.clone(), pos, rec.lsn);
        }
        RecordKind::Delete => {
            index.remove_if_older(&rec.key, rec.lsn);
        }
    }
}

/// Finds a snapshot that reflects every compaction performed so far.
fn usable_snapshot(log: &PartitionLog, dir: &Path) -> Option<(RadixIndex, SnapshotInfo)> {
    let path = snapshot_path(dir);
    let header = match read_snapshot_header(&path) {
        Ok(h) => h,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::NotFound => return None,
        Err(e) => {
            warn!(path = %path.display(), %e, "unreadable snapshot; rebuilding from the log");
            return None;
        }
    };
    let covered = log.covered_lsn();
    if header.last_included_lsn < covered {
        info!(
            snapshot = %header.last_included_lsn,
            %covered,
            "snapshot predates the last compaction; rebuilding from the log"
        );
        return None;
    }
    match RadixIndex::load_snapshot_file(&path) {
        Ok(loaded) => Some(loaded),
        Err(e) => {
            warn!(path = %path.display(), %e, "corrupt snapshot; rebuilding from the log");
            None
        }
    }
}

/// Rebuilds the index for `log`, establishing its LSN frontier.
pub(crate) fn rebuild_index(log: &mut PartitionLog, dir: &Path) -> Result<(RadixIndex, RecoveryReport)> {
    let started = Instant::now();
    let reads_before = log.stats().recovery_records_read();
    let (mut index, snapshot) = match usable_snapshot(log, dir) {
        Some((index, info)) => (index, Some(info)),
        None => {
            let mut index = RadixIndex::new();
            log.replay_sorted(|rec, pos| apply_to_index(&mut index, rec, pos))?;
            (index, None)
        }
    };
    let start = snapshot.map_or(Lsn(1), |s| s.last_included_lsn.next());
    let mut tail = log.replay_from(start, |rec, pos| apply_to_index(&mut index, rec, pos))?;
    let mut snapshot = snapshot;
    if let Some(s) = snapshot {
        if s.last_included_lsn > log.last_lsn() {
            // The snapshot is ahead of the surviving log: it cannot describe it.
            warn!(snapshot = %s.last_included_lsn, log = %log.last_lsn(), "snapshot ahead of log; full rebuild");
            index = RadixIndex::new();
            log.replay_sorted(|rec, pos| apply_to_index(&mut index, rec, pos))?;
            tail = log.replay_from(Lsn(1), |rec, pos| apply_to_index(&mut index, rec, pos))?;
            snapshot = None;
        }
    }
    let report = RecoveryReport {
        snapshot,
        records_read: log.stats().recovery_records_read() - reads_before,
        tail,
        flushed: log.flushed_lsn(),
        elapsed: started.elapsed(),
    };
    Ok((index, report))
}

/// Opens a partition directory and restores its runtime.
pub fn recover_partition(
    dir: &Path,
    id: PartitionId,
    config: PartitionConfig,
    stats: SharedStats,
    commit: CommitSource,
) -> Result<(Partition, RecoveryReport)> {
    let mut log = PartitionLog::open(dir, id, config.log.clone(), stats.clone())?;
    let (index, report) = rebuild_index(&mut log, dir)?;
    let flushed = log.flushed_lsn();
    let lsn = match commit {
        CommitSource::Local => PartitionLsnState::all_at(flushed),
        CommitSource::Leader => PartitionLsnState::uncommitted(flushed),
    };
    info!(
        partition = id,
        %flushed,
        snapshot = ?report.snapshot.map(|s| s.last_included_lsn),
        records_read = report.records_read,
        keys = index.len(),
        elapsed_ms = report.elapsed.as_millis() as u64,
        "partition recovered"
    );
    Ok((
        Partition::from_parts(dir.to_path_buf(), id, config, log, index, lsn, stats),
        report,
    ))
}

/// Flushes the partition and atomically replaces its snapshot with one
/// covering everything flushed. On failure the previous snapshot remains.
pub fn write_checkpoint(p: &mut Partition) -> Result<SnapshotInfo> {
    let flushed = p.flush()?;
    let path = snapshot_path(&p.dir);
    let result = p.index.write_snapshot_file(&path, flushed, &p.stats);
    if result.is_err() {
        let _ = std::fs::remove_file(path.with_extension("tmp"));
    }
    let info = result?;
    p.since_checkpoint = 0;
    info!(partition = p.id, entries = info.entry_count, lsn = %flushed, "checkpoint written");
    Ok(info)
}

/// Removes a snapshot that describes records above `keep`.
pub(crate) fn discard_snapshot_above(dir: &Path, keep: Lsn) -> Result<()> {
    let path = snapshot_path(dir);
    match read_snapshot_header(&path) {
        Ok(h) if h.last_included_lsn > keep => {
            std::fs::remove_file(&path)?;
            Ok(())
        }
        Ok(_) => Ok(()),
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(_) => {
            let _ = std::fs::remove_file(&path);
            Ok(())
        }
    }
}
