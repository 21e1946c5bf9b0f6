//! One partition's state: log, index, cache and LSN frontier, driven by a
//! single executor.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::thread::ThreadId;

use bytes::Bytes;
use tracing::{debug, info};

use crate::cache::{CacheConfig, CacheStats, ReadCache, TwoStageCache};
use crate::error::{Error, Result};
use crate::index::{RadixIndex, SnapshotInfo};
use crate::recovery::{self, CommitSource, RecoveryReport};
use crate::replication::PartitionLsnState;
use crate::stats::SharedStats;
use crate::types::{Lsn, PartitionId, RecordKind};
use crate::wal::{CompactionOutput, LogConfig, LogRecord, PartitionLog, SegmentState};

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub log: LogConfig,
    pub cache: CacheConfig,
    /// Batch reads covering more than this fraction of live keys use a
    /// sequential scan instead of point lookups.
    pub batch_scan_fraction: f64,
    /// Take an index checkpoint after this many appended records (0 = never).
    pub checkpoint_every: u64,
    /// Compact once this many sealed segments accumulate (0 = never).
    pub compact_after_sealed: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            log: LogConfig::default(),
            cache: CacheConfig::default(),
            batch_scan_fraction: 0.1,
            checkpoint_every: 1 << 20,
            compact_after_sealed: 4,
        }
    }
}

/// Which strategy answered a batch read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchPath {
    Index,
    Scan,
}

/// Directory of partition `id` under a node's data directory.
pub fn partition_dir(data_dir: &Path, id: PartitionId) -> PathBuf {
    data_dir.join(format!("p{id}"))
}

pub struct Partition {
    pub(crate) id: PartitionId,
    pub(crate) dir: PathBuf,
    pub(crate) config: PartitionConfig,
    pub(crate) log: PartitionLog,
    pub(crate) index: RadixIndex,
    pub(crate) cache: TwoStageCache,
    pub(crate) lsn: PartitionLsnState,
    pub(crate) stats: SharedStats,
    pub(crate) since_checkpoint: u64,
    owner: Cell<Option<ThreadId>>,
}

impl Partition {
    /// Opens the partition in `dir`, recovering its index from the newest
    /// usable snapshot plus the log tail.
    pub fn open(
        dir: &Path,
        id: PartitionId,
        config: PartitionConfig,
        stats: SharedStats,
        commit: CommitSource,
    ) -> Result<(Partition, RecoveryReport)> {
        recovery::recover_partition(dir, id, config, stats, commit)
    }

    pub(crate) fn from_parts(
        dir: PathBuf,
        id: PartitionId,
        config: PartitionConfig,
        log: PartitionLog,
        index: RadixIndex,
        lsn: PartitionLsnState,
        stats: SharedStats,
    ) -> Partition {
        let cache = TwoStageCache::new(CacheConfig {
            seed: config.cache.seed ^ id as u64,
            ..config.cache
        });
        Partition {
            id,
            dir,
            config,
            log,
            index,
            cache,
            lsn,
            stats,
            since_checkpoint: 0,
            owner: Cell::new(None),
        }
    }

    /// Single-executor check: the first thread to run an operation owns the
    /// partition until [`Partition::release_owner`].
    #[inline]
    fn check_owner(&self) {
        if cfg!(debug_assertions) {
            let me = std::thread::current().id();
            match self.owner.get() {
                None => self.owner.set(Some(me)),
                Some(o) => assert_eq!(o, me, "partition {} used from two threads", self.id),
            }
        }
    }

    /// Allows another thread to take over (hand-off between phases).
    pub fn release_owner(&self) {
        self.owner.set(None);
    }

    pub fn id(&self) -> PartitionId {
        self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn stats(&self) -> &SharedStats {
        &self.stats
    }

    pub fn lsn_state(&self) -> PartitionLsnState {
        self.lsn
    }

    pub fn lsn_state_mut(&mut self) -> &mut PartitionLsnState {
        &mut self.lsn
    }

    pub fn log(&self) -> &PartitionLog {
        &self.log
    }

    pub fn index(&self) -> &RadixIndex {
        &self.index
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn cache(&self) -> &TwoStageCache {
        &self.cache
    }

    pub fn live_keys(&self) -> usize {
        self.index.len()
    }

    /// LSN the next locally-assigned record gets.
    pub fn next_lsn(&self) -> Lsn {
        self.log.last_lsn().next()
    }

    pub fn last_lsn(&self) -> Lsn {
        self.log.last_lsn()
    }

    /// Appends a PUT at `lsn` and points the index at it. Not durable until
    /// [`Partition::flush`].
    pub fn exec_put(&mut self, key: Bytes, value: Bytes, lsn: Lsn) -> Result<Lsn> {
        self.apply(LogRecord::put(self.id, lsn, key, value))?;
        Ok(lsn)
    }

    /// Removes `key` and appends a tombstone at `lsn` (even if the key was
    /// absent). Returns whether the key existed.
    pub fn exec_delete(&mut self, key: Bytes, lsn: Lsn) -> Result<bool> {
        self.apply(LogRecord::delete(self.id, lsn, key))
    }

    /// Applies a record that already carries its LSN (local or replicated).
    /// Returns whether a previous live value existed for deletes.
    pub fn apply(&mut self, rec: LogRecord) -> Result<bool> {
        self.check_owner();
        if rec.key.is_empty() {
            return Err(Error::EmptyKey);
        }
        let existed = match rec.kind {
            RecordKind::Put => {
                let pos = self.log.append_record(&rec)?;
                self.index.put(rec.key.clone(), pos, rec.lsn);
                self.cache.refresh(rec.key, rec.value, rec.lsn);
                true
            }
            RecordKind::Delete => {
                self.cache.invalidate(&rec.key);
                let existed = self.index.remove_if_older(&rec.key, rec.lsn).is_some();
                self.log.append_record(&rec)?;
                existed
            }
        };
        self.since_checkpoint += 1;
        Ok(existed)
    }

    /// Group flush: makes every appended record durable and advances the
    /// flushed frontier.
    pub fn flush(&mut self) -> Result<Lsn> {
        self.check_owner();
        let flushed = self.log.flush()?;
        self.lsn.advance_flushed(flushed);
        Ok(flushed)
    }

    /// Single-node commit: flushed records are committed and visible.
    pub fn commit_local(&mut self) -> Result<Lsn> {
        let flushed = self.flush()?;
        self.lsn.advance_commit(flushed);
        self.lsn.replay_to_commit();
        Ok(flushed)
    }

    /// Cache first, then one log read through the index.
    pub fn exec_get(&mut self, key: &[u8]) -> Result<Option<Bytes>> {
        self.check_owner();
        if let Some((value, _)) = self.cache.get(key) {
            return Ok(Some(value));
        }
        let Some(entry) = self.index.get(key) else {
            return Ok(None);
        };
        let rec = self.read_entry(key, entry.position)?;
        self.cache.admit(entry.key, rec.value.clone(), entry.version_lsn);
        Ok(Some(rec.value))
    }

    fn read_entry(&self, key: &[u8], position: crate::wal::LogPosition) -> Result<LogRecord> {
        let rec = self.log.read_at(position)?;
        if rec.key.as_ref() != key || rec.kind != RecordKind::Put {
            return Err(Error::CorruptRecord {
                position,
                reason: "index points at a different record",
            });
        }
        Ok(rec)
    }

    /// Changes the batch-read crossover. `0.0` always scans, infinity never does.
    pub fn set_batch_scan_fraction(&mut self, fraction: f64) {
        self.config.batch_scan_fraction = fraction;
    }

    /// Answers a batch read, choosing point lookups or one sequential scan.
    pub fn exec_batch_get(&mut self, keys: &[Bytes]) -> Result<(Vec<(Bytes, Option<Bytes>)>, BatchPath)> {
        self.check_owner();
        let mut seen = HashSet::with_capacity(keys.len());
        let keys: Vec<Bytes> = keys.iter().filter(|k| seen.insert(*k)).cloned().collect();
        let live = self.index.len();
        let scan = live > 0 && keys.len() as f64 / live as f64 > self.config.batch_scan_fraction;
        if !scan {
            let mut out = Vec::with_capacity(keys.len());
            for k in keys {
                let v = self.exec_get(&k)?;
                out.push((k, v));
            }
            return Ok((out, BatchPath::Index));
        }
        // Newest record per requested key across all segments decides the
        // answer, exactly as the index would.
        let mut newest: HashMap<Bytes, (Lsn, Option<Bytes>)> = keys.iter().map(|k| (k.clone(), (Lsn::NONE, None))).collect();
        self.log.scan_all(|rec, _| {
            if let Some(slot) = newest.get_mut(&rec.key) {
                if rec.lsn > slot.0 {
                    *slot = (
                        rec.lsn,
                        (rec.kind == RecordKind::Put).then(|| rec.value.clone()),
                    );
                }
            }
        })?;
        let out = keys
            .into_iter()
            .map(|k| {
                let v = newest.remove(&k).and_then(|(_, v)| v);
                (k, v)
            })
            .collect();
        Ok((out, BatchPath::Scan))
    }

    /// Keys in `[start, end)` in ascending order with their values.
    pub fn exec_range(&mut self, start: &[u8], end: &[u8], limit: usize) -> Result<Vec<(Bytes, Bytes)>> {
        self.check_owner();
        let entries = self.index.range(start, end, limit);
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let value = match self.cache.get(&e.key) {
                Some((v, _)) => v,
                None => self.read_entry(&e.key, e.position)?.value,
            };
            out.push((e.key, value));
        }
        Ok(out)
    }

    /// Writes an index snapshot covering everything flushed so far.
    pub fn checkpoint(&mut self) -> Result<SnapshotInfo> {
        self.check_owner();
        recovery::write_checkpoint(self)
    }

    /// Checkpoints if enough records were appended since the last one.
    pub fn maybe_checkpoint(&mut self) -> Result<Option<SnapshotInfo>> {
        if self.config.checkpoint_every > 0 && self.since_checkpoint >= self.config.checkpoint_every {
            return self.checkpoint().map(Some);
        }
        Ok(None)
    }

    /// Seals the active segment and compacts everything sealed.
    pub fn force_compact(&mut self) -> Result<Option<CompactionOutput>> {
        self.check_owner();
        self.flush()?;
        self.log.seal_and_rotate()?;
        self.compact_sealed(Lsn(u64::MAX))
    }

    /// Compacts when the sealed-segment count reaches the configured trigger.
    pub fn maybe_compact(&mut self, up_to: Lsn) -> Result<Option<CompactionOutput>> {
        let sealed = self
            .log
            .segments()
            .iter()
            .filter(|s| s.state == SegmentState::SealedUnsorted && s.max_lsn <= up_to)
            .count();
        if self.config.compact_after_sealed > 0 && sealed >= self.config.compact_after_sealed {
            return self.compact_sealed(up_to);
        }
        Ok(None)
    }

    /// Merges every sorted segment with the oldest sealed segments whose
    /// records are all at or below `up_to` (e.g. acknowledged by every
    /// replica), repoints the index, and checkpoints.
    pub fn compact_sealed(&mut self, up_to: Lsn) -> Result<Option<CompactionOutput>> {
        self.check_owner();
        let metas = self.log.segments();
        let sorted: Vec<u32> = metas
            .iter()
            .filter(|s| s.state == SegmentState::Sorted)
            .map(|s| s.segment_id)
            .collect();
        let unsorted: Vec<u32> = metas
            .iter()
            .filter(|s| s.state == SegmentState::SealedUnsorted)
            .take_while(|s| s.max_lsn <= up_to)
            .map(|s| s.segment_id)
            .collect();
        if unsorted.is_empty() {
            return Ok(None);
        }
        let out = self.log.compact_segments(&sorted, &unsorted)?;
        let mut moved = 0usize;
        for (key, lsn, pos) in &out.remap {
            if self.index.relocate(key, *lsn, *pos) {
                moved += 1;
            }
        }
        debug!(partition = self.id, moved, "index repointed after compaction");
        self.checkpoint()?;
        info!(partition = self.id, segment = out.segment.segment_id, "compacted");
        Ok(Some(out))
    }

    /// Drops log records above `keep` and rebuilds the index to match.
    pub fn truncate_after(&mut self, keep: Lsn) -> Result<()> {
        self.check_owner();
        if keep >= self.log.last_lsn() {
            return Ok(());
        }
        recovery::discard_snapshot_above(&self.dir, keep)?;
        self.log.truncate_after(keep)?;
        let (index, _) = recovery::rebuild_index(&mut self.log, &self.dir)?;
        self.index = index;
        self.cache = TwoStageCache::new(self.cache.config().to_owned());
        self.lsn.truncate(keep);
        Ok(())
    }
}
