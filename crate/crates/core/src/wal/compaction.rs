//! Merge compaction: sorted + sealed unsorted segments → one sorted segment.

use std::collections::BTreeMap;
use std::fs;

use bytes::Bytes;
use tracing::{info, warn};

use super::manifest::{SegmentMeta, SegmentState};
use super::segment::{segment_file_name, write_sorted_file, Segment, SegmentScanner};
use super::{LogPosition, PartitionLog};
use crate::error::{Error, Result};
use crate::stats::IoStats;
use crate::types::{Lsn, RecordKind};
use crate::wal::LogRecord;

/// What a compaction produced.
#[derive(Debug, Clone)]
pub struct CompactionOutput {
    /// The new sorted segment (possibly empty).
    pub segment: SegmentMeta,
    /// Surviving keys with the LSN of their newest record and its new location.
    pub remap: Vec<(Bytes, Lsn, LogPosition)>,
    /// Segment ids consumed (files already deleted).
    pub removed: Vec<u32>,
    /// Highest LSN folded into the output.
    pub covered_lsn: Lsn,
}

impl PartitionLog {
    /// Merges every sorted segment with every sealed unsorted segment.
    /// Returns `None` when there is nothing sealed to merge.
    pub fn compact(&mut self) -> Result<Option<CompactionOutput>> {
        let sorted: Vec<u32> = self
            .segments
            .values()
            .filter(|s| s.meta.state == SegmentState::Sorted)
            .map(|s| s.meta.segment_id)
            .collect();
        let sealed: Vec<u32> = self
            .segments
            .values()
            .filter(|s| s.meta.state == SegmentState::SealedUnsorted)
            .map(|s| s.meta.segment_id)
            .collect();
        if sealed.is_empty() {
            return Ok(None);
        }
        self.compact_segments(&sorted, &sealed).map(Some)
    }

    /// Bytes in sealed unsorted segments and in sorted segments.
    pub fn compaction_pressure(&self) -> (u64, u64) {
        let mut sealed = 0;
        let mut sorted = 0;
        for s in self.segments.values() {
            match s.meta.state {
                SegmentState::SealedUnsorted => sealed += s.meta.file_size,
                SegmentState::Sorted => sorted += s.meta.file_size,
                SegmentState::Active => {}
            }
        }
        (sealed, sorted)
    }

    /// Merges the given inputs into one sorted segment keeping, per key, only
    /// the record with the highest LSN and dropping keys whose newest record
    /// is a tombstone.
    ///
    /// `sorted` must name every sorted segment and `unsorted` the oldest
    /// sealed segments, so that a dropped tombstone can never uncover an
    /// older value left outside the merge. All-or-nothing: on error the
    /// inputs are untouched.
    pub fn compact_segments(&mut self, sorted: &[u32], unsorted: &[u32]) -> Result<CompactionOutput> {
        if self.faulted {
            return Err(Error::Faulted(self.partition));
        }
        let all_sorted: Vec<u32> = self
            .segments
            .values()
            .filter(|s| s.meta.state == SegmentState::Sorted)
            .map(|s| s.meta.segment_id)
            .collect();
        let mut want_sorted = sorted.to_vec();
        want_sorted.sort_unstable();
        if want_sorted != all_sorted {
            return Err(Error::Config("compaction must include every sorted segment".into()));
        }
        let all_sealed: Vec<u32> = self
            .segments
            .values()
            .filter(|s| s.meta.state == SegmentState::SealedUnsorted)
            .map(|s| s.meta.segment_id)
            .collect();
        let mut want_unsorted = unsorted.to_vec();
        want_unsorted.sort_unstable();
        if all_sealed.get(..want_unsorted.len()) != Some(&want_unsorted[..]) {
            return Err(Error::Config(
                "unsorted compaction inputs must be the oldest sealed segments".into(),
            ));
        }

        let mut newest: BTreeMap<Bytes, LogRecord> = BTreeMap::new();
        let mut covered = Lsn::NONE;
        for id in want_sorted.iter().chain(want_unsorted.iter()) {
            let seg = &self.segments[id];
            covered = covered.max(seg.meta.covered_lsn).max(seg.meta.max_lsn);
            let mut scanner = SegmentScanner::open(&seg.path, self.partition, seg.records_end, Lsn::NONE)?;
            while let Some(item) = scanner.next_item()? {
                let rec = item.record.expect("no skipping");
                IoStats::add(&self.stats.scan_records, 1);
                match newest.get(&rec.key) {
                    Some(existing) if existing.lsn >= rec.lsn => {}
                    _ => {
                        newest.insert(rec.key.clone(), rec);
                    }
                }
            }
            if let Some(end @ (super::ScanEnd::Corrupt { .. } | super::ScanEnd::Torn { .. })) = scanner.ended {
                warn!(partition = self.partition, segment = id, ?end, "damaged compaction input");
                return Err(Error::Unrecoverable {
                    segment: *id,
                    offset: match end {
                        super::ScanEnd::Corrupt { offset } | super::ScanEnd::Torn { offset } => offset,
                        super::ScanEnd::Clean => 0,
                    },
                });
            }
        }
        let survivors: Vec<LogRecord> = newest
            .into_values()
            .filter(|r| r.kind == RecordKind::Put)
            .collect();

        // The output is written even when empty: it carries `covered_lsn`,
        // which tells recovery not to trust snapshots older than this merge.
        let new_id = self.next_segment;
        let path = self.dir.join(segment_file_name(self.partition, new_id));
        let written = write_sorted_file(
            &path,
            self.partition,
            new_id,
            &survivors,
            self.config.sorted_dir_interval,
            &self.stats,
        );
        let (positions, size) = match written {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_file(&path);
                return Err(e);
            }
        };
        let meta = SegmentMeta {
            segment_id: new_id,
            state: SegmentState::Sorted,
            min_lsn: survivors.iter().map(|r| r.lsn).min().unwrap_or(Lsn::NONE),
            max_lsn: survivors.iter().map(|r| r.lsn).max().unwrap_or(Lsn::NONE),
            record_count: survivors.len() as u64,
            file_size: size,
            covered_lsn: covered,
        };
        let seg = match Segment::open(&self.dir, self.partition, meta.clone()) {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_file(&path);
                return Err(e);
            }
        };
        let remap: Vec<(Bytes, Lsn, LogPosition)> = survivors
            .iter()
            .zip(positions)
            .map(|(rec, pos)| (rec.key.clone(), rec.lsn, pos))
            .collect();
        self.segments.insert(new_id, seg);
        self.next_segment += 1;

        let removed: Vec<u32> = want_sorted.iter().chain(want_unsorted.iter()).copied().collect();
        let mut old = Vec::with_capacity(removed.len());
        for id in &removed {
            old.push(self.segments.remove(id).unwrap());
        }
        if let Err(e) = self.store_manifest() {
            // Manifest not committed: put the inputs back, discard the output.
            if let Some(seg) = self.segments.remove(&new_id) {
                let _ = seg.remove_file();
            }
            for seg in old {
                self.segments.insert(seg.meta.segment_id, seg);
            }
            self.next_segment -= 1;
            return Err(e);
        }
        for seg in old {
            if let Err(e) = seg.remove_file() {
                warn!(path = %seg.path.display(), %e, "failed to delete compacted segment");
            }
        }
        info!(
            partition = self.partition,
            output = new_id,
            keys = remap.len(),
            "compaction finished"
        );
        Ok(CompactionOutput {
            segment: meta,
            remap,
            removed,
            covered_lsn: covered,
        })
    }
}
