//! Segmented append-only log: the only durable copy of the data.
//!
//! A partition's log is a directory of segment files plus a MANIFEST. One
//! segment is active and receives appends; older segments are either sealed
//! (still in LSN order) or sorted by key after compaction. Every record is
//! written exactly once by `append`; only compaction rewrites it.

mod compaction;
mod manifest;
mod record;
mod segment;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bytes::Bytes;
use tracing::{debug, warn};

pub use self::compaction::CompactionOutput;
pub use self::manifest::{Manifest, SegmentMeta, SegmentState, MANIFEST_NAME};
pub use self::record::{DecodeError, LogRecord, RecordHeader, HEADER_LEN};
pub use self::segment::{segment_file_name, ScanEnd};
pub(crate) use self::manifest::sync_dir;
use self::segment::{Segment, SegmentScanner};
use crate::error::{Error, Result};
use crate::stats::{IoStats, SharedStats};
use crate::types::{Lsn, PartitionId, RecordKind};

/// Location of a record header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LogPosition {
    pub segment_id: u32,
    pub offset: u64,
}

/// When appended records are made durable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushPolicy {
    /// One write + sync per executed batch.
    Group,
    /// Write and sync every record.
    PerRecord,
    /// One write per batch, no sync (page cache only). For experiments.
    OsBuffered,
}

impl std::str::FromStr for FlushPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "group" => Ok(FlushPolicy::Group),
            "record" | "per-record" => Ok(FlushPolicy::PerRecord),
            "os" | "os-buffered" => Ok(FlushPolicy::OsBuffered),
            other => Err(format!("unknown flush policy {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogConfig {
    pub segment_bytes: u64,
    pub flush: FlushPolicy,
    /// Bytes fetched by the single positioned read of `read_at`.
    pub read_ahead: usize,
    /// Records between sparse key-directory marks in sorted segments.
    pub sorted_dir_interval: usize,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            segment_bytes: 64 << 20,
            flush: FlushPolicy::Group,
            read_ahead: 8192,
            sorted_dir_interval: 64,
        }
    }
}

/// Result of scanning the unsorted tail of a log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TailReport {
    /// Highest LSN of a valid record, including skipped ones.
    pub last_valid: Lsn,
    /// Where the scan stopped.
    pub end: ScanEnd,
    /// Segment holding the stop point.
    pub segment_id: Option<u32>,
}

/// The log of one partition.
pub struct PartitionLog {
    dir: PathBuf,
    partition: PartitionId,
    config: LogConfig,
    stats: SharedStats,
    segments: BTreeMap<u32, Segment>,
    active: u32,
    next_segment: u32,
    last_lsn: Lsn,
    flushed_lsn: Lsn,
    faulted: bool,
}

impl PartitionLog {
    /// Opens (or creates) the log in `dir`. Unsorted segments are not
    /// scanned here; call [`PartitionLog::replay_from`] before appending to
    /// an existing log.
    pub fn open(dir: &Path, partition: PartitionId, config: LogConfig, stats: SharedStats) -> Result<PartitionLog> {
        fs::create_dir_all(dir)?;
        let mut log = PartitionLog {
            dir: dir.to_path_buf(),
            partition,
            config,
            stats,
            segments: BTreeMap::new(),
            active: 0,
            next_segment: 0,
            last_lsn: Lsn::NONE,
            flushed_lsn: Lsn::NONE,
            faulted: false,
        };
        match Manifest::load(dir)? {
            None => {
                let seg = Segment::create(dir, partition, 0)?;
                log.segments.insert(0, seg);
                log.next_segment = 1;
                log.store_manifest()?;
            }
            Some(manifest) => {
                log.next_segment = manifest.next_segment;
                for meta in manifest.segments {
                    let id = meta.segment_id;
                    if meta.state == SegmentState::Active {
                        log.active = id;
                    }
                    let seg = Segment::open(dir, partition, meta)?;
                    log.segments.insert(id, seg);
                }
                if !log.segments.get(&log.active).is_some_and(|s| s.meta.state == SegmentState::Active) {
                    return Err(Error::CorruptManifest("no active segment".into()));
                }
                // Sealed segment metadata is exact; seed the LSN frontier from
                // it until the tail scan refines it.
                let sealed_max = log
                    .segments
                    .values()
                    .filter(|s| s.meta.state == SegmentState::SealedUnsorted)
                    .map(|s| s.meta.max_lsn)
                    .chain(log.segments.values().map(|s| s.meta.covered_lsn))
                    .max()
                    .unwrap_or(Lsn::NONE);
                log.last_lsn = sealed_max;
                log.flushed_lsn = sealed_max;
            }
        }
        Ok(log)
    }

    pub fn partition(&self) -> PartitionId {
        self.partition
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &LogConfig {
        &self.config
    }

    pub fn stats(&self) -> &SharedStats {
        &self.stats
    }

    pub fn last_lsn(&self) -> Lsn {
        self.last_lsn
    }

    pub fn flushed_lsn(&self) -> Lsn {
        self.flushed_lsn
    }

    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    pub fn segments(&self) -> Vec<SegmentMeta> {
        self.segments.values().map(|s| s.meta.clone()).collect()
    }

    pub fn active_segment(&self) -> SegmentMeta {
        self.segments[&self.active].meta.clone()
    }

    fn fault<T>(&mut self, err: impl Into<Error>) -> Result<T> {
        let err = err.into();
        warn!(partition = self.partition, %err, "log entering read-only fault state");
        self.faulted = true;
        Err(err)
    }

    /// Appends one record at the end of the active segment.
    pub fn append(&mut self, kind: RecordKind, key: Bytes, value: Bytes, lsn: Lsn) -> Result<LogPosition> {
        let rec = match kind {
            RecordKind::Put => LogRecord::put(self.partition, lsn, key, value),
            RecordKind::Delete => LogRecord::delete(self.partition, lsn, key),
        };
        self.append_record(&rec)
    }

    pub fn append_record(&mut self, rec: &LogRecord) -> Result<LogPosition> {
        if self.faulted {
            return Err(Error::Faulted(self.partition));
        }
        if rec.key.is_empty() {
            return Err(Error::EmptyKey);
        }
        if rec.partition != self.partition {
            return Err(Error::Wire(format!(
                "record for partition {} appended to partition {}",
                rec.partition, self.partition
            )));
        }
        let expected = self.last_lsn.next();
        if rec.lsn != expected {
            return Err(Error::LsnGap {
                expected,
                got: rec.lsn,
            });
        }
        let len = rec.encoded_len() as u64;
        let active_len = self.segments[&self.active].logical_len();
        if active_len > 0 && active_len + len > self.config.segment_bytes {
            self.seal_and_rotate()?;
        }
        let seg = self.segments.get_mut(&self.active).unwrap();
        let offset = seg.logical_len();
        rec.encode_into(&mut seg.pending);
        if seg.meta.record_count == 0 {
            seg.meta.min_lsn = rec.lsn;
        }
        seg.meta.max_lsn = rec.lsn;
        seg.meta.record_count += 1;
        seg.meta.file_size = seg.logical_len();
        self.last_lsn = rec.lsn;
        if self.config.flush == FlushPolicy::PerRecord {
            self.flush()?;
        }
        Ok(LogPosition {
            segment_id: self.active,
            offset,
        })
    }

    /// Group flush: writes the buffered batch with one call and syncs it
    /// according to the flush policy. Returns the new flushed LSN.
    pub fn flush(&mut self) -> Result<Lsn> {
        if self.faulted {
            return Err(Error::Faulted(self.partition));
        }
        if self.flushed_lsn == self.last_lsn {
            return Ok(self.flushed_lsn);
        }
        let stats = self.stats.clone();
        let seg = self.segments.get_mut(&self.active).unwrap();
        let res = seg.write_pending(&stats).and_then(|_| {
            if self.config.flush == FlushPolicy::OsBuffered {
                Ok(())
            } else {
                seg.sync(&stats)
            }
        });
        if let Err(e) = res {
            return self.fault(e);
        }
        self.flushed_lsn = self.last_lsn;
        Ok(self.flushed_lsn)
    }

    /// Reads the record at `pos`, verifying its checksum.
    pub fn read_at(&self, pos: LogPosition) -> Result<LogRecord> {
        let seg = self.segments.get(&pos.segment_id).ok_or(Error::InvalidPosition(pos))?;
        IoStats::add(&self.stats.record_reads, 1);
        seg.read_record(self.partition, pos.offset, self.config.read_ahead)
    }

    /// Seals the active segment and opens a fresh one. Rotating an empty
    /// active segment is a no-op returning its metadata.
    pub fn seal_and_rotate(&mut self) -> Result<SegmentMeta> {
        if self.faulted {
            return Err(Error::Faulted(self.partition));
        }
        if self.segments[&self.active].meta.record_count == 0 {
            return Ok(self.segments[&self.active].meta.clone());
        }
        self.flush()?;
        let new_id = self.next_segment;
        let fresh = match Segment::create(&self.dir, self.partition, new_id) {
            Ok(s) => s,
            Err(e) => return self.fault(e),
        };
        let old = self.segments.get_mut(&self.active).unwrap();
        old.meta.state = SegmentState::SealedUnsorted;
        old.meta.file_size = old.written_len;
        let sealed = old.meta.clone();
        self.segments.insert(new_id, fresh);
        self.active = new_id;
        self.next_segment += 1;
        if let Err(e) = self.store_manifest() {
            return self.fault(e);
        }
        debug!(partition = self.partition, sealed = sealed.segment_id, "rotated segment");
        Ok(sealed)
    }

    pub(crate) fn store_manifest(&self) -> Result<()> {
        let manifest = Manifest {
            next_segment: self.next_segment,
            segments: self.segments.values().map(|s| s.meta.clone()).collect(),
        };
        manifest.store(&self.dir, &self.stats)
    }

    /// Streams records with `lsn >= start` from the unsorted segments in LSN
    /// order. Only bytes already written to the files are visible; call
    /// [`PartitionLog::flush`] first to include the group-flush buffer.
    pub fn iter_from_lsn(&self, start: Lsn) -> LogStream {
        let start = start.max(Lsn(1));
        let mut plan = Vec::new();
        for seg in self.segments.values() {
            if !seg.meta.state.is_unsorted() {
                continue;
            }
            // Sealed metadata is exact; the active segment is always scanned.
            if seg.meta.state == SegmentState::SealedUnsorted
                && seg.meta.record_count > 0
                && seg.meta.max_lsn < start
            {
                continue;
            }
            plan.push((seg.meta.segment_id, seg.path.clone(), seg.written_len));
        }
        LogStream {
            partition: self.partition,
            start,
            plan,
            next_plan: 0,
            current: None,
            report: TailReport {
                last_valid: Lsn::NONE,
                end: ScanEnd::Clean,
                segment_id: None,
            },
            expected_next: None,
            done: false,
            stats: self.stats.clone(),
        }
    }

    /// Recovery-time tail scan: streams every record with `lsn >= start` into
    /// `apply`, truncates a torn tail, and establishes the LSN frontier.
    /// A damaged record that is not at the tail is an error.
    pub fn replay_from(&mut self, start: Lsn, mut apply: impl FnMut(&LogRecord, LogPosition)) -> Result<TailReport> {
        let mut stream = self.iter_from_lsn(start);
        for item in stream.by_ref() {
            let (rec, pos) = item?;
            IoStats::add(&self.stats.recovery_records_read, 1);
            apply(&rec, pos);
        }
        let report = stream.report();
        match report.end {
            ScanEnd::Clean => {}
            ScanEnd::Torn { offset } => {
                let seg_id = report.segment_id.expect("torn scan names a segment");
                if seg_id != self.active || self.segments.range(seg_id + 1..).next().is_some() {
                    return Err(Error::Unrecoverable {
                        segment: seg_id,
                        offset,
                    });
                }
                let seg = self.segments.get_mut(&seg_id).unwrap();
                warn!(partition = self.partition, segment = seg_id, offset, "truncating torn tail");
                seg.file.set_len(offset)?;
                seg.file.sync_all()?;
                seg.written_len = offset;
                seg.records_end = offset;
            }
            ScanEnd::Corrupt { offset } => {
                return Err(Error::Unrecoverable {
                    segment: report.segment_id.unwrap_or(0),
                    offset,
                })
            }
        }
        let last = report.last_valid.max(self.last_lsn);
        self.last_lsn = last;
        self.flushed_lsn = last;
        self.refresh_active_meta()?;
        Ok(report)
    }

    /// Recomputes the active segment's LSN range from its headers.
    fn refresh_active_meta(&mut self) -> Result<()> {
        let partition = self.partition;
        let seg = self.segments.get_mut(&self.active).unwrap();
        seg.meta.file_size = seg.written_len;
        let (mut count, mut min, mut max) = (0u64, Lsn::NONE, Lsn::NONE);
        let mut scanner = SegmentScanner::open(&seg.path, partition, seg.written_len, Lsn(u64::MAX))?;
        while let Some(item) = scanner.next_item()? {
            if count == 0 {
                min = item.lsn;
            }
            max = item.lsn;
            count += 1;
        }
        seg.meta.record_count = count;
        seg.meta.min_lsn = min;
        seg.meta.max_lsn = max;
        Ok(())
    }

    /// Drops every record with `lsn > keep`. Only unsorted records can be
    /// dropped; used when a new leader discards an unacknowledged tail.
    pub fn truncate_after(&mut self, keep: Lsn) -> Result<()> {
        if keep >= self.last_lsn {
            return Ok(());
        }
        self.flush()?;
        let covered = self.segments.values().map(|s| s.meta.covered_lsn).max().unwrap_or(Lsn::NONE);
        if keep < covered {
            return Err(Error::Config(format!(
                "cannot truncate to {keep}: records up to {covered} are compacted"
            )));
        }
        let ids: Vec<u32> = self
            .segments
            .values()
            .filter(|s| s.meta.state.is_unsorted())
            .map(|s| s.meta.segment_id)
            .rev()
            .collect();
        for id in ids {
            let seg = &self.segments[&id];
            if seg.meta.record_count == 0 {
                continue;
            }
            if seg.meta.min_lsn > keep {
                if id == self.active {
                    let seg = self.segments.get_mut(&id).unwrap();
                    seg.file.set_len(0)?;
                    seg.written_len = 0;
                    seg.records_end = 0;
                    seg.meta = SegmentMeta::new_active(id);
                } else {
                    let seg = self.segments.remove(&id).unwrap();
                    seg.remove_file()?;
                }
                continue;
            }
            let mut scanner = SegmentScanner::open(&seg.path, self.partition, seg.written_len, Lsn(u64::MAX))?;
            let (mut cut, mut count) = (0u64, 0u64);
            while let Some(item) = scanner.next_item()? {
                if item.lsn > keep {
                    break;
                }
                cut = item.offset + item.frame_len;
                count += 1;
            }
            let seg = self.segments.get_mut(&id).unwrap();
            seg.file.set_len(cut)?;
            seg.file.sync_all()?;
            seg.written_len = cut;
            seg.records_end = cut;
            seg.meta.record_count = count;
            seg.meta.max_lsn = keep;
            seg.meta.file_size = cut;
            break;
        }
        self.last_lsn = keep;
        self.flushed_lsn = keep;
        self.store_manifest()?;
        Ok(())
    }

    /// Sequentially scans every segment (sorted then unsorted), passing each
    /// valid record and its position to `visit`.
    pub fn scan_all(&self, mut visit: impl FnMut(&LogRecord, LogPosition)) -> Result<()> {
        for seg in self.segments.values() {
            let mut scanner = SegmentScanner::open(&seg.path, self.partition, seg.records_end, Lsn::NONE)?;
            while let Some(item) = scanner.next_item()? {
                if let Some(rec) = item.record {
                    IoStats::add(&self.stats.scan_records, 1);
                    visit(
                        &rec,
                        LogPosition {
                            segment_id: seg.meta.segment_id,
                            offset: item.offset,
                        },
                    );
                }
            }
            if seg.meta.segment_id == self.active && !seg.pending.is_empty() {
                let mut at = 0usize;
                while at < seg.pending.len() {
                    let (rec, n) = LogRecord::decode(self.partition, &seg.pending[at..]).map_err(|e| {
                        Error::CorruptRecord {
                            position: LogPosition {
                                segment_id: seg.meta.segment_id,
                                offset: seg.written_len + at as u64,
                            },
                            reason: e.reason(),
                        }
                    })?;
                    IoStats::add(&self.stats.scan_records, 1);
                    visit(
                        &rec,
                        LogPosition {
                            segment_id: seg.meta.segment_id,
                            offset: seg.written_len + at as u64,
                        },
                    );
                    at += n;
                }
            }
            if let Some(ScanEnd::Corrupt { offset }) = scanner.ended {
                return Err(Error::Unrecoverable {
                    segment: seg.meta.segment_id,
                    offset,
                });
            }
        }
        Ok(())
    }

    /// Recovery-time scan of every sorted segment, in segment order. Used for
    /// a full index rebuild before replaying the unsorted tail.
    pub fn replay_sorted(&self, mut apply: impl FnMut(&LogRecord, LogPosition)) -> Result<u64> {
        let mut n = 0;
        for seg in self.segments.values().filter(|s| s.meta.state == SegmentState::Sorted) {
            let mut scanner = SegmentScanner::open(&seg.path, self.partition, seg.records_end, Lsn::NONE)?;
            while let Some(item) = scanner.next_item()? {
                let rec = item.record.expect("no skipping");
                IoStats::add(&self.stats.recovery_records_read, 1);
                n += 1;
                apply(
                    &rec,
                    LogPosition {
                        segment_id: seg.meta.segment_id,
                        offset: item.offset,
                    },
                );
            }
            if let Some(ScanEnd::Corrupt { offset } | ScanEnd::Torn { offset }) = scanner.ended {
                return Err(Error::Unrecoverable {
                    segment: seg.meta.segment_id,
                    offset,
                });
            }
        }
        Ok(n)
    }

    /// Highest LSN folded into any sorted segment.
    pub fn covered_lsn(&self) -> Lsn {
        self.segments.values().map(|s| s.meta.covered_lsn).max().unwrap_or(Lsn::NONE)
    }

    /// Ordered scan of one sorted segment over `[start, end)` that seeks via
    /// the sparse key directory instead of the index.
    pub fn sorted_range(&self, segment_id: u32, start: &[u8], end: &[u8], limit: usize) -> Result<Vec<LogRecord>> {
        let seg = self
            .segments
            .get(&segment_id)
            .filter(|s| s.meta.state == SegmentState::Sorted)
            .ok_or(Error::InvalidPosition(LogPosition { segment_id, offset: 0 }))?;
        // Last directory mark whose key is <= start.
        let idx = seg.directory.partition_point(|(k, _)| k.as_ref() <= start);
        let from = if idx == 0 { 0 } else { seg.directory[idx - 1].1 };
        let mut out = Vec::new();
        let mut offset = from;
        while offset < seg.records_end && out.len() < limit {
            let rec = seg.read_record(self.partition, offset, self.config.read_ahead)?;
            IoStats::add(&self.stats.scan_records, 1);
            offset += rec.encoded_len() as u64;
            if rec.key.as_ref() < start {
                continue;
            }
            if rec.key.as_ref() >= end {
                break;
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// Ordered stream returned by [`PartitionLog::iter_from_lsn`].
///
/// Stops at the first torn or corrupt record; [`LogStream::report`] then
/// names the last valid LSN and where the scan ended.
pub struct LogStream {
    partition: PartitionId,
    start: Lsn,
    plan: Vec<(u32, PathBuf, u64)>,
    next_plan: usize,
    current: Option<(u32, SegmentScanner)>,
    report: TailReport,
    expected_next: Option<Lsn>,
    done: bool,
    stats: SharedStats,
}

impl LogStream {
    pub fn report(&self) -> TailReport {
        self.report
    }

    fn stop(&mut self, end: ScanEnd, segment: u32) {
        self.report.end = end;
        self.report.segment_id = Some(segment);
        self.done = true;
    }
}

impl Iterator for LogStream {
    type Item = Result<(LogRecord, LogPosition)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            if self.current.is_none() {
                let Some((id, path, len)) = self.plan.get(self.next_plan).cloned() else {
                    self.done = true;
                    return None;
                };
                self.next_plan += 1;
                match SegmentScanner::open(&path, self.partition, len, self.start) {
                    Ok(s) => self.current = Some((id, s)),
                    Err(e) => {
                        self.done = true;
                        return Some(Err(e.into()));
                    }
                }
            }
            let (seg_id, scanner) = self.current.as_mut().unwrap();
            let seg_id = *seg_id;
            match scanner.next_item() {
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
                Ok(None) => {
                    let end = scanner.ended.unwrap_or(ScanEnd::Clean);
                    self.current = None;
                    self.report.segment_id = Some(seg_id);
                    if end != ScanEnd::Clean {
                        self.stop(end, seg_id);
                    }
                }
                Ok(Some(item)) => {
                    let lsn = item.lsn;
                    if let Some(expected) = self.expected_next {
                        if lsn != expected {
                            // LSN density broken: treat like a damaged record.
                            self.stop(ScanEnd::Corrupt { offset: item.offset }, seg_id);
                            return None;
                        }
                    }
                    let out = item.record.map(|rec| {
                        IoStats::add(&self.stats.scan_records, 1);
                        let pos = LogPosition {
                            segment_id: seg_id,
                            offset: item.offset,
                        };
                        (rec, pos)
                    });
                    self.expected_next = Some(lsn.next());
                    self.report.last_valid = lsn;
                    if let Some(item) = out {
                        return Some(Ok(item));
                    }
                }
            }
        }
    }
}
