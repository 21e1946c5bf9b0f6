//! A single segment file and the sequential scanner over segment files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use bytes::Bytes;

use super::manifest::{SegmentMeta, SegmentState};
use super::record::{DecodeError, LogRecord, RecordHeader, HEADER_LEN};
use super::LogPosition;
use crate::error::{Error, Result};
use crate::stats::IoStats;
use crate::types::{Lsn, PartitionId};

pub(crate) const SORTED_MAGIC: u64 = u64::from_le_bytes(*b"LSSORTED");
pub(crate) const SORTED_TRAILER_LEN: u64 = 24;

pub fn segment_file_name(partition: PartitionId, segment_id: u32) -> String {
    format!("p{partition}_s{segment_id}.log")
}

pub(crate) struct Segment {
    pub meta: SegmentMeta,
    pub path: PathBuf,
    pub file: File,
    /// Bytes durably handed to the file (excludes `pending`).
    pub written_len: u64,
    /// Appended but not yet written (group flush buffer).
    pub pending: Vec<u8>,
    /// End of the record region. Equals the file length for unsorted segments.
    pub records_end: u64,
    /// Sparse key directory of sorted segments: (key, offset) every N records.
    pub directory: Vec<(Bytes, u64)>,
}

impl Segment {
    pub fn create(dir: &Path, partition: PartitionId, segment_id: u32) -> Result<Segment> {
        let path = dir.join(segment_file_name(partition, segment_id));
        let file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .read(true)
            .write(true)
            .open(&path)?;
        Ok(Segment {
            meta: SegmentMeta::new_active(segment_id),
            path,
            file,
            written_len: 0,
            pending: Vec::new(),
            records_end: 0,
            directory: Vec::new(),
        })
    }

    pub fn open(dir: &Path, partition: PartitionId, meta: SegmentMeta) -> Result<Segment> {
        let path = dir.join(segment_file_name(partition, meta.segment_id));
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let len = file.metadata()?.len();
        let mut seg = Segment {
            meta,
            path,
            file,
            written_len: len,
            pending: Vec::new(),
            records_end: len,
            directory: Vec::new(),
        };
        if seg.meta.state == SegmentState::Sorted {
            seg.load_sorted_footer(partition)?;
        }
        seg.meta.file_size = len;
        Ok(seg)
    }

    fn load_sorted_footer(&mut self, _partition: PartitionId) -> Result<()> {
        let corrupt = |why: &str| Error::CorruptManifest(format!("{}: {why}", self.path.display()));
        let len = self.written_len;
        if len < SORTED_TRAILER_LEN {
            return Err(corrupt("sorted segment shorter than trailer"));
        }
        let mut trailer = [0u8; SORTED_TRAILER_LEN as usize];
        self.file.read_exact_at(&mut trailer, len - SORTED_TRAILER_LEN)?;
        let records_len = u64::from_le_bytes(trailer[0..8].try_into().unwrap());
        let dir_count = u32::from_le_bytes(trailer[8..12].try_into().unwrap());
        let dir_crc = u32::from_le_bytes(trailer[12..16].try_into().unwrap());
        let magic = u64::from_le_bytes(trailer[16..24].try_into().unwrap());
        if magic != SORTED_MAGIC || records_len > len - SORTED_TRAILER_LEN {
            return Err(corrupt("bad sorted trailer"));
        }
        let dir_len = (len - SORTED_TRAILER_LEN - records_len) as usize;
        let mut dir_bytes = vec![0u8; dir_len];
        self.file.read_exact_at(&mut dir_bytes, records_len)?;
        if crc32fast::hash(&dir_bytes) != dir_crc {
            return Err(corrupt("key directory checksum mismatch"));
        }
        let mut directory = Vec::with_capacity(dir_count as usize);
        let mut at = 0usize;
        for _ in 0..dir_count {
            if at + 4 > dir_bytes.len() {
                return Err(corrupt("truncated key directory"));
            }
            let klen = u32::from_le_bytes(dir_bytes[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            if at + klen + 8 > dir_bytes.len() {
                return Err(corrupt("truncated key directory"));
            }
            let key = Bytes::copy_from_slice(&dir_bytes[at..at + klen]);
            at += klen;
            let off = u64::from_le_bytes(dir_bytes[at..at + 8].try_into().unwrap());
            at += 8;
            directory.push((key, off));
        }
        self.records_end = records_len;
        self.directory = directory;
        Ok(())
    }

    /// Logical length: written bytes plus the unflushed buffer.
    pub fn logical_len(&self) -> u64 {
        self.written_len + self.pending.len() as u64
    }

    /// Writes the pending buffer with one `write` call.
    pub fn write_pending(&mut self, stats: &IoStats) -> io::Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        self.file.write_all_at(&self.pending, self.written_len)?;
        IoStats::add(&stats.log_write_calls, 1);
        IoStats::add(&stats.log_bytes_written, self.pending.len() as u64);
        self.written_len += self.pending.len() as u64;
        self.records_end = self.written_len;
        self.pending.clear();
        Ok(())
    }

    pub fn sync(&self, stats: &IoStats) -> io::Result<()> {
        self.file.sync_data()?;
        IoStats::add(&stats.log_syncs, 1);
        Ok(())
    }

    /// Reads the record starting at `offset` with one positioned read when
    /// the frame fits in `read_ahead` bytes.
    pub fn read_record(&self, partition: PartitionId, offset: u64, read_ahead: usize) -> Result<LogRecord> {
        let position = LogPosition {
            segment_id: self.meta.segment_id,
            offset,
        };
        if offset >= self.written_len {
            // Still in the group-flush buffer.
            let start = (offset - self.written_len) as usize;
            if start + HEADER_LEN > self.pending.len() {
                return Err(Error::InvalidPosition(position));
            }
            return LogRecord::decode(partition, &self.pending[start..])
                .map(|(r, _)| r)
                .map_err(|e| Error::CorruptRecord {
                    position,
                    reason: e.reason(),
                });
        }
        if offset + HEADER_LEN as u64 > self.records_end {
            return Err(Error::InvalidPosition(position));
        }
        let avail = (self.records_end - offset) as usize;
        let mut buf = vec![0u8; avail.min(read_ahead.max(HEADER_LEN))];
        self.file.read_exact_at(&mut buf, offset)?;
        let header = RecordHeader::parse(&buf).expect("buffer holds a header");
        let len = header.frame_len();
        if len > avail {
            return Err(Error::CorruptRecord {
                position,
                reason: "record extends past segment end",
            });
        }
        if len > buf.len() {
            let have = buf.len();
            buf.resize(len, 0);
            self.file.read_exact_at(&mut buf[have..], offset + have as u64)?;
        }
        LogRecord::decode(partition, &buf)
            .map(|(r, _)| r)
            .map_err(|e| Error::CorruptRecord {
                position,
                reason: e.reason(),
            })
    }

    pub fn remove_file(&self) -> io::Result<()> {
        fs::remove_file(&self.path)
    }
}

/// How a sequential scan of one segment ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanEnd {
    /// Reached the end of the record region cleanly.
    Clean,
    /// The final record is incomplete or fails its checksum and nothing
    /// follows it: a torn write.
    Torn { offset: u64 },
    /// A damaged record with more data after it.
    Corrupt { offset: u64 },
}

/// Streams records out of one segment file region `[0, end)`.
pub(crate) struct SegmentScanner {
    reader: BufReader<File>,
    partition: PartitionId,
    offset: u64,
    end: u64,
    /// Records with an LSN below this are skipped without decoding.
    skip_below: Lsn,
    header_buf: [u8; HEADER_LEN],
    body: Vec<u8>,
    pub ended: Option<ScanEnd>,
}

pub(crate) struct Scanned {
    pub lsn: Lsn,
    pub offset: u64,
    pub frame_len: u64,
    /// `None` when the record was below `skip_below` and only its header was read.
    pub record: Option<LogRecord>,
}

impl SegmentScanner {
    pub fn open(path: &Path, partition: PartitionId, end: u64, skip_below: Lsn) -> io::Result<Self> {
        let file = File::open(path)?;
        Ok(SegmentScanner {
            reader: BufReader::with_capacity(256 * 1024, file),
            partition,
            offset: 0,
            end,
            skip_below,
            header_buf: [0; HEADER_LEN],
            body: Vec::new(),
            ended: None,
        })
    }

    pub fn next_item(&mut self) -> io::Result<Option<Scanned>> {
        if self.ended.is_some() {
            return Ok(None);
        }
        let remaining = self.end - self.offset;
        if remaining == 0 {
            self.ended = Some(ScanEnd::Clean);
            return Ok(None);
        }
        if remaining < HEADER_LEN as u64 {
            self.ended = Some(ScanEnd::Torn { offset: self.offset });
            return Ok(None);
        }
        self.reader.read_exact(&mut self.header_buf)?;
        let header = RecordHeader::parse(&self.header_buf).unwrap();
        let frame_len = header.frame_len() as u64;
        if frame_len > remaining {
            self.ended = Some(ScanEnd::Torn { offset: self.offset });
            return Ok(None);
        }
        let body_len = frame_len as usize - HEADER_LEN;
        let at = self.offset;
        if header.lsn < self.skip_below {
            self.reader.seek_relative(body_len as i64)?;
            self.offset += frame_len;
            return Ok(Some(Scanned {
                lsn: header.lsn,
                offset: at,
                frame_len,
                record: None,
            }));
        }
        self.body.clear();
        self.body.extend_from_slice(&self.header_buf);
        self.body.resize(frame_len as usize, 0);
        self.reader.read_exact(&mut self.body[HEADER_LEN..])?;
        match LogRecord::decode(self.partition, &self.body) {
            Ok((rec, _)) => {
                self.offset += frame_len;
                Ok(Some(Scanned {
                    lsn: rec.lsn,
                    offset: at,
                    frame_len,
                    record: Some(rec),
                }))
            }
            Err(DecodeError::Incomplete { .. }) => unreachable!("frame length checked"),
            Err(_) => {
                self.ended = Some(if at + frame_len >= self.end {
                    ScanEnd::Torn { offset: at }
                } else {
                    ScanEnd::Corrupt { offset: at }
                });
                Ok(None)
            }
        }
    }
}

/// Writes a sorted segment: records in the given (ascending key) order, a
/// sparse key directory every `dir_interval` records, and a fixed trailer.
/// Returns the positions of each record in input order.
pub(crate) fn write_sorted_file(
    path: &Path,
    partition: PartitionId,
    segment_id: u32,
    records: &[LogRecord],
    dir_interval: usize,
    stats: &IoStats,
) -> Result<(Vec<LogPosition>, u64)> {
    let mut buf = Vec::new();
    let mut positions = Vec::with_capacity(records.len());
    let mut directory = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        debug_assert_eq!(rec.partition, partition);
        let offset = buf.len() as u64;
        if i % dir_interval.max(1) == 0 {
            directory.push((rec.key.clone(), offset));
        }
        positions.push(LogPosition { segment_id, offset });
        rec.encode_into(&mut buf);
    }
    let records_len = buf.len() as u64;
    let mut dir_bytes = Vec::new();
    for (key, off) in &directory {
        dir_bytes.extend_from_slice(&(key.len() as u32).to_le_bytes());
        dir_bytes.extend_from_slice(key);
        dir_bytes.extend_from_slice(&off.to_le_bytes());
    }
    buf.extend_from_slice(&dir_bytes);
    buf.extend_from_slice(&records_len.to_le_bytes());
    buf.extend_from_slice(&(directory.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(&dir_bytes).to_le_bytes());
    buf.extend_from_slice(&SORTED_MAGIC.to_le_bytes());

    let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(path)?;
    f.write_all(&buf)?;
    f.sync_data()?;
    IoStats::add(&stats.compaction_bytes_written, buf.len() as u64);
    Ok((positions, buf.len() as u64))
}
