//! Index checkpoint format.
//!
//! Entries in ascending key order, each
//! `[key_len u32 | key | segment_id u32 | offset u64 | version_lsn u64]`,
//! followed by a trailer `[entry_count u64 | last_included_lsn u64 | crc32 u32]`.
//! The CRC covers everything before it. All integers are little-endian.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::ControlFlow;
use std::path::Path;

use bytes::Bytes;

use super::RadixIndex;
use crate::error::{Error, Result};
use crate::stats::IoStats;
use crate::types::Lsn;
use crate::wal::sync_dir;
use crate::wal::LogPosition;

pub const SNAPSHOT_TRAILER_LEN: usize = 8 + 8 + 4;

/// Summary of a written or loaded snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotInfo {
    pub entry_count: u64,
    pub last_included_lsn: Lsn,
    pub bytes: u64,
}

struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> CrcWriter<W> {
    fn put(&mut self, buf: &[u8]) -> io::Result<()> {
        self.hasher.update(buf);
        self.written += buf.len() as u64;
        self.inner.write_all(buf)
    }
}

impl RadixIndex {
    /// Serializes every entry. `last_included_lsn` is the log position the
    /// snapshot reflects; replay resumes after it.
    pub fn write_snapshot<W: Write>(&self, sink: W, last_included_lsn: Lsn) -> io::Result<SnapshotInfo> {
        let mut w = CrcWriter {
            inner: sink,
            hasher: crc32fast::Hasher::new(),
            written: 0,
        };
        let mut count = 0u64;
        let flow = self.for_each(|e| {
            let r = (|| {
                w.put(&(e.key.len() as u32).to_le_bytes())?;
                w.put(&e.key)?;
                w.put(&e.position.segment_id.to_le_bytes())?;
                w.put(&e.position.offset.to_le_bytes())?;
                w.put(&e.version_lsn.0.to_le_bytes())
            })();
            count += 1;
            match r {
                Ok(()) => ControlFlow::Continue(()),
                Err(err) => ControlFlow::Break(err),
            }
        });
        if let ControlFlow::Break(err) = flow {
            return Err(err);
        }
        w.put(&count.to_le_bytes())?;
        w.put(&last_included_lsn.0.to_le_bytes())?;
        let crc = w.hasher.clone().finalize();
        w.inner.write_all(&crc.to_le_bytes())?;
        w.inner.flush()?;
        Ok(SnapshotInfo {
            entry_count: count,
            last_included_lsn,
            bytes: w.written + 4,
        })
    }

    /// Parses and validates a snapshot image.
    pub fn load_snapshot(image: &[u8]) -> Result<(RadixIndex, SnapshotInfo)> {
        if image.len() < SNAPSHOT_TRAILER_LEN {
            return Err(Error::CorruptSnapshot("shorter than trailer"));
        }
        let body_end = image.len() - 4;
        let stored_crc = u32::from_le_bytes(image[body_end..].try_into().unwrap());
        if crc32fast::hash(&image[..body_end]) != stored_crc {
            return Err(Error::CorruptSnapshot("checksum mismatch"));
        }
        let trailer = &image[image.len() - SNAPSHOT_TRAILER_LEN..];
        let entry_count = u64::from_le_bytes(trailer[0..8].try_into().unwrap());
        let last_included_lsn = Lsn(u64::from_le_bytes(trailer[8..16].try_into().unwrap()));
        let records = &image[..image.len() - SNAPSHOT_TRAILER_LEN];

        let mut index = RadixIndex::new();
        let mut pos = 0usize;
        let mut prev: Option<Bytes> = None;
        let mut seen = 0u64;
        while pos < records.len() {
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = records
                    .get(*pos..*pos + n)
                    .ok_or(Error::CorruptSnapshot("truncated entry"))?;
                *pos += n;
                Ok(s)
            };
            let klen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            if klen == 0 {
                return Err(Error::CorruptSnapshot("empty key"));
            }
            let key = Bytes::copy_from_slice(take(&mut pos, klen)?);
            let segment_id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let version = Lsn(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(Error::CorruptSnapshot("keys out of order"));
            }
            prev = Some(key.clone());
            index.put(key, LogPosition { segment_id, offset }, version);
            seen += 1;
        }
        if seen != entry_count {
            return Err(Error::CorruptSnapshot("entry count mismatch"));
        }
        Ok((
            index,
            SnapshotInfo {
                entry_count,
                last_included_lsn,
                bytes: image.len() as u64,
            },
        ))
    }

    /// Writes a snapshot file atomically (temp file, fsync, rename, directory
    /// fsync) and counts the bytes in `stats`.
    pub fn write_snapshot_file(&self, path: &Path, last_included_lsn: Lsn, stats: &IoStats) -> Result<SnapshotInfo> {
        let tmp = path.with_extension("tmp");
        let info = {
            let file = File::create(&tmp)?;
            let mut w = BufWriter::with_capacity(1 << 16, file);
            let info = self.write_snapshot(&mut w, last_included_lsn)?;
            let file = w.into_inner().map_err(|e| e.into_error())?;
            file.sync_data()?;
            info
        };
        fs::rename(&tmp, path)?;
        if let Some(dir) = path.parent() {
            sync_dir(dir)?;
        }
        IoStats::add(&stats.snapshot_bytes_written, info.bytes);
        Ok(info)
    }

    pub fn load_snapshot_file(path: &Path) -> Result<(RadixIndex, SnapshotInfo)> {
        let image = fs::read(path)?;
        RadixIndex::load_snapshot(&image)
    }
}

/// Reads only the trailer of a snapshot file (no checksum verification), to
/// decide whether loading it is worthwhile.
pub fn read_snapshot_header(path: &Path) -> Result<SnapshotInfo> {
    let mut f = File::open(path)?;
    let len = f.metadata()?.len();
    if len < SNAPSHOT_TRAILER_LEN as u64 {
        return Err(Error::CorruptSnapshot("shorter than trailer"));
    }
    f.seek(SeekFrom::Start(len - SNAPSHOT_TRAILER_LEN as u64))?;
    let mut t = [0u8; SNAPSHOT_TRAILER_LEN];
    f.read_exact(&mut t)?;
    Ok(SnapshotInfo {
        entry_count: u64::from_le_bytes(t[0..8].try_into().unwrap()),
        last_included_lsn: Lsn(u64::from_le_bytes(t[8..16].try_into().unwrap())),
        bytes: len,
    })
}
