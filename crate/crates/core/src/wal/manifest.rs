//! Per-partition MANIFEST: the list of segments and their states.
//!
//! Plain text, one segment per line, rewritten atomically through a temp
//! file and a rename.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stats::IoStats;
use crate::types::Lsn;

pub const MANIFEST_NAME: &str = "MANIFEST";
const HEADER: &str = "logstore-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentState {
    Active,
    SealedUnsorted,
    Sorted,
}

impl SegmentState {
    fn as_str(self) -> &'static str {
        match self {
            SegmentState::Active => "active",
            SegmentState::SealedUnsorted => "sealed",
            SegmentState::Sorted => "sorted",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "active" => Some(SegmentState::Active),
            "sealed" => Some(SegmentState::SealedUnsorted),
            "sorted" => Some(SegmentState::Sorted),
            _ => None,
        }
    }

    pub fn is_unsorted(self) -> bool {
        !matches!(self, SegmentState::Sorted)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMeta {
    pub segment_id: u32,
    pub state: SegmentState,
    pub min_lsn: Lsn,
    pub max_lsn: Lsn,
    pub record_count: u64,
    pub file_size: u64,
    /// For sorted segments: highest LSN folded in by the compaction that
    /// produced it. Zero otherwise.
    pub covered_lsn: Lsn,
}

impl SegmentMeta {
    pub fn new_active(segment_id: u32) -> Self {
        SegmentMeta {
            segment_id,
            state: SegmentState::Active,
            min_lsn: Lsn::NONE,
            max_lsn: Lsn::NONE,
            record_count: 0,
            file_size: 0,
            covered_lsn: Lsn::NONE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub next_segment: u32,
    pub segments: Vec<SegmentMeta>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut s = format!("{HEADER}\nnext_segment {}\n", self.next_segment);
        for m in &self.segments {
            s.push_str(&format!(
                "segment {} {} {} {} {} {} {}\n",
                m.segment_id,
                m.state.as_str(),
                m.min_lsn,
                m.max_lsn,
                m.record_count,
                m.file_size,
                m.covered_lsn
            ));
        }
        s
    }

    pub fn decode(text: &str) -> Result<Manifest> {
        let bad = |why: &str| Error::CorruptManifest(why.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header"));
        }
        let mut out = Manifest::default();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => continue,
                ["next_segment", n] => out.next_segment = n.parse().map_err(|_| bad(line))?,
                ["segment", id, state, min, max, count, size, covered] => {
                    let num = |s: &str| s.parse::<u64>().map_err(|_| bad(line));
                    out.segments.push(SegmentMeta {
                        segment_id: id.parse().map_err(|_| bad(line))?,
                        state: SegmentState::parse(state).ok_or_else(|| bad(line))?,
                        min_lsn: Lsn(num(min)?),
                        max_lsn: Lsn(num(max)?),
                        record_count: num(count)?,
                        file_size: num(size)?,
                        covered_lsn: Lsn(num(covered)?),
                    });
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        match fs::read_to_string(dir.join(MANIFEST_NAME)) {
            Ok(text) => Manifest::decode(&text).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Write-temp + fsync + rename + directory fsync.
    pub fn store(&self, dir: &Path, stats: &IoStats) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
        let body = self.encode();
        {
            let mut f = File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_data()?;
        }
        fs::rename(&tmp, dir.join(MANIFEST_NAME))?;
        sync_dir(dir)?;
        IoStats::add(&stats.manifest_bytes_written, body.len() as u64);
        Ok(())
    }
}

pub(crate) fn sync_dir(dir: &Path) -> std::io::Result<()> {
    File::open(dir)?.sync_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let m = Manifest {
            next_segment: 4,
            segments: vec![
                SegmentMeta {
                    segment_id: 3,
                    state: SegmentState::Sorted,
                    min_lsn: Lsn(1),
                    max_lsn: Lsn(90),
                    record_count: 12,
                    file_size: 4096,
                    covered_lsn: Lsn(100),
                },
                SegmentMeta::new_active(2),
            ],
        };
        assert_eq!(Manifest::decode(&m.encode()).unwrap(), m);
        assert!(Manifest::decode("garbage\n").is_err());
        assert!(Manifest::decode(&format!("{HEADER}\nsegment 1 weird 0 0 0 0 0\n")).is_err());
    }
}
