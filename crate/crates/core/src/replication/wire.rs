//! Length-prefixed framing and the replication messages.
//!
//! Frame: `[u32 length | u8 type | payload]`, where `length` counts the type
//! byte and the payload. Little-endian throughout.

use std::io::{self, Read, Write};

use bytes::{BufMut, Bytes};

use crate::error::{Error, Result};
use crate::types::{Lsn, NodeId, PartitionId};
use crate::wal::LogRecord;

/// Upper bound on a single frame, as a guard against garbage lengths.
pub const MAX_FRAME: u32 = 256 << 20;

pub const MSG_APPEND_ENTRIES: u8 = 0x01;
pub const MSG_ACK: u8 = 0x02;
pub const MSG_NACK: u8 = 0x03;
pub const MSG_TRUNCATE: u8 = 0x04;
pub const MSG_EPOCH_REJECTED: u8 = 0x05;

/// Builds a complete frame.
pub fn encode_frame(msg_type: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + payload.len());
    out.put_u32_le(payload.len() as u32 + 1);
    out.put_u8(msg_type);
    out.extend_from_slice(payload);
    out
}

/// Writes one frame with a single `write_all`.
pub fn write_frame(w: &mut impl Write, msg_type: u8, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(msg_type, payload))
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let msg_type = body[0];
    body.remove(0);
    Ok(Some((msg_type, body)))
}

/// Bounds-checked little-endian reader over a payload.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Wire("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `[u32 len | bytes]`.
    pub fn bytes(&mut self) -> Result<Bytes> {
        let n = self.u32()? as usize;
        Ok(Bytes::copy_from_slice(self.take(n)?))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Wire(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Appends `[u32 len | bytes]`.
pub fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.put_u32_le(b.len() as u32);
    out.extend_from_slice(b);
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplMessage {
    /// Records (possibly none, as a heartbeat) plus the leader's commit point.
    AppendEntries {
        partition: PartitionId,
        epoch: u64,
        leader_commit: Lsn,
        records: Vec<LogRecord>,
    },
    /// Cumulative acknowledgement: everything up to `last_flushed` is durable.
    Ack {
        partition: PartitionId,
        epoch: u64,
        node: NodeId,
        last_flushed: Lsn,
    },
    /// The follower found a gap and needs records from `expected` on.
    Nack {
        partition: PartitionId,
        epoch: u64,
        node: NodeId,
        expected: Lsn,
    },
    /// Sent by a new leader before any records: drop anything above `keep`
    /// and adopt `epoch`.
    Truncate { partition: PartitionId, epoch: u64, keep: Lsn },
    /// The receiver is at a different epoch (carried in `epoch`).
    EpochRejected {
        partition: PartitionId,
        epoch: u64,
        node: NodeId,
    },
}

impl ReplMessage {
    pub fn partition(&self) -> PartitionId {
        match self {
            ReplMessage::AppendEntries { partition, .. }
            | ReplMessage::Ack { partition, .. }
            | ReplMessage::Nack { partition, .. }
            | ReplMessage::Truncate { partition, .. }
            | ReplMessage::EpochRejected { partition, .. } => *partition,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            ReplMessage::AppendEntries { .. } => MSG_APPEND_ENTRIES,
            ReplMessage::Ack { .. } => MSG_ACK,
            ReplMessage::Nack { .. } => MSG_NACK,
            ReplMessage::Truncate { .. } => MSG_TRUNCATE,
            ReplMessage::EpochRejected { .. } => MSG_EPOCH_REJECTED,
        }
    }

    pub fn is_replication_type(msg_type: u8) -> bool {
        (MSG_APPEND_ENTRIES..=MSG_EPOCH_REJECTED).contains(&msg_type)
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ReplMessage::AppendEntries {
                partition,
                epoch,
                leader_commit,
                records,
            } => {
                let body: usize = records.iter().map(LogRecord::encoded_len).sum();
                out.reserve(24 + body);
                out.put_u32_le(*partition);
                out.put_u64_le(*epoch);
                out.put_u64_le(leader_commit.0);
                out.put_u32_le(records.len() as u32);
                for r in records {
                    r.encode_into(&mut out);
                }
            }
            ReplMessage::Ack {
                partition,
                epoch,
                node,
                last_flushed: lsn,
            }
            | ReplMessage::Nack {
                partition,
                epoch,
                node,
                expected: lsn,
            } => {
                out.put_u32_le(*partition);
                out.put_u64_le(*epoch);
                out.put_u32_le(*node);
                out.put_u64_le(lsn.0);
            }
            ReplMessage::Truncate { partition, epoch, keep } => {
                out.put_u32_le(*partition);
                out.put_u64_le(*epoch);
                out.put_u64_le(keep.0);
            }
            ReplMessage::EpochRejected { partition, epoch, node } => {
                out.put_u32_le(*partition);
                out.put_u64_le(*epoch);
                out.put_u32_le(*node);
            }
        }
        out
    }

    pub fn encode_frame(&self) -> Vec<u8> {
        encode_frame(self.msg_type(), &self.encode_payload())
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<ReplMessage> {
        let mut r = PayloadReader::new(payload);
        let partition = r.u32()?;
        let epoch = r.u64()?;
        let msg = match msg_type {
            MSG_APPEND_ENTRIES => {
                let leader_commit = Lsn(r.u64()?);
                let count = r.u32()? as usize;
                let mut rest = r.rest();
                let mut records = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let (rec, n) = LogRecord::decode(partition, rest)
                        .map_err(|e| Error::Wire(format!("bad record in append: {}", e.reason())))?;
                    records.push(rec);
                    rest = &rest[n..];
                }
                if !rest.is_empty() {
                    return Err(Error::Wire("trailing bytes after records".into()));
                }
                return Ok(ReplMessage::AppendEntries {
                    partition,
                    epoch,
                    leader_commit,
                    records,
                });
            }
            MSG_ACK => ReplMessage::Ack {
                partition,
                epoch,
                node: r.u32()?,
                last_flushed: Lsn(r.u64()?),
            },
            MSG_NACK => ReplMessage::Nack {
                partition,
                epoch,
                node: r.u32()?,
                expected: Lsn(r.u64()?),
            },
            MSG_TRUNCATE => ReplMessage::Truncate {
                partition,
                epoch,
                keep: Lsn(r.u64()?),
            },
            MSG_EPOCH_REJECTED => ReplMessage::EpochRejected {
                partition,
                epoch,
                node: r.u32()?,
            },
            other => return Err(Error::Wire(format!("unknown replication message type {other:#x}"))),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Reads one replication message from a stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<ReplMessage>> {
        match read_frame(r)? {
            None => Ok(None),
            Some((t, payload)) => ReplMessage::decode(t, &payload).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ack_layout() {
        let m = ReplMessage::Ack {
            partition: 3,
            epoch: 2,
            node: 7,
            last_flushed: Lsn(99),
        };
        let f = m.encode_frame();
        assert_eq!(f.len(), 4 + 1 + 4 + 8 + 4 + 8);
        assert_eq!(u32::from_le_bytes(f[0..4].try_into().unwrap()) as usize, f.len() - 4);
        assert_eq!(f[4], MSG_ACK);
        assert_eq!(&f[5..9], &3u32.to_le_bytes());
        assert_eq!(&f[9..17], &2u64.to_le_bytes());
        assert_eq!(&f[17..21], &7u32.to_le_bytes());
        assert_eq!(&f[21..29], &99u64.to_le_bytes());
    }

    #[test]
    fn append_entries_layout_uses_log_framing() {
        let rec = LogRecord::put(1, Lsn(5), Bytes::from_static(b"k"), Bytes::from_static(b"v"));
        let m = ReplMessage::AppendEntries {
            partition: 1,
            epoch: 1,
            leader_commit: Lsn(4),
            records: vec![rec.clone()],
        };
        let payload = m.encode_payload();
        assert_eq!(&payload[24..], &rec.encode()[..]);
        assert_eq!(&payload[20..24], &1u32.to_le_bytes());
    }

    #[test]
    fn stream_roundtrip_and_eof() {
        let msgs = vec![
            ReplMessage::Truncate {
                partition: 0,
                epoch: 4,
                keep: Lsn(10),
            },
            ReplMessage::Nack {
                partition: 0,
                epoch: 4,
                node: 2,
                expected: Lsn(11),
            },
            ReplMessage::EpochRejected {
                partition: 9,
                epoch: 1,
                node: 1,
            },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            buf.extend(m.encode_frame());
        }
        let mut r = &buf[..];
        for m in &msgs {
            assert_eq!(&ReplMessage::read_from(&mut r).unwrap().unwrap(), m);
        }
        assert!(ReplMessage::read_from(&mut r).unwrap().is_none());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(ReplMessage::decode(MSG_ACK, &[1, 2, 3]).is_err());
        assert!(ReplMessage::decode(0x7f, &[0; 20]).is_err());
        let mut bad = vec![0u8; 4];
        bad.extend([MSG_ACK]);
        assert!(read_frame(&mut &bad[..]).is_err());
    }

    fn record() -> impl Strategy<Value = (bool, Vec<u8>, Vec<u8>)> {
        (any::<bool>(), prop::collection::vec(any::<u8>(), 1..20), prop::collection::vec(any::<u8>(), 0..50))
    }

    proptest! {
        #[test]
        fn append_entries_roundtrip(
            partition in any::<u32>(),
            epoch in any::<u64>(),
            commit in any::<u64>(),
            recs in prop::collection::vec(record(), 0..10),
        ) {
            let records: Vec<LogRecord> = recs
                .into_iter()
                .enumerate()
                .map(|(i, (put, k, v))| {
                    let lsn = Lsn(i as u64 + 1);
                    if put {
                        LogRecord::put(partition, lsn, Bytes::from(k), Bytes::from(v))
                    } else {
                        LogRecord::delete(partition, lsn, Bytes::from(k))
                    }
                })
                .collect();
            let m = ReplMessage::AppendEntries { partition, epoch, leader_commit: Lsn(commit), records };
            let frame = m.encode_frame();
            let back = ReplMessage::read_from(&mut &frame[..]).unwrap().unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn decoder_never_panics(t in 1u8..6, payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = ReplMessage::decode(t, &payload);
        }
    }
}
