//! Record framing.
//!
//! ```text
//! +---------+---------+-------------+-------------+-----------+-----+-------+
//! | lsn u64 | kind u8 | key_len u32 | val_len u32 | crc32 u32 | key | value |
//! +---------+---------+-------------+-------------+-----------+-----+-------+
//! ```
//!
//! All integers are little-endian. The CRC covers the partition id (which is
//! implied by the file or message carrying the record and not stored), the
//! first 17 header bytes, the key and the value.

use bytes::Bytes;

use crate::types::{Lsn, PartitionId, RecordKind};

pub const HEADER_LEN: usize = 21;
const CRC_OFFSET: usize = 17;

/// One durable modification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub lsn: Lsn,
    pub partition: PartitionId,
    pub kind: RecordKind,
    pub key: Bytes,
    pub value: Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    /// Not enough bytes; `needed` is the full frame length when known.
    Incomplete { needed: Option<usize> },
    Checksum,
    BadKind,
    EmptyKey,
}

impl DecodeError {
    pub fn reason(&self) -> &'static str {
        match self {
            DecodeError::Incomplete { .. } => "truncated record",
            DecodeError::Checksum => "checksum mismatch",
            DecodeError::BadKind => "unknown record kind",
            DecodeError::EmptyKey => "empty key",
        }
    }
}

/// Parsed fixed-size header, checksum not yet verified.
#[derive(Debug, Clone, Copy)]
pub struct RecordHeader {
    pub lsn: Lsn,
    pub kind: u8,
    pub key_len: u32,
    pub val_len: u32,
    pub crc: u32,
}

impl RecordHeader {
    pub fn parse(buf: &[u8]) -> Option<RecordHeader> {
        if buf.len() < HEADER_LEN {
            return None;
        }
        Some(RecordHeader {
            lsn: Lsn(u64::from_le_bytes(buf[0..8].try_into().unwrap())),
            kind: buf[8],
            key_len: u32::from_le_bytes(buf[9..13].try_into().unwrap()),
            val_len: u32::from_le_bytes(buf[13..17].try_into().unwrap()),
            crc: u32::from_le_bytes(buf[17..21].try_into().unwrap()),
        })
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.key_len as usize + self.val_len as usize
    }
}

impl LogRecord {
    pub fn put(partition: PartitionId, lsn: Lsn, key: impl Into<Bytes>, value: impl Into<Bytes>) -> Self {
        LogRecord {
            lsn,
            partition,
            kind: RecordKind::Put,
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn delete(partition: PartitionId, lsn: Lsn, key: impl Into<Bytes>) -> Self {
        LogRecord {
            lsn,
            partition,
            kind: RecordKind::Delete,
            key: key.into(),
            value: Bytes::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.key.len() + self.value.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&self.lsn.0.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.key.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&self.value);
        let crc = checksum(self.partition, &out[start..]);
        out[start + CRC_OFFSET..start + HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes one record from the front of `buf`, returning it with its
    /// frame length.
    pub fn decode(partition: PartitionId, buf: &[u8]) -> Result<(LogRecord, usize), DecodeError> {
        let header = RecordHeader::parse(buf).ok_or(DecodeError::Incomplete { needed: None })?;
        let len = header.frame_len();
        if buf.len() < len {
            return Err(DecodeError::Incomplete { needed: Some(len) });
        }
        let frame = &buf[..len];
        if checksum(partition, frame) != header.crc {
            return Err(DecodeError::Checksum);
        }
        let kind = RecordKind::from_u8(header.kind).ok_or(DecodeError::BadKind)?;
        if header.key_len == 0 {
            return Err(DecodeError::EmptyKey);
        }
        let key_end = HEADER_LEN + header.key_len as usize;
        Ok((
            LogRecord {
                lsn: header.lsn,
                partition,
                kind,
                key: Bytes::copy_from_slice(&frame[HEADER_LEN..key_end]),
                value: Bytes::copy_from_slice(&frame[key_end..]),
            },
            len,
        ))
    }
}

/// CRC32 over a full frame whose crc field is treated as zero.
fn checksum(partition: PartitionId, frame: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&partition.to_le_bytes());
    h.update(&frame[..CRC_OFFSET]);
    h.update(&frame[HEADER_LEN..]);
    h.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_21_bytes() {
        let r = LogRecord::put(0, Lsn(1), "k1", "v1");
        assert_eq!(r.encode().len(), HEADER_LEN + 4);
        assert_eq!(HEADER_LEN, 8 + 1 + 4 + 4 + 4);
    }

    #[test]
    fn delete_has_empty_value() {
        let r = LogRecord::delete(3, Lsn(9), "gone");
        let (back, n) = LogRecord::decode(3, &r.encode()).unwrap();
        assert_eq!(back.kind, RecordKind::Delete);
        assert!(back.value.is_empty());
        assert_eq!(n, HEADER_LEN + 4);
    }

    #[test]
    fn wrong_partition_fails_checksum() {
        let r = LogRecord::put(1, Lsn(1), "a", "b");
        assert_eq!(LogRecord::decode(2, &r.encode()).unwrap_err(), DecodeError::Checksum);
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let r = LogRecord::put(0, Lsn(77), "key", "value-bytes");
        let enc = r.encode();
        for i in 0..enc.len() {
            let mut bad = enc.clone();
            bad[i] ^= 0x40;
            assert!(LogRecord::decode(0, &bad).is_err(), "flip at {i} undetected");
        }
    }

    proptest! {
        #[test]
        fn roundtrip(lsn in 1u64.., key in proptest::collection::vec(any::<u8>(), 1..64),
                     value in proptest::collection::vec(any::<u8>(), 0..256), del in any::<bool>()) {
            let r = if del {
                LogRecord::delete(5, Lsn(lsn), key)
            } else {
                LogRecord::put(5, Lsn(lsn), key, value)
            };
            let enc = r.encode();
            prop_assert_eq!(enc.len(), r.encoded_len());
            let (back, n) = LogRecord::decode(5, &enc).unwrap();
            prop_assert_eq!(n, enc.len());
            prop_assert_eq!(back, r);
            for cut in 0..enc.len() {
                let is_incomplete = matches!(LogRecord::decode(5, &enc[..cut]), Err(DecodeError::Incomplete { .. }));
                prop_assert!(is_incomplete);
            }
        }
    }
}
