//! Client protocol. Frames share the replication layout
//! (`[u32 len][u8 type][payload]`, little-endian) with type codes from
//! 0x20 up; keys and values are u32-length-prefixed byte strings.
//!
//! A read view of 0 means "no read view".

use std::io::{Read, Write};

use bytes::Bytes;
use logstore_core::engine::PartitionStatus;
use logstore_core::replication::wire::{encode_frame, put_bytes, read_frame, PayloadReader};
use logstore_core::{Error as CoreError, Lsn, NodeId, PartitionId, Role};

pub const REQ_GET: u8 = 0x20;
pub const REQ_PUT: u8 = 0x21;
pub const REQ_DELETE: u8 = 0x22;
pub const REQ_RANGE: u8 = 0x23;
pub const REQ_BATCH_GET: u8 = 0x24;
pub const REQ_STATS: u8 = 0x25;
pub const REQ_PROMOTE: u8 = 0x26;
/// First frame of a peer connection; replication frames follow.
pub const REQ_HELLO: u8 = 0x27;

pub const RESP_VALUE: u8 = 0x30;
pub const RESP_WRITTEN: u8 = 0x31;
pub const RESP_DELETED: u8 = 0x32;
pub const RESP_ITEMS: u8 = 0x33;
pub const RESP_BATCH: u8 = 0x34;
pub const RESP_STATS: u8 = 0x35;
pub const RESP_PROMOTED: u8 = 0x36;
pub const RESP_ERROR: u8 = 0x3f;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("connection closed")]
    Closed,
}

impl From<CoreError> for ProtocolError {
    fn from(e: CoreError) -> Self {
        ProtocolError::Malformed(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientRequest {
    Get { key: Bytes, view: Lsn },
    Put { key: Bytes, value: Bytes },
    Delete { key: Bytes },
    Range { start: Bytes, end: Bytes, limit: u32, view: Lsn },
    BatchGet { keys: Vec<Bytes>, view: Lsn },
    Stats,
    Promote { partition: PartitionId },
    Hello { node: NodeId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    NotLeader = 1,
    Backpressure = 2,
    ReadRejected = 3,
    PromotionRefused = 4,
    BadRequest = 5,
    Internal = 6,
}

impl ErrorCode {
    fn from_u8(b: u8) -> Option<ErrorCode> {
        Some(match b {
            1 => ErrorCode::NotLeader,
            2 => ErrorCode::Backpressure,
            3 => ErrorCode::ReadRejected,
            4 => ErrorCode::PromotionRefused,
            5 => ErrorCode::BadRequest,
            6 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

/// Per-partition line of a STATS reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatsEntry {
    pub partition: PartitionId,
    pub leader_role: bool,
    /// 0 when unknown.
    pub leader: NodeId,
    pub epoch: u64,
    pub flushed: Lsn,
    pub potential_commit: Lsn,
    pub replayed: Lsn,
    pub live_keys: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl From<&PartitionStatus> for StatsEntry {
    fn from(s: &PartitionStatus) -> Self {
        StatsEntry {
            partition: s.partition,
            leader_role: s.role == Role::Leader,
            leader: s.leader.unwrap_or(0),
            epoch: s.epoch,
            flushed: s.flushed,
            potential_commit: s.potential_commit,
            replayed: s.replayed,
            live_keys: s.live_keys as u64,
            cache_hits: s.cache.hits,
            cache_misses: s.cache.misses,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientResponse {
    Value(Option<Bytes>),
    Written { lsn: Lsn },
    Deleted { existed: bool, lsn: Lsn },
    Items(Vec<(Bytes, Bytes)>),
    Batch { scan: bool, items: Vec<(Bytes, Option<Bytes>)> },
    Stats(Vec<StatsEntry>),
    Promoted { epoch: u64, flushed: Lsn, elapsed_us: u64 },
    Error { code: ErrorCode, leader: NodeId, message: String },
}

impl ClientResponse {
    /// Maps an engine error to an error reply.
    pub fn from_error(e: &CoreError) -> ClientResponse {
        let (code, leader) = match e {
            CoreError::NotLeader { leader, .. } => (ErrorCode::NotLeader, leader.unwrap_or(0)),
            CoreError::Backpressure(_) => (ErrorCode::Backpressure, 0),
            CoreError::ReadRejected { .. } => (ErrorCode::ReadRejected, 0),
            CoreError::PromotionRefused { peer, .. } => (ErrorCode::PromotionRefused, *peer),
            CoreError::EmptyKey | CoreError::Config(_) => (ErrorCode::BadRequest, 0),
            _ => (ErrorCode::Internal, 0),
        };
        ClientResponse::Error {
            code,
            leader,
            message: e.to_string(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_opt(out: &mut Vec<u8>, v: &Option<Bytes>) {
    match v {
        Some(v) => {
            out.push(1);
            put_bytes(out, v);
        }
        None => out.push(0),
    }
}

fn get_bool(r: &mut PayloadReader<'_>) -> Result<bool, ProtocolError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(ProtocolError::Malformed(format!("bad flag byte {b}"))),
    }
}

fn get_opt(r: &mut PayloadReader<'_>) -> Result<Option<Bytes>, ProtocolError> {
    Ok(if get_bool(r)? { Some(r.bytes()?) } else { None })
}

/// Reads a u32 element count, refusing counts the payload cannot hold.
fn get_count(r: &mut PayloadReader<'_>, min_elem: usize, remaining: usize) -> Result<usize, ProtocolError> {
    let n = r.u32()? as usize;
    if n.saturating_mul(min_elem) > remaining {
        return Err(ProtocolError::Malformed(format!("count {n} exceeds payload")));
    }
    Ok(n)
}

impl ClientRequest {
    pub fn msg_type(&self) -> u8 {
        match self {
            ClientRequest::Get { .. } => REQ_GET,
            ClientRequest::Put { .. } => REQ_PUT,
            ClientRequest::Delete { .. } => REQ_DELETE,
            ClientRequest::Range { .. } => REQ_RANGE,
            ClientRequest::BatchGet { .. } => REQ_BATCH_GET,
            ClientRequest::Stats => REQ_STATS,
            ClientRequest::Promote { .. } => REQ_PROMOTE,
            ClientRequest::Hello { .. } => REQ_HELLO,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            ClientRequest::Get { key, view } => {
                put_u64(&mut p, view.0);
                put_bytes(&mut p, key);
            }
            ClientRequest::Put { key, value } => {
                put_bytes(&mut p, key);
                put_bytes(&mut p, value);
            }
            ClientRequest::Delete { key } => put_bytes(&mut p, key),
            ClientRequest::Range { start, end, limit, view } => {
                put_u64(&mut p, view.0);
                put_bytes(&mut p, start);
                put_bytes(&mut p, end);
                put_u32(&mut p, *limit);
            }
            ClientRequest::BatchGet { keys, view } => {
                put_u64(&mut p, view.0);
                put_u32(&mut p, keys.len() as u32);
                for k in keys {
                    put_bytes(&mut p, k);
                }
            }
            ClientRequest::Stats => {}
            ClientRequest::Promote { partition } => put_u32(&mut p, *partition),
            ClientRequest::Hello { node } => put_u32(&mut p, *node),
        }
        encode_frame(self.msg_type(), &p)
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<ClientRequest, ProtocolError> {
        let mut r = PayloadReader::new(payload);
        let req = match msg_type {
            REQ_GET => {
                let view = Lsn(r.u64()?);
                ClientRequest::Get { key: r.bytes()?, view }
            }
            REQ_PUT => ClientRequest::Put {
                key: r.bytes()?,
                value: r.bytes()?,
            },
            REQ_DELETE => ClientRequest::Delete { key: r.bytes()? },
            REQ_RANGE => ClientRequest::Range {
                view: Lsn(r.u64()?),
                start: r.bytes()?,
                end: r.bytes()?,
                limit: r.u32()?,
            },
            REQ_BATCH_GET => {
                let view = Lsn(r.u64()?);
                let n = get_count(&mut r, 4, payload.len())?;
                let keys = (0..n).map(|_| r.bytes()).collect::<Result<_, _>>()?;
                ClientRequest::BatchGet { keys, view }
            }
            REQ_STATS => ClientRequest::Stats,
            REQ_PROMOTE => ClientRequest::Promote { partition: r.u32()? },
            REQ_HELLO => ClientRequest::Hello { node: r.u32()? },
            t => return Err(ProtocolError::UnknownType(t)),
        };
        r.finish()?;
        Ok(req)
    }
}

impl ClientResponse {
    pub fn msg_type(&self) -> u8 {
        match self {
            ClientResponse::Value(_) => RESP_VALUE,
            ClientResponse::Written { .. } => RESP_WRITTEN,
            ClientResponse::Deleted { .. } => RESP_DELETED,
            ClientResponse::Items(_) => RESP_ITEMS,
            ClientResponse::Batch { .. } => RESP_BATCH,
            ClientResponse::Stats(_) => RESP_STATS,
            ClientResponse::Promoted { .. } => RESP_PROMOTED,
            ClientResponse::Error { .. } => RESP_ERROR,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            ClientResponse::Value(v) => put_opt(&mut p, v),
            ClientResponse::Written { lsn } => put_u64(&mut p, lsn.0),
            ClientResponse::Deleted { existed, lsn } => {
                p.push(*existed as u8);
                put_u64(&mut p, lsn.0);
            }
            ClientResponse::Items(items) => {
                put_u32(&mut p, items.len() as u32);
                for (k, v) in items {
                    put_bytes(&mut p, k);
                    put_bytes(&mut p, v);
                }
            }
            ClientResponse::Batch { scan, items } => {
                p.push(*scan as u8);
                put_u32(&mut p, items.len() as u32);
                for (k, v) in items {
                    put_bytes(&mut p, k);
                    put_opt(&mut p, v);
                }
            }
            ClientResponse::Stats(entries) => {
                put_u32(&mut p, entries.len() as u32);
                for e in entries {
                    put_u32(&mut p, e.partition);
                    p.push(e.leader_role as u8);
                    put_u32(&mut p, e.leader);
                    for v in [e.epoch, e.flushed.0, e.potential_commit.0, e.replayed.0, e.live_keys, e.cache_hits, e.cache_misses] {
                        put_u64(&mut p, v);
                    }
                }
            }
            ClientResponse::Promoted { epoch, flushed, elapsed_us } => {
                put_u64(&mut p, *epoch);
                put_u64(&mut p, flushed.0);
                put_u64(&mut p, *elapsed_us);
            }
            ClientResponse::Error { code, leader, message } => {
                p.push(*code as u8);
                put_u32(&mut p, *leader);
                put_bytes(&mut p, message.as_bytes());
            }
        }
        encode_frame(self.msg_type(), &p)
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<ClientResponse, ProtocolError> {
        let mut r = PayloadReader::new(payload);
        let resp = match msg_type {
            RESP_VALUE => ClientResponse::Value(get_opt(&mut r)?),
            RESP_WRITTEN => ClientResponse::Written { lsn: Lsn(r.u64()?) },
            RESP_DELETED => ClientResponse::Deleted {
                existed: get_bool(&mut r)?,
                lsn: Lsn(r.u64()?),
            },
            RESP_ITEMS => {
                let n = get_count(&mut r, 8, payload.len())?;
                let items = (0..n).map(|_| Ok((r.bytes()?, r.bytes()?))).collect::<Result<_, ProtocolError>>()?;
                ClientResponse::Items(items)
            }
            RESP_BATCH => {
                let scan = get_bool(&mut r)?;
                let n = get_count(&mut r, 5, payload.len())?;
                let items = (0..n)
                    .map(|_| Ok((r.bytes()?, get_opt(&mut r)?)))
                    .collect::<Result<_, ProtocolError>>()?;
                ClientResponse::Batch { scan, items }
            }
            RESP_STATS => {
                let n = get_count(&mut r, 65, payload.len())?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(StatsEntry {
                        partition: r.u32()?,
                        leader_role: get_bool(&mut r)?,
                        leader: r.u32()?,
                        epoch: r.u64()?,
                        flushed: Lsn(r.u64()?),
                        potential_commit: Lsn(r.u64()?),
                        replayed: Lsn(r.u64()?),
                        live_keys: r.u64()?,
                        cache_hits: r.u64()?,
                        cache_misses: r.u64()?,
                    });
                }
                ClientResponse::Stats(entries)
            }
            RESP_PROMOTED => ClientResponse::Promoted {
                epoch: r.u64()?,
                flushed: Lsn(r.u64()?),
                elapsed_us: r.u64()?,
            },
            RESP_ERROR => {
                let code = r.u8()?;
                let code = ErrorCode::from_u8(code).ok_or_else(|| ProtocolError::Malformed(format!("error code {code}")))?;
                let leader = r.u32()?;
                let message = String::from_utf8_lossy(&r.bytes()?).into_owned();
                ClientResponse::Error { code, leader, message }
            }
            t => return Err(ProtocolError::UnknownType(t)),
        };
        r.finish()?;
        Ok(resp)
    }
}

pub fn write_message(w: &mut impl Write, frame: &[u8]) -> Result<(), ProtocolError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Closed` on a clean end of stream.
pub fn read_raw(r: &mut impl Read) -> Result<(u8, Vec<u8>), ProtocolError> {
    read_frame(r)?.ok_or(ProtocolError::Closed)
}

pub fn read_response(r: &mut impl Read) -> Result<ClientResponse, ProtocolError> {
    let (t, p) = read_raw(r)?;
    ClientResponse::decode(t, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes() -> impl Strategy<Value = Bytes> {
        prop::collection::vec(any::<u8>(), 0..24).prop_map(Bytes::from)
    }

    fn lsn() -> impl Strategy<Value = Lsn> {
        any::<u64>().prop_map(Lsn)
    }

    fn request() -> impl Strategy<Value = ClientRequest> {
        prop_oneof![
            (bytes(), lsn()).prop_map(|(key, view)| ClientRequest::Get { key, view }),
            (bytes(), bytes()).prop_map(|(key, value)| ClientRequest::Put { key, value }),
            bytes().prop_map(|key| ClientRequest::Delete { key }),
            (bytes(), bytes(), any::<u32>(), lsn()).prop_map(|(start, end, limit, view)| ClientRequest::Range {
                start,
                end,
                limit,
                view
            }),
            (prop::collection::vec(bytes(), 0..8), lsn()).prop_map(|(keys, view)| ClientRequest::BatchGet { keys, view }),
            Just(ClientRequest::Stats),
            any::<u32>().prop_map(|partition| ClientRequest::Promote { partition }),
            any::<u32>().prop_map(|node| ClientRequest::Hello { node }),
        ]
    }

    fn stats_entry() -> impl Strategy<Value = StatsEntry> {
        (any::<u32>(), any::<bool>(), any::<u32>(), prop::array::uniform7(any::<u64>())).prop_map(|(partition, leader_role, leader, v)| {
            StatsEntry {
                partition,
                leader_role,
                leader,
                epoch: v[0],
                flushed: Lsn(v[1]),
                potential_commit: Lsn(v[2]),
                replayed: Lsn(v[3]),
                live_keys: v[4],
                cache_hits: v[5],
                cache_misses: v[6],
            }
        })
    }

    fn response() -> impl Strategy<Value = ClientResponse> {
        let code = prop_oneof![
            Just(ErrorCode::NotLeader),
            Just(ErrorCode::Backpressure),
            Just(ErrorCode::ReadRejected),
            Just(ErrorCode::PromotionRefused),
            Just(ErrorCode::BadRequest),
            Just(ErrorCode::Internal),
        ];
        prop_oneof![
            prop::option::of(bytes()).prop_map(ClientResponse::Value),
            lsn().prop_map(|lsn| ClientResponse::Written { lsn }),
            (any::<bool>(), lsn()).prop_map(|(existed, lsn)| ClientResponse::Deleted { existed, lsn }),
            prop::collection::vec((bytes(), bytes()), 0..6).prop_map(ClientResponse::Items),
            (any::<bool>(), prop::collection::vec((bytes(), prop::option::of(bytes())), 0..6))
                .prop_map(|(scan, items)| ClientResponse::Batch { scan, items }),
            prop::collection::vec(stats_entry(), 0..4).prop_map(ClientResponse::Stats),
            (any::<u64>(), lsn(), any::<u64>()).prop_map(|(epoch, flushed, elapsed_us)| ClientResponse::Promoted {
                epoch,
                flushed,
                elapsed_us
            }),
            (code, any::<u32>(), "[a-z ]{0,20}").prop_map(|(code, leader, message)| ClientResponse::Error {
                code,
                leader,
                message
            }),
        ]
    }

    proptest! {
        #[test]
        fn requests_round_trip(req in request()) {
            let frame = req.encode();
            let (t, p) = read_raw(&mut frame.as_slice()).unwrap();
            prop_assert_eq!(ClientRequest::decode(t, &p).unwrap(), req);
        }

        #[test]
        fn responses_round_trip(resp in response()) {
            let frame = resp.encode();
            prop_assert_eq!(read_response(&mut frame.as_slice()).unwrap(), resp);
        }

        #[test]
        fn decoding_garbage_never_panics(t in 0x20u8..0x40, payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = ClientRequest::decode(t, &payload);
            let _ = ClientResponse::decode(t, &payload);
        }

        #[test]
        fn truncated_frames_are_errors(req in request(), cut in 1usize..16) {
            let frame = req.encode();
            let keep = frame.len().saturating_sub(cut);
            let mut slice = &frame[..keep];
            prop_assert!(read_raw(&mut slice).is_err());
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut p = Vec::new();
        put_u32(&mut p, 7);
        p.push(0);
        assert!(ClientRequest::decode(REQ_PROMOTE, &p).is_err());
        assert!(matches!(ClientRequest::decode(0x7e, &[]), Err(ProtocolError::UnknownType(0x7e))));
    }

    #[test]
    fn huge_counts_are_refused_before_allocating() {
        let mut p = Vec::new();
        put_u64(&mut p, 0);
        put_u32(&mut p, u32::MAX);
        assert!(ClientRequest::decode(REQ_BATCH_GET, &p).is_err());
    }

    #[test]
    fn engine_errors_keep_the_leader_hint() {
        let e = CoreError::NotLeader { partition: 0, leader: Some(3) };
        match ClientResponse::from_error(&e) {
            ClientResponse::Error { code, leader, message } => {
                assert_eq!(code, ErrorCode::NotLeader);
                assert_eq!(leader, 3);
                assert!(message.contains("leader"));
            }
            other => panic!("{other:?}"),
        }
    }
}
