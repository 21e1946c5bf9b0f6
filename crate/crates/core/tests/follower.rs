use bytes::Bytes;
use tempfile::TempDir;

use logstore_core::cache::CacheConfig;
use logstore_core::engine::{Partition, PartitionConfig};
use logstore_core::recovery::CommitSource;
use logstore_core::replication::{check_promotion, EpochMeta, FollowerReplica, ReplMessage};
use logstore_core::stats::IoStats;
use logstore_core::wal::{FlushPolicy, LogConfig, LogRecord};
use logstore_core::{Error, Lsn};

fn open(dir: &TempDir) -> Partition {
    let cfg = PartitionConfig {
        log: LogConfig {
            flush: FlushPolicy::OsBuffered,
            ..LogConfig::default()
        },
        cache: CacheConfig::with_capacity(1 << 20),
        checkpoint_every: 0,
        compact_after_sealed: 0,
        ..PartitionConfig::default()
    };
    Partition::open(dir.path(), 0, cfg, IoStats::new(), CommitSource::Leader).unwrap().0
}

fn recs(range: std::ops::RangeInclusive<u64>) -> Vec<LogRecord> {
    range
        .map(|l| LogRecord::put(0, Lsn(l), Bytes::from(format!("k{}", l % 3)), Bytes::from(format!("v{l}"))))
        .collect()
}

fn ack(flushed: u64) -> ReplMessage {
    ReplMessage::Ack {
        partition: 0,
        epoch: 1,
        node: 2,
        last_flushed: Lsn(flushed),
    }
}

#[test]
fn in_order_batch_then_piggybacked_commit() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir);
    let mut f = FollowerReplica::new(2, 0, EpochMeta::default());
    let reply = f.on_append_entries(&mut p, 1, Lsn(0), recs(1..=5)).unwrap();
    assert_eq!(reply, ack(5));
    let s = p.lsn_state();
    assert_eq!((s.flushed(), s.potential_commit(), s.replayed()), (Lsn(5), Lsn(0), Lsn(0)));

    let reads = p.stats().recovery_records_read() + p.stats().scan_records() + p.stats().record_reads();
    let reply = f.on_append_entries(&mut p, 1, Lsn(5), recs(6..=6)).unwrap();
    assert_eq!(reply, ack(6));
    let s = p.lsn_state();
    assert_eq!((s.potential_commit(), s.replayed()), (Lsn(5), Lsn(5)));
    let after = p.stats().recovery_records_read() + p.stats().scan_records() + p.stats().record_reads();
    assert_eq!(after, reads, "advancing the commit point re-reads nothing");
    // The index already reflects the records.
    assert_eq!(p.exec_get(b"k0").unwrap(), Some(Bytes::from_static(b"v6")));
}

#[test]
fn duplicate_batch_is_an_idempotent_ack() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir);
    let mut f = FollowerReplica::new(2, 0, EpochMeta::default());
    f.on_append_entries(&mut p, 1, Lsn(0), recs(1..=5)).unwrap();
    let bytes = p.stats().log_bytes_written();
    assert_eq!(f.on_append_entries(&mut p, 1, Lsn(0), recs(1..=5)).unwrap(), ack(5));
    assert_eq!(p.stats().log_bytes_written(), bytes);
    // Overlapping batch appends only the new suffix.
    assert_eq!(f.on_append_entries(&mut p, 1, Lsn(0), recs(3..=8)).unwrap(), ack(8));
    assert_eq!(p.last_lsn(), Lsn(8));
}

#[test]
fn gap_is_nacked_with_expected_lsn() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir);
    let mut f = FollowerReplica::new(2, 0, EpochMeta::default());
    f.on_append_entries(&mut p, 1, Lsn(0), recs(1..=3)).unwrap();
    let reply = f.on_append_entries(&mut p, 1, Lsn(3), recs(6..=8)).unwrap();
    assert_eq!(
        reply,
        ReplMessage::Nack {
            partition: 0,
            epoch: 1,
            node: 2,
            expected: Lsn(4)
        }
    );
    assert_eq!(p.last_lsn(), Lsn(3));
    // The piggybacked commit still applies.
    assert_eq!(p.lsn_state().potential_commit(), Lsn(3));
}

#[test]
fn other_epochs_are_rejected_until_truncate() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir);
    let mut f = FollowerReplica::new(2, 0, EpochMeta::default());
    f.on_append_entries(&mut p, 1, Lsn(0), recs(1..=10)).unwrap();

    let rejected = ReplMessage::EpochRejected {
        partition: 0,
        epoch: 1,
        node: 2,
    };
    assert_eq!(f.on_append_entries(&mut p, 2, Lsn(0), recs(11..=11)).unwrap(), rejected);
    assert_eq!(f.on_truncate(&mut p, 0, Lsn(0)).unwrap(), rejected);

    // New leader started epoch 2 at LSN 7: records 8..10 go away.
    let reply = f.on_truncate(&mut p, 2, Lsn(7)).unwrap();
    assert_eq!(
        reply,
        ReplMessage::Ack {
            partition: 0,
            epoch: 2,
            node: 2,
            last_flushed: Lsn(7)
        }
    );
    assert_eq!(p.last_lsn(), Lsn(7));
    assert_eq!(p.exec_get(b"k2").unwrap(), Some(Bytes::from_static(b"v5")));
    assert_eq!(f.on_append_entries(&mut p, 1, Lsn(0), recs(8..=8)).unwrap(), ReplMessage::EpochRejected {
        partition: 0,
        epoch: 2,
        node: 2
    });
    let new_epoch: Vec<LogRecord> = (8..=9)
        .map(|l| LogRecord::put(0, Lsn(l), Bytes::from_static(b"k2"), Bytes::from(format!("e2-{l}"))))
        .collect();
    f.on_append_entries(&mut p, 2, Lsn(9), new_epoch).unwrap();
    assert_eq!(p.exec_get(b"k2").unwrap(), Some(Bytes::from_static(b"e2-9")));

    // The epoch survives a restart.
    assert_eq!(
        EpochMeta::load(dir.path()).unwrap(),
        EpochMeta {
            epoch: 2,
            epoch_start: Lsn(7)
        }
    );
}

#[test]
fn promotion_requires_the_longest_reachable_log() {
    assert!(check_promotion(Lsn(10), &[(3, Lsn(9))]).is_ok());
    assert!(check_promotion(Lsn(10), &[(3, Lsn(10))]).is_ok());
    assert!(check_promotion(Lsn(10), &[]).is_ok());
    match check_promotion(Lsn(8), &[(1, Lsn(5)), (3, Lsn(9))]) {
        Err(Error::PromotionRefused { peer, peer_flushed, .. }) => {
            assert_eq!((peer, peer_flushed), (3, Lsn(9)));
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}
