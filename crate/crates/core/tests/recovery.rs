use std::collections::BTreeMap;
use std::fs::OpenOptions;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use logstore_core::cache::CacheConfig;
use logstore_core::engine::{Partition, PartitionConfig};
use logstore_core::recovery::{snapshot_path, CommitSource, RecoveryReport};
use logstore_core::stats::{IoStats, SharedStats};
use logstore_core::wal::{segment_file_name, FlushPolicy, LogConfig};
use logstore_core::workload::encode_key;
use logstore_core::Lsn;

fn config() -> PartitionConfig {
    PartitionConfig {
        log: LogConfig {
            segment_bytes: 256 << 10,
            flush: FlushPolicy::OsBuffered,
            ..LogConfig::default()
        },
        cache: CacheConfig::with_capacity(1 << 20),
        checkpoint_every: 0,
        compact_after_sealed: 0,
        ..PartitionConfig::default()
    }
}

fn open_with(dir: &TempDir, stats: SharedStats) -> (Partition, RecoveryReport) {
    Partition::open(dir.path(), 0, config(), stats, CommitSource::Local).unwrap()
}

fn open(dir: &TempDir) -> (Partition, RecoveryReport) {
    open_with(dir, IoStats::new())
}

type Oracle = BTreeMap<Bytes, Bytes>;

/// Random puts/deletes over a small key space; returns the oracle.
fn write_ops(p: &mut Partition, oracle: &mut Oracle, n: u64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let key = encode_key(rng.gen_range(0..300));
        let lsn = p.next_lsn();
        if rng.gen_bool(0.85) {
            let v = Bytes::from(format!("v{lsn}"));
            p.exec_put(key.clone(), v.clone(), lsn).unwrap();
            oracle.insert(key, v);
        } else {
            p.exec_delete(key.clone(), lsn).unwrap();
            oracle.remove(&key);
        }
    }
    p.commit_local().unwrap();
}

fn assert_state(p: &mut Partition, oracle: &Oracle) {
    assert_eq!(p.live_keys(), oracle.len());
    for i in 0..300 {
        let k = encode_key(i);
        assert_eq!(p.exec_get(&k).unwrap(), oracle.get(&k).cloned(), "key {i}");
    }
}

#[test]
fn full_rebuild_without_snapshot() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 10_000, 1);
    }
    let (mut p, report) = open(&dir);
    assert!(report.full_rebuild());
    assert_eq!(report.records_read, 10_000);
    assert_eq!(report.flushed, Lsn(10_000));
    assert_eq!(p.lsn_state().potential_commit(), Lsn(10_000));
    assert_state(&mut p, &oracle);
}

#[test]
fn snapshot_bounds_tail_reads() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 9_000, 2);
        let info = p.checkpoint().unwrap();
        assert_eq!(info.last_included_lsn, Lsn(9_000));
        write_ops(&mut p, &mut oracle, 1_000, 3);
    }
    let stats = IoStats::new();
    let (mut p, report) = open_with(&dir, stats.clone());
    assert_eq!(report.snapshot.unwrap().last_included_lsn, Lsn(9_000));
    assert_eq!(report.records_read, 1_000);
    assert_eq!(stats.recovery_records_read(), report.flushed.0 - 9_000);
    assert_state(&mut p, &oracle);
}

#[test]
fn checkpoints_track_flushed_lsn() {
    let dir = TempDir::new().unwrap();
    let (mut p, _) = open(&dir);
    let first = p.checkpoint().unwrap();
    assert_eq!((first.entry_count, first.last_included_lsn), (0, Lsn(0)));
    let mut oracle = Oracle::new();
    write_ops(&mut p, &mut oracle, 10, 4);
    let second = p.checkpoint().unwrap();
    assert_eq!(second.last_included_lsn, Lsn(first.last_included_lsn.0 + 10));
}

#[test]
fn leftover_temp_snapshot_is_ignored() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 500, 5);
        p.checkpoint().unwrap();
        write_ops(&mut p, &mut oracle, 100, 6);
    }
    // A checkpoint that died before its rename leaves a partial temp file.
    let tmp = snapshot_path(dir.path()).with_extension("tmp");
    std::fs::write(&tmp, b"partial garbage").unwrap();
    let (mut p, report) = open(&dir);
    assert_eq!(report.snapshot.unwrap().last_included_lsn, Lsn(500));
    assert_eq!(report.records_read, 100);
    assert_state(&mut p, &oracle);
}

#[test]
fn corrupt_snapshot_falls_back_to_full_rebuild() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 2_000, 7);
        p.checkpoint().unwrap();
    }
    let path = snapshot_path(dir.path());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[5] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let (mut p, report) = open(&dir);
    assert!(report.full_rebuild());
    assert_eq!(report.records_read, 2_000);
    assert_state(&mut p, &oracle);
}

#[test]
fn torn_final_record_is_truncated() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    let last_segment;
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 300, 8);
        last_segment = p.log().active_segment().segment_id;
        // One more record that will be torn.
        let lsn = p.next_lsn();
        p.exec_put(encode_key(9_999), Bytes::from(vec![9u8; 200]), lsn).unwrap();
        p.commit_local().unwrap();
    }
    let path = dir.path().join(segment_file_name(0, last_segment));
    let len = std::fs::metadata(&path).unwrap().len();
    OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 50).unwrap();
    let (mut p, report) = open(&dir);
    assert_eq!(report.flushed, Lsn(300));
    assert_eq!(p.exec_get(&encode_key(9_999)).unwrap(), None);
    assert_state(&mut p, &oracle);
    // The log accepts new appends right after the truncation point.
    let lsn = p.next_lsn();
    assert_eq!(lsn, Lsn(301));
    p.exec_put(encode_key(1), Bytes::from_static(b"after"), lsn).unwrap();
    p.commit_local().unwrap();
    drop(p);
    let (mut p, _) = open(&dir);
    assert_eq!(p.exec_get(&encode_key(1)).unwrap(), Some(Bytes::from_static(b"after")));
}

#[test]
fn delete_survives_restart() {
    let dir = TempDir::new().unwrap();
    {
        let (mut p, _) = open(&dir);
        let l = p.next_lsn();
        p.exec_put(Bytes::from_static(b"k"), Bytes::from_static(b"v"), l).unwrap();
        let l = p.next_lsn();
        p.exec_delete(Bytes::from_static(b"k"), l).unwrap();
        p.commit_local().unwrap();
    }
    let (mut p, _) = open(&dir);
    assert_eq!(p.exec_get(b"k").unwrap(), None);
}

#[test]
fn compaction_then_restart_never_resurrects_deleted_keys() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 3_000, 9);
        p.checkpoint().unwrap();
        write_ops(&mut p, &mut oracle, 3_000, 10);
        // Compaction checkpoints afterwards; then more writes land in the tail.
        p.force_compact().unwrap();
        write_ops(&mut p, &mut oracle, 1_000, 11);
    }
    let (mut p, report) = open(&dir);
    assert_eq!(report.snapshot.unwrap().last_included_lsn, Lsn(6_000));
    assert_eq!(report.records_read, 1_000);
    assert_state(&mut p, &oracle);
}

#[test]
fn stale_snapshot_after_compaction_forces_rebuild() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 2_000, 12);
        p.checkpoint().unwrap();
        write_ops(&mut p, &mut oracle, 2_000, 13);
        p.force_compact().unwrap();
    }
    // Put the pre-compaction snapshot back, as if the post-compaction
    // checkpoint never happened.
    let stale = {
        let d2 = TempDir::new().unwrap();
        let (mut q, _) = open(&d2);
        let mut o2 = Oracle::new();
        write_ops(&mut q, &mut o2, 10, 14);
        q.checkpoint().unwrap();
        std::fs::read(snapshot_path(d2.path())).unwrap()
    };
    std::fs::write(snapshot_path(dir.path()), stale).unwrap();
    let (mut p, report) = open(&dir);
    assert!(report.full_rebuild());
    assert_state(&mut p, &oracle);
}

#[test]
fn replaying_twice_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let mut oracle = Oracle::new();
    {
        let (mut p, _) = open(&dir);
        write_ops(&mut p, &mut oracle, 1_000, 15);
        p.checkpoint().unwrap();
        write_ops(&mut p, &mut oracle, 1_000, 16);
    }
    let (p1, _) = open(&dir);
    let first = p1.index().entries();
    drop(p1);
    let (p2, _) = open(&dir);
    assert_eq!(p2.index().entries(), first);
}

#[test]
fn truncate_after_drops_tail_and_rebuilds_index() {
    let dir = TempDir::new().unwrap();
    let (mut p, _) = open(&dir);
    let mut oracle = Oracle::new();
    write_ops(&mut p, &mut oracle, 100, 17);
    let kept = oracle.clone();
    p.checkpoint().unwrap();
    write_ops(&mut p, &mut oracle, 50, 18);
    p.checkpoint().unwrap();
    p.truncate_after(Lsn(100)).unwrap();
    assert_eq!(p.last_lsn(), Lsn(100));
    assert_eq!(p.lsn_state().flushed(), Lsn(100));
    assert_state(&mut p, &kept);
    drop(p);
    let (mut p, report) = open(&dir);
    assert_eq!(report.flushed, Lsn(100));
    assert_state(&mut p, &kept);
}
