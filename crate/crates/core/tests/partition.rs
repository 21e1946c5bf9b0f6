use std::collections::BTreeMap;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use logstore_core::cache::CacheConfig;
use logstore_core::engine::{route, BatchPath, Partition, PartitionConfig};
use logstore_core::recovery::CommitSource;
use logstore_core::stats::IoStats;
use logstore_core::wal::{FlushPolicy, LogConfig};
use logstore_core::workload::encode_key;

fn config(segment_bytes: u64) -> PartitionConfig {
    PartitionConfig {
        log: LogConfig {
            segment_bytes,
            flush: FlushPolicy::OsBuffered,
            ..LogConfig::default()
        },
        cache: CacheConfig::with_capacity(1 << 20),
        checkpoint_every: 0,
        compact_after_sealed: 0,
        ..PartitionConfig::default()
    }
}

fn open(dir: &TempDir, cfg: PartitionConfig) -> Partition {
    Partition::open(dir.path(), 0, cfg, IoStats::new(), CommitSource::Local).unwrap().0
}

fn b(s: &str) -> Bytes {
    Bytes::copy_from_slice(s.as_bytes())
}

fn put(p: &mut Partition, k: &str, v: &str) {
    let lsn = p.next_lsn();
    p.exec_put(b(k), b(v), lsn).unwrap();
}

#[test]
fn put_get_overwrite_delete() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(1 << 20));
    assert_eq!(p.exec_get(b"a").unwrap(), None);
    put(&mut p, "a", "1");
    put(&mut p, "a", "2");
    assert_eq!(p.exec_get(b"a").unwrap(), Some(b("2")));
    let lsn = p.next_lsn();
    assert!(p.exec_delete(b("a"), lsn).unwrap());
    assert_eq!(p.exec_get(b"a").unwrap(), None);
    // Deleting an absent key still writes a tombstone.
    let before = p.last_lsn();
    let lsn = p.next_lsn();
    assert!(!p.exec_delete(b("zzz"), lsn).unwrap());
    assert_eq!(p.last_lsn(), before.next());
    p.commit_local().unwrap();
    let tail: Vec<_> = p.log().iter_from_lsn(lsn).map(|r| r.unwrap().0).collect();
    assert_eq!(tail.len(), 1);
    assert_eq!(tail[0].key, b("zzz"));
}

#[test]
fn empty_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(1 << 20));
    let lsn = p.next_lsn();
    assert!(matches!(
        p.exec_put(Bytes::new(), b("v"), lsn),
        Err(logstore_core::Error::EmptyKey)
    ));
}

#[test]
fn random_ops_match_oracle_with_compaction() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(64 << 10));
    let mut oracle: BTreeMap<Bytes, Bytes> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..20_000u32 {
        let key = encode_key(rng.gen_range(0..500));
        match rng.gen_range(0..10) {
            0..=4 => {
                let v = Bytes::from(format!("v{i}"));
                let lsn = p.next_lsn();
                p.exec_put(key.clone(), v.clone(), lsn).unwrap();
                oracle.insert(key, v);
            }
            5..=8 => assert_eq!(p.exec_get(&key).unwrap(), oracle.get(&key).cloned()),
            _ => {
                let lsn = p.next_lsn();
                assert_eq!(p.exec_delete(key.clone(), lsn).unwrap(), oracle.remove(&key).is_some());
            }
        }
        if i % 2500 == 2499 {
            p.force_compact().unwrap();
        }
    }
    assert_eq!(p.live_keys(), oracle.len());
    // Range across compacted and fresh data.
    let lo = encode_key(100);
    let hi = encode_key(300);
    let want: Vec<(Bytes, Bytes)> = oracle
        .range(lo.clone()..hi.clone())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    assert_eq!(p.exec_range(&lo, &hi, usize::MAX).unwrap(), want);
    assert_eq!(p.exec_range(&lo, &hi, 3).unwrap(), want[..3.min(want.len())].to_vec());
    assert!(p.exec_range(&lo, &lo, 10).unwrap().is_empty());
}

#[test]
fn cold_get_costs_one_read_warm_costs_none() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(1 << 20));
    for i in 0..200u64 {
        let lsn = p.next_lsn();
        p.exec_put(encode_key(i), Bytes::from(vec![1u8; 100]), lsn).unwrap();
    }
    p.commit_local().unwrap();
    let before = p.stats().record_reads();
    for i in 0..200u64 {
        assert!(p.exec_get(&encode_key(i)).unwrap().is_some());
    }
    assert_eq!(p.stats().record_reads() - before, 200);
    let before = p.stats().record_reads();
    for i in 0..200u64 {
        assert!(p.exec_get(&encode_key(i)).unwrap().is_some());
    }
    assert_eq!(p.stats().record_reads() - before, 0);
    // Absent keys cost nothing either.
    assert_eq!(p.exec_get(&encode_key(10_000)).unwrap(), None);
    assert_eq!(p.stats().record_reads() - before, 0);
}

#[test]
fn batch_get_picks_path_and_paths_agree() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(32 << 10));
    let (empty, path) = p.exec_batch_get(&[encode_key(1), encode_key(2)]).unwrap();
    assert!(empty.iter().all(|(_, v)| v.is_none()));
    assert_eq!(path, BatchPath::Index);

    for i in 0..1000u64 {
        let lsn = p.next_lsn();
        p.exec_put(encode_key(i), Bytes::from(format!("v{i}")), lsn).unwrap();
    }
    // Some overwrites and deletes, then a compaction, then fresh writes.
    for i in (0..1000u64).step_by(7) {
        let lsn = p.next_lsn();
        p.exec_put(encode_key(i), Bytes::from(format!("w{i}")), lsn).unwrap();
    }
    p.force_compact().unwrap();
    for i in (0..1000u64).step_by(11) {
        let lsn = p.next_lsn();
        p.exec_delete(encode_key(i), lsn).unwrap();
    }
    let live = p.live_keys();

    let small: Vec<Bytes> = (0..5).map(encode_key).collect();
    let (_, path) = p.exec_batch_get(&small).unwrap();
    assert_eq!(path, BatchPath::Index);

    let big: Vec<Bytes> = (0..200u64).map(|i| encode_key(i * 5)).chain([encode_key(5_000)]).collect();
    assert!(big.len() as f64 / live as f64 > 0.1);
    let (scan, path) = p.exec_batch_get(&big).unwrap();
    assert_eq!(path, BatchPath::Scan);
    let point: Vec<(Bytes, Option<Bytes>)> = big.iter().map(|k| (k.clone(), p.exec_get(k).unwrap())).collect();
    assert_eq!(scan, point);
    assert!(scan.iter().any(|(_, v)| v.is_none()));
}

#[test]
fn routing_is_stable_and_balanced() {
    assert!((0..100u64).all(|i| route(&encode_key(i), 1) == 0));
    let k = b"some-key";
    assert_eq!(route(k, 4), route(k, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0u32; 4];
    for _ in 0..100_000 {
        let key: [u8; 16] = rng.gen();
        counts[route(&key, 4) as usize] += 1;
    }
    for c in counts {
        let share = c as f64 / 100_000.0;
        assert!((share - 0.25).abs() < 0.02, "{counts:?}");
    }
    // Sequential integer keys spread too.
    let mut counts = [0u32; 4];
    for i in 0..100_000u64 {
        counts[route(&encode_key(i), 4) as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn writes_refresh_cached_values_only() {
    let dir = TempDir::new().unwrap();
    let mut p = open(&dir, config(1 << 20));
    put(&mut p, "k", "1");
    assert!(p.cache().region_of(b"k").is_none());
    assert_eq!(p.exec_get(b"k").unwrap(), Some(b("1")));
    assert!(p.cache().region_of(b"k").is_some());
    put(&mut p, "k", "2");
    let reads = p.stats().record_reads();
    assert_eq!(p.exec_get(b"k").unwrap(), Some(b("2")));
    assert_eq!(p.stats().record_reads(), reads, "served from refreshed cache");
    let lsn = p.next_lsn();
    p.exec_delete(b("k"), lsn).unwrap();
    assert!(p.cache().region_of(b"k").is_none());
}
