use std::collections::BTreeMap;
use std::ops::ControlFlow;

use bytes::Bytes;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn pos(n: u64) -> LogPosition {
    LogPosition {
        segment_id: (n % 7) as u32,
        offset: n * 31,
    }
}

fn key(s: &str) -> Bytes {
    Bytes::copy_from_slice(s.as_bytes())
}

type Oracle = BTreeMap<Vec<u8>, (LogPosition, Lsn)>;

fn assert_matches_oracle(idx: &RadixIndex, oracle: &Oracle) {
    assert_eq!(idx.len(), oracle.len());
    let got: Vec<(Vec<u8>, LogPosition, Lsn)> = idx
        .entries()
        .into_iter()
        .map(|e| (e.key.to_vec(), e.position, e.version_lsn))
        .collect();
    let want: Vec<(Vec<u8>, LogPosition, Lsn)> = oracle.iter().map(|(k, (p, l))| (k.clone(), *p, *l)).collect();
    assert_eq!(got, want);
    for (k, (p, l)) in oracle {
        let e = idx.get(k).expect("present");
        assert_eq!((e.position, e.version_lsn), (*p, *l));
    }
}

#[test]
fn put_get_and_version_monotonicity() {
    let mut idx = RadixIndex::new();
    assert_eq!(idx.put(key("a"), pos(1), Lsn(5)), PutOutcome::Inserted);
    // Older version is ignored.
    assert!(matches!(idx.put(key("a"), pos(2), Lsn(3)), PutOutcome::Stale(_)));
    assert_eq!(idx.get(b"a").unwrap().position, pos(1));
    // Same version is a no-op too (replay idempotence).
    assert!(matches!(idx.put(key("a"), pos(2), Lsn(5)), PutOutcome::Stale(_)));
    match idx.put(key("a"), pos(3), Lsn(9)) {
        PutOutcome::Replaced(old) => assert_eq!(old.version_lsn, Lsn(5)),
        other => panic!("{other:?}"),
    }
    assert_eq!(idx.get(b"a").unwrap().version_lsn, Lsn(9));
    assert_eq!(idx.len(), 1);
    assert_eq!(idx.get(b"b"), None);
}

#[test]
fn keys_that_prefix_each_other() {
    let mut idx = RadixIndex::new();
    for (i, k) in ["abc", "ab", "abcd", "a", "abd", "b"].iter().enumerate() {
        idx.put(key(k), pos(i as u64), Lsn(i as u64 + 1));
    }
    let keys: Vec<Bytes> = idx.entries().into_iter().map(|e| e.key).collect();
    assert_eq!(keys, vec![key("a"), key("ab"), key("abc"), key("abcd"), key("abd"), key("b")]);
    assert!(idx.remove(b"ab").is_some());
    assert!(idx.get(b"ab").is_none());
    assert!(idx.get(b"abc").is_some());
    assert!(idx.remove(b"abc").is_some());
    assert!(idx.remove(b"abc").is_none());
    assert_eq!(idx.get(b"abcd").unwrap().version_lsn, Lsn(3));
    for k in ["a", "abcd", "abd", "b"] {
        assert!(idx.remove(k.as_bytes()).is_some(), "{k}");
    }
    assert!(idx.is_empty());
    assert_eq!(idx.root_kind(), None);
}

#[test]
fn thousand_key_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut idx = RadixIndex::new();
    let mut oracle = Oracle::new();
    let mut lsn = 0u64;
    for _ in 0..20_000 {
        let n: u32 = rng.gen_range(0..1000);
        // Mixed-length keys sharing prefixes.
        let k = match n % 3 {
            0 => format!("user:{n}").into_bytes(),
            1 => n.to_be_bytes().to_vec(),
            _ => format!("u{}", n / 10).into_bytes(),
        };
        lsn += 1;
        if rng.gen_bool(0.3) {
            let a = idx.remove(&k).map(|e| e.version_lsn);
            let b = oracle.remove(&k).map(|(_, l)| l);
            assert_eq!(a, b);
        } else {
            idx.put(Bytes::from(k.clone()), pos(lsn), Lsn(lsn));
            oracle.insert(k, (pos(lsn), Lsn(lsn)));
        }
    }
    assert_matches_oracle(&idx, &oracle);
}

#[test]
fn node_kinds_follow_child_counts() {
    let mut idx = RadixIndex::new();
    let child_key = |b: u8| Bytes::from(vec![b'p', b]);
    let expect = |n: usize| match n {
        0..=4 => NodeKind::Node4,
        5..=16 => NodeKind::Node16,
        17..=48 => NodeKind::Node48,
        _ => NodeKind::Node256,
    };
    // The root is an inner node with prefix "p" once two keys exist.
    for n in 1..=256usize {
        idx.put(child_key((n - 1) as u8), pos(n as u64), Lsn(n as u64));
        if n >= 2 {
            assert_eq!(idx.kind_at(b"p"), Some(expect(n)), "after {n} inserts");
        }
    }
    assert_eq!(idx.root_kind(), Some(NodeKind::Node256));
    // Shrinking keeps hysteresis: 256 → 48 at 37, 48 → 16 at 12, 16 → 4 at 3.
    let mut n = 256usize;
    let mut b = 255u8;
    let mut kinds = Vec::new();
    while n > 2 {
        idx.remove(&child_key(b));
        n -= 1;
        b = b.wrapping_sub(1);
        kinds.push((n, idx.kind_at(b"p").unwrap()));
    }
    let at = |count: usize| kinds.iter().find(|(n, _)| *n == count).unwrap().1;
    assert_eq!(at(38), NodeKind::Node256);
    assert_eq!(at(37), NodeKind::Node48);
    assert_eq!(at(13), NodeKind::Node48);
    assert_eq!(at(12), NodeKind::Node16);
    assert_eq!(at(4), NodeKind::Node16);
    assert_eq!(at(3), NodeKind::Node4);
    // Down to one child: the inner node collapses into the leaf.
    idx.remove(&child_key(1));
    assert_eq!(idx.root_kind(), Some(NodeKind::Leaf));
    assert_eq!(idx.len(), 1);
}

#[test]
fn prefix_compression_splits_and_merges() {
    let mut idx = RadixIndex::new();
    idx.put(key("customer:0001"), pos(1), Lsn(1));
    idx.put(key("customer:0002"), pos(2), Lsn(2));
    assert_eq!(idx.kind_at(b"customer:000"), Some(NodeKind::Node4));
    idx.put(key("cust"), pos(3), Lsn(3));
    idx.put(key("car"), pos(4), Lsn(4));
    assert_eq!(idx.kind_at(b"c"), Some(NodeKind::Node4));
    idx.remove(b"car");
    // "c" node merged back into its only remaining child.
    assert_eq!(idx.kind_at(b"c"), None);
    assert_eq!(idx.kind_at(b"cust"), Some(NodeKind::Node4));
    assert_eq!(idx.get(b"customer:0002").unwrap().version_lsn, Lsn(2));
    assert_eq!(idx.get(b"cust").unwrap().version_lsn, Lsn(3));
}

#[test]
fn relocate_only_matches_version() {
    let mut idx = RadixIndex::new();
    idx.put(key("k"), pos(1), Lsn(10));
    let moved = LogPosition {
        segment_id: 99,
        offset: 0,
    };
    assert!(!idx.relocate(b"k", Lsn(9), moved));
    assert_eq!(idx.get(b"k").unwrap().position, pos(1));
    assert!(idx.relocate(b"k", Lsn(10), moved));
    assert_eq!(idx.get(b"k").unwrap().position, moved);
    assert!(!idx.relocate(b"missing", Lsn(10), moved));
}

#[test]
fn remove_if_older_respects_newer_writes() {
    let mut idx = RadixIndex::new();
    idx.put(key("k"), pos(1), Lsn(10));
    assert!(idx.remove_if_older(b"k", Lsn(10)).is_none());
    assert!(idx.remove_if_older(b"k", Lsn(5)).is_none());
    assert!(idx.get(b"k").is_some());
    assert_eq!(idx.remove_if_older(b"k", Lsn(11)).unwrap().version_lsn, Lsn(10));
    assert!(idx.is_empty());
}

#[test]
fn range_bounds_and_limit() {
    let mut idx = RadixIndex::new();
    for (i, k) in ["a", "b", "ba", "bb", "c", "d"].iter().enumerate() {
        idx.put(key(k), pos(i as u64), Lsn(i as u64 + 1));
    }
    let keys = |v: Vec<IndexEntry>| v.into_iter().map(|e| e.key).collect::<Vec<_>>();
    assert_eq!(keys(idx.range(b"b", b"c", 10)), vec![key("b"), key("ba"), key("bb")]);
    assert_eq!(keys(idx.range(b"b", b"c", 2)), vec![key("b"), key("ba")]);
    assert_eq!(keys(idx.range(b"bab", b"z", 10)), vec![key("bb"), key("c"), key("d")]);
    assert!(idx.range(b"c", b"c", 10).is_empty());
    assert!(idx.range(b"x", b"z", 10).is_empty());
    assert!(idx.range(b"a", b"z", 0).is_empty());
}

#[test]
fn visitor_can_stop_early() {
    let mut idx = RadixIndex::new();
    for i in 0..100u32 {
        idx.put(Bytes::from(i.to_be_bytes().to_vec()), pos(i as u64), Lsn(i as u64 + 1));
    }
    let mut seen = 0;
    let r = idx.for_each(|_| {
        seen += 1;
        if seen == 10 {
            ControlFlow::Break(seen)
        } else {
            ControlFlow::Continue(())
        }
    });
    assert_eq!(r, ControlFlow::Break(10));
}

fn key_strategy() -> impl Strategy<Value = Vec<u8>> {
    // Small alphabet so keys collide and share prefixes.
    prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(b'a'), Just(255u8), any::<u8>()], 1..6)
}

proptest! {
    #[test]
    fn range_matches_oracle(
        keys in prop::collection::vec(key_strategy(), 0..200),
        start in prop::collection::vec(any::<u8>(), 0..4),
        end in prop::collection::vec(any::<u8>(), 0..4),
        limit in 0usize..50,
    ) {
        let mut idx = RadixIndex::new();
        let mut oracle = Oracle::new();
        for (i, k) in keys.iter().enumerate() {
            let l = Lsn(i as u64 + 1);
            idx.put(Bytes::from(k.clone()), pos(i as u64), l);
            oracle.insert(k.clone(), (pos(i as u64), l));
        }
        let got: Vec<Vec<u8>> = idx.range(&start, &end, limit).into_iter().map(|e| e.key.to_vec()).collect();
        let want: Vec<Vec<u8>> = if start < end {
            oracle.range(start.clone()..end.clone()).take(limit).map(|(k, _)| k.clone()).collect()
        } else {
            Vec::new()
        };
        prop_assert_eq!(got, want);
    }

    #[test]
    fn put_remove_matches_oracle(ops in prop::collection::vec((key_strategy(), any::<bool>()), 0..300)) {
        let mut idx = RadixIndex::new();
        let mut oracle = Oracle::new();
        for (i, (k, is_put)) in ops.into_iter().enumerate() {
            let l = Lsn(i as u64 + 1);
            if is_put {
                idx.put(Bytes::from(k.clone()), pos(i as u64), l);
                oracle.insert(k, (pos(i as u64), l));
            } else {
                prop_assert_eq!(idx.remove(&k).is_some(), oracle.remove(&k).is_some());
            }
        }
        assert_matches_oracle(&idx, &oracle);
    }
}

#[test]
fn snapshot_roundtrip_ten_thousand() {
    let mut idx = RadixIndex::new();
    for i in 0..10_000u64 {
        idx.put(Bytes::from(format!("key-{:06}", i * 7919 % 10_000)), pos(i), Lsn(i + 1));
    }
    let mut buf = Vec::new();
    let info = idx.write_snapshot(&mut buf, Lsn(10_000)).unwrap();
    assert_eq!(info.entry_count, 10_000);
    assert_eq!(info.bytes as usize, buf.len());
    let (loaded, linfo) = RadixIndex::load_snapshot(&buf).unwrap();
    assert_eq!(linfo.last_included_lsn, Lsn(10_000));
    assert_eq!(loaded.entries(), idx.entries());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.snap");
    let stats = crate::stats::IoStats::new();
    let finfo = idx.write_snapshot_file(&path, Lsn(10_000), &stats).unwrap();
    assert_eq!(stats.snapshot_bytes_written(), finfo.bytes);
    assert_eq!(read_snapshot_header(&path).unwrap().last_included_lsn, Lsn(10_000));
    let (from_file, _) = RadixIndex::load_snapshot_file(&path).unwrap();
    assert_eq!(from_file.len(), 10_000);
}

#[test]
fn damaged_snapshots_are_rejected() {
    let mut idx = RadixIndex::new();
    for i in 0..50u64 {
        idx.put(Bytes::from(format!("k{i}")), pos(i), Lsn(i + 1));
    }
    let mut buf = Vec::new();
    idx.write_snapshot(&mut buf, Lsn(50)).unwrap();
    for cut in [0, 3, SNAPSHOT_TRAILER_LEN - 1, buf.len() / 2, buf.len() - 1] {
        assert!(
            matches!(RadixIndex::load_snapshot(&buf[..cut]), Err(crate::Error::CorruptSnapshot(_))),
            "cut at {cut}"
        );
    }
    let mut flipped = buf.clone();
    flipped[10] ^= 0x40;
    assert!(matches!(RadixIndex::load_snapshot(&flipped), Err(crate::Error::CorruptSnapshot(_))));
    let empty = {
        let mut b = Vec::new();
        RadixIndex::new().write_snapshot(&mut b, Lsn(0)).unwrap();
        b
    };
    assert_eq!(RadixIndex::load_snapshot(&empty).unwrap().0.len(), 0);
}
