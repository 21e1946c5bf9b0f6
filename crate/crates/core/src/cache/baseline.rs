//! Comparison policies with the same byte accounting as the two-stage cache.

use std::collections::{HashMap, VecDeque};

use bytes::Bytes;

use super::{entry_charge, CacheStats, ReadCache};
use crate::types::Lsn;

/// Least-recently-used eviction.
pub struct LruCache {
    capacity_bytes: u64,
    inner: lru::LruCache<Bytes, (Bytes, Lsn)>,
    resident_bytes: u64,
    hits: u64,
    misses: u64,
}

impl LruCache {
    pub fn new(capacity_bytes: u64) -> LruCache {
        LruCache {
            capacity_bytes,
            inner: lru::LruCache::unbounded(),
            resident_bytes: 0,
            hits: 0,
            misses: 0,
        }
    }
}

impl ReadCache for LruCache {
    fn get(&mut self, key: &[u8]) -> Option<(Bytes, Lsn)> {
        match self.inner.get(key) {
            Some(v) => {
                self.hits += 1;
                Some(v.clone())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    fn admit(&mut self, key: Bytes, value: Bytes, version: Lsn) -> Vec<Bytes> {
        let charge = entry_charge(key.len(), value.len());
        if charge > self.capacity_bytes {
            self.invalidate(&key);
            return vec![key];
        }
        if let Some((v, l)) = self.inner.peek(&key) {
            if version < *l {
                return Vec::new();
            }
            self.resident_bytes -= entry_charge(key.len(), v.len());
        }
        self.inner.put(key, (value, version));
        self.resident_bytes += charge;
        let mut evicted = Vec::new();
        while self.resident_bytes > self.capacity_bytes {
            let (k, (v, _)) = self.inner.pop_lru().expect("non-empty while over capacity");
            self.resident_bytes -= entry_charge(k.len(), v.len());
            evicted.push(k);
        }
        evicted
    }

    fn invalidate(&mut self, key: &[u8]) -> bool {
        match self.inner.pop(key) {
            Some((v, _)) => {
                self.resident_bytes -= entry_charge(key.len(), v.len());
                true
            }
            None => false,
        }
    }

    fn contains(&self, key: &[u8]) -> bool {
        self.inner.contains(key)
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            resident_bytes: self.resident_bytes,
            hot_count: self.inner.len(),
            cooling_count: 0,
        }
    }

    fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }
}

/// First-in-first-out eviction; hits do not reorder anything.
pub struct FifoCache {
    capacity_bytes: u64,
    map: HashMap<Bytes, (Bytes, Lsn, u64)>,
    queue: VecDeque<(u64, Bytes)>,
    next_seq: u64,
    resident_bytes: u64,
    hits: u64,
    misses: u64,
}

impl FifoCache {
    pub fn new(capacity_bytes: u64) -> FifoCache {
        FifoCache {
            capacity_bytes,
            map: HashMap::new(),
            queue: VecDeque::new(),
            next_seq: 0,
            resident_bytes: 0,
            hits: 0,
            misses: 0,
        }
    }
}

impl ReadCache for FifoCache {
    fn get(&mut self, key: &[u8]) -> Option<(Bytes, Lsn)> {
        match self.map.get(key) {
            Some((v, l, _)) => {
                self.hits += 1;
                Some((v.clone(), *l))
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    fn admit(&mut self, key: Bytes, value: Bytes, version: Lsn) -> Vec<Bytes> {
        let charge = entry_charge(key.len(), value.len());
        if charge > self.capacity_bytes {
            self.invalidate(&key);
            return vec![key];
        }
        if let Some((v, l, _)) = self.map.get_mut(&key) {
            if version < *l {
                return Vec::new();
            }
            // Refresh in place; queue position unchanged.
            self.resident_bytes = self.resident_bytes - entry_charge(key.len(), v.len()) + charge;
            *v = value;
            *l = version;
        } else {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.queue.push_back((seq, key.clone()));
            self.map.insert(key, (value, version, seq));
            self.resident_bytes += charge;
        }
        let mut evicted = Vec::new();
        while self.resident_bytes > self.capacity_bytes {
            let Some((seq, k)) = self.queue.pop_front() else { break };
            if matches!(self.map.get(&k), Some((_, _, s)) if *s == seq) {
                let (v, _, _) = self.map.remove(&k).unwrap();
                self.resident_bytes -= entry_charge(k.len(), v.len());
                evicted.push(k);
            }
        }
        evicted
    }

    fn invalidate(&mut self, key: &[u8]) -> bool {
        match self.map.remove(key) {
            Some((v, _, _)) => {
                self.resident_bytes -= entry_charge(key.len(), v.len());
                if self.queue.len() > 2 * self.map.len() + 64 {
                    let map = &self.map;
                    self.queue
                        .retain(|(seq, k)| matches!(map.get(k), Some((_, _, s)) if s == seq));
                }
                true
            }
            None => false,
        }
    }

    fn contains(&self, key: &[u8]) -> bool {
        self.map.contains_key(key)
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            resident_bytes: self.resident_bytes,
            hot_count: self.map.len(),
            cooling_count: 0,
        }
    }

    fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }
}
