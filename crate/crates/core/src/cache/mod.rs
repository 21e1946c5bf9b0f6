//! Record-granularity read caches.
//!
//! [`TwoStageCache`] is the production policy: a hot region plus a small FIFO
//! cooling region. When the cache is over capacity a uniformly random hot
//! entry is demoted to the cooling tail; entries fall off the cooling head.
//! A hit in cooling promotes the entry back to hot. Hot hits touch nothing
//! but counters.
//!
//! [`LruCache`] and [`FifoCache`] implement the same [`ReadCache`] trait and
//! exist for hit-ratio comparisons.

mod baseline;
#[cfg(test)]
mod tests;

use std::collections::{HashMap, VecDeque};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::Lsn;

pub use baseline::{FifoCache, LruCache};

/// Fixed per-entry bookkeeping charge added to key and value bytes.
pub const ENTRY_OVERHEAD: u64 = 64;

/// Bytes an entry occupies for capacity accounting.
pub fn entry_charge(key_len: usize, value_len: usize) -> u64 {
    key_len as u64 + value_len as u64 + ENTRY_OVERHEAD
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    pub cooling_fraction: f64,
    /// Seed for the demotion victim picker.
    pub seed: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity_bytes: 64 << 20,
            cooling_fraction: 0.10,
            seed: 0x5eed,
        }
    }
}

impl CacheConfig {
    pub fn with_capacity(capacity_bytes: u64) -> CacheConfig {
        CacheConfig {
            capacity_bytes,
            ..CacheConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Hot,
    Cooling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub resident_bytes: u64,
    pub hot_count: usize,
    pub cooling_count: usize,
}

impl CacheStats {
    pub fn hit_ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Common interface of the cache policies.
pub trait ReadCache {
    /// Looks up a key, counting a hit or a miss.
    fn get(&mut self, key: &[u8]) -> Option<(Bytes, Lsn)>;
    /// Inserts or refreshes an entry; returns evicted keys. A stale version
    /// is ignored.
    fn admit(&mut self, key: Bytes, value: Bytes, version: Lsn) -> Vec<Bytes>;
    fn invalidate(&mut self, key: &[u8]) -> bool;
    fn contains(&self, key: &[u8]) -> bool;
    fn stats(&self) -> CacheStats;
    fn reset_counters(&mut self);

    /// Write-path hook: refreshes an entry only if it is already cached.
    fn refresh(&mut self, key: Bytes, value: Bytes, version: Lsn) -> Vec<Bytes> {
        if self.contains(&key) {
            self.admit(key, value, version)
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Place {
    /// Index into the dense hot array.
    Hot(usize),
    /// Sequence number of the entry's cooling FIFO slot.
    Cooling(u64),
}

#[derive(Debug)]
struct Slot {
    value: Bytes,
    version: Lsn,
    charge: u64,
    place: Place,
}

/// Hot region + FIFO cooling region with random demotion.
#[derive(Debug)]
pub struct TwoStageCache {
    config: CacheConfig,
    map: HashMap<Bytes, Slot>,
    /// Dense list of hot keys for O(1) uniform victim selection.
    hot: Vec<Bytes>,
    /// Cooling FIFO. Entries removed out of order (promotion, invalidation)
    /// are left behind and skipped when they reach the head.
    cooling: VecDeque<(u64, Bytes)>,
    next_seq: u64,
    cooling_count: usize,
    cooling_bytes: u64,
    resident_bytes: u64,
    rng: ChaCha8Rng,
    hits: u64,
    misses: u64,
}

impl TwoStageCache {
    pub fn new(config: CacheConfig) -> TwoStageCache {
        assert!(
            config.cooling_fraction > 0.0 && config.cooling_fraction < 1.0,
            "cooling fraction must be in (0, 1)"
        );
        TwoStageCache {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            map: HashMap::new(),
            hot: Vec::new(),
            cooling: VecDeque::new(),
            next_seq: 0,
            cooling_count: 0,
            cooling_bytes: 0,
            resident_bytes: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Region currently holding `key`, without counting an access.
    pub fn region_of(&self, key: &[u8]) -> Option<Region> {
        self.map.get(key).map(|s| match s.place {
            Place::Hot(_) => Region::Hot,
            Place::Cooling(_) => Region::Cooling,
        })
    }

    /// Keys in the cooling FIFO from head (next to evict) to tail.
    pub fn cooling_keys(&self) -> Vec<Bytes> {
        self.cooling
            .iter()
            .filter(|(seq, k)| self.is_live_cooling(*seq, k))
            .map(|(_, k)| k.clone())
            .collect()
    }

    /// Hot keys in internal order; used to check that hot hits leave the
    /// structure untouched.
    pub fn hot_keys(&self) -> &[Bytes] {
        &self.hot
    }

    /// Moves a hot entry to the cooling tail.
    pub fn demote(&mut self, key: &[u8]) -> bool {
        match self.map.get(key).map(|s| s.place) {
            Some(Place::Hot(i)) => {
                self.demote_at(i);
                true
            }
            _ => false,
        }
    }

    fn is_live_cooling(&self, seq: u64, key: &[u8]) -> bool {
        matches!(self.map.get(key), Some(s) if s.place == Place::Cooling(seq))
    }

    fn cooling_budget(&self) -> u64 {
        (self.config.capacity_bytes as f64 * self.config.cooling_fraction) as u64
    }

    /// Unlinks the hot entry at dense index `i`, fixing the moved entry.
    fn unlink_hot(&mut self, i: usize) -> Bytes {
        let key = self.hot.swap_remove(i);
        if let Some(moved) = self.hot.get(i) {
            self.map.get_mut(moved).unwrap().place = Place::Hot(i);
        }
        key
    }

    fn push_hot(&mut self, key: &Bytes) {
        let i = self.hot.len();
        self.hot.push(key.clone());
        self.map.get_mut(key).unwrap().place = Place::Hot(i);
    }

    fn demote_at(&mut self, i: usize) {
        let key = self.unlink_hot(i);
        let seq = self.next_seq;
        self.next_seq += 1;
        let slot = self.map.get_mut(&key).unwrap();
        slot.place = Place::Cooling(seq);
        self.cooling_count += 1;
        self.cooling_bytes += slot.charge;
        self.cooling.push_back((seq, key));
    }

    /// Detaches an entry from whichever region holds it (the map entry stays).
    fn detach(&mut self, key: &[u8]) {
        let Some(slot) = self.map.get(key) else { return };
        match slot.place {
            Place::Hot(i) => {
                self.unlink_hot(i);
            }
            Place::Cooling(_) => {
                self.cooling_count -= 1;
                self.cooling_bytes -= slot.charge;
                self.compact_cooling_if_sparse();
            }
        }
    }

    fn compact_cooling_if_sparse(&mut self) {
        if self.cooling.len() > 2 * self.cooling_count + 64 {
            let map = &self.map;
            self.cooling
                .retain(|(seq, k)| matches!(map.get(k), Some(s) if s.place == Place::Cooling(*seq)));
        }
    }

    /// Evicts the oldest live cooling entry.
    fn evict_cooling_head(&mut self) -> Option<Bytes> {
        while let Some((seq, key)) = self.cooling.pop_front() {
            if self.is_live_cooling(seq, &key) {
                let slot = self.map.remove(&key).unwrap();
                self.cooling_count -= 1;
                self.cooling_bytes -= slot.charge;
                self.resident_bytes -= slot.charge;
                return Some(key);
            }
        }
        None
    }

    fn remove_entry(&mut self, key: &[u8]) -> bool {
        if !self.map.contains_key(key) {
            return false;
        }
        self.detach(key);
        let slot = self.map.remove(key).unwrap();
        self.resident_bytes -= slot.charge;
        true
    }

    fn enforce_capacity(&mut self, evicted: &mut Vec<Bytes>) {
        while self.resident_bytes > self.config.capacity_bytes {
            if !self.hot.is_empty() {
                let i = self.rng.gen_range(0..self.hot.len());
                self.demote_at(i);
            }
            while self.resident_bytes > self.config.capacity_bytes
                && (self.cooling_bytes > self.cooling_budget() || self.hot.is_empty())
            {
                match self.evict_cooling_head() {
                    Some(k) => evicted.push(k),
                    None => break,
                }
            }
        }
    }
}

impl ReadCache for TwoStageCache {
    fn get(&mut self, key: &[u8]) -> Option<(Bytes, Lsn)> {
        let Some(slot) = self.map.get(key) else {
            self.misses += 1;
            return None;
        };
        self.hits += 1;
        let out = (slot.value.clone(), slot.version);
        if let Place::Cooling(_) = slot.place {
            let charge = slot.charge;
            let (k, _) = self.map.get_key_value(key).unwrap();
            let k = k.clone();
            self.cooling_count -= 1;
            self.cooling_bytes -= charge;
            self.push_hot(&k);
            self.compact_cooling_if_sparse();
        }
        Some(out)
    }

    fn admit(&mut self, key: Bytes, value: Bytes, version: Lsn) -> Vec<Bytes> {
        let charge = entry_charge(key.len(), value.len());
        if charge > self.config.capacity_bytes {
            self.remove_entry(&key);
            return vec![key];
        }
        if let Some(slot) = self.map.get(&key) {
            if version < slot.version {
                return Vec::new();
            }
            let old_charge = slot.charge;
            self.detach(&key);
            let slot = self.map.get_mut(&key).unwrap();
            slot.value = value;
            slot.version = version;
            slot.charge = charge;
            self.resident_bytes = self.resident_bytes - old_charge + charge;
        } else {
            self.map.insert(
                key.clone(),
                Slot {
                    value,
                    version,
                    charge,
                    place: Place::Hot(usize::MAX),
                },
            );
            self.resident_bytes += charge;
        }
        self.push_hot(&key);
        let mut evicted = Vec::new();
        self.enforce_capacity(&mut evicted);
        evicted
    }

    fn invalidate(&mut self, key: &[u8]) -> bool {
        self.remove_entry(key)
    }

    fn contains(&self, key: &[u8]) -> bool {
        self.map.contains_key(key)
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            resident_bytes: self.resident_bytes,
            hot_count: self.hot.len(),
            cooling_count: self.cooling_count,
        }
    }

    fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }
}
