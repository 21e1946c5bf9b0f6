//! Benchmark scenarios. Each returns typed rows and can be written as CSV
//! with a fixed column set.
//!
//! Distributed scenarios run on the deterministic simulator, so their
//! numbers do not depend on the machine; `write-scaling` additionally
//! reports a wall-clock run of the threaded engine.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use logstore_core::cache::{entry_charge, CacheConfig, FifoCache, LruCache, ReadCache, TwoStageCache};
use logstore_core::engine::{BatchPath, Engine, EngineConfig, NoTransport, Partition, PartitionConfig};
use logstore_core::recovery::{snapshot_path, CommitSource};
use logstore_core::sim::{write_workload, Arrival, FollowerReadStats, FreshnessSample, LoadSpec, Sim, SimConfig};
use logstore_core::stats::IoStats;
use logstore_core::wal::{FlushPolicy, LogRecord};
use logstore_core::workload::{encode_key, Distribution, Workload, WorkloadSpec};
use logstore_core::Lsn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

use crate::config::{ConfigError, KvConfig};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] logstore_core::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    WriteScaling,
    CacheHitRatio,
    Freshness,
    Recovery,
    BatchGetCrossover,
}

impl FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Scenario> {
        Ok(match s {
            "write-scaling" => Scenario::WriteScaling,
            "cache-hitratio" => Scenario::CacheHitRatio,
            "freshness" => Scenario::Freshness,
            "recovery" => Scenario::Recovery,
            "batchget-crossover" => Scenario::BatchGetCrossover,
            other => return Err(BenchError::UnknownScenario(other.to_string())),
        })
    }
}

/// CSV-shaped result.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Table {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn list<T: FromStr>(kv: &KvConfig, key: &str, default: &[T]) -> Result<Vec<T>>
where
    T: Clone,
    T::Err: std::fmt::Display,
{
    match kv.raw(key) {
        None => Ok(default.to_vec()),
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim().parse::<T>().map_err(|e| {
                    BenchError::Config(ConfigError::Invalid {
                        key: key.to_string(),
                        value: s.to_string(),
                        reason: e.to_string(),
                    })
                })
            })
            .collect(),
    }
}

/// Runs a scenario with parameters from `kv`, using `work_dir` for data.
pub fn run(scenario: Scenario, kv: &KvConfig, work_dir: &Path) -> Result<Table> {
    std::fs::create_dir_all(work_dir)?;
    match scenario {
        Scenario::WriteScaling => {
            let p = WriteScalingParams::from_kv(kv)?;
            let rows = write_scaling(&p, work_dir)?;
            let mut t = Table::new(&["mode", "partitions", "clients", "seconds", "acked", "throughput_ops", "p50_ms", "p99_ms"]);
            for r in rows {
                t.push(vec![
                    r.mode.to_string(),
                    r.partitions.to_string(),
                    r.clients.to_string(),
                    format!("{:.3}", r.seconds),
                    r.acked.to_string(),
                    format!("{:.1}", r.throughput),
                    format!("{:.3}", r.p50_ms),
                    format!("{:.3}", r.p99_ms),
                ]);
            }
            Ok(t)
        }
        Scenario::CacheHitRatio => {
            let p = CacheSweepParams::from_kv(kv)?;
            let mut t = Table::new(&["distribution", "ratio", "policy", "hit_ratio"]);
            for r in cache_sweep(&p) {
                t.push(vec![r.distribution.to_string(), format!("{:.2}", r.ratio), r.policy.to_string(), format!("{:.4}", r.hit_ratio)]);
            }
            Ok(t)
        }
        Scenario::Freshness => {
            let p = FreshnessParams::from_kv(kv)?;
            let run = freshness(&p, work_dir)?;
            info!(
                mean = run.mean_score,
                reads = run.follower_reads.served,
                replay = run.follower_reads.replay_records,
                "freshness run finished"
            );
            let mut t = Table::new(&["t_ms", "partition", "follower", "leader_lsn", "follower_lsn", "score"]);
            for s in run.samples {
                t.push(vec![
                    (s.t_us / 1000).to_string(),
                    s.partition.to_string(),
                    s.follower.to_string(),
                    s.leader_lsn.to_string(),
                    s.follower_lsn.to_string(),
                    format!("{:.5}", s.score),
                ]);
            }
            Ok(t)
        }
        Scenario::Recovery => {
            let p = RecoveryParams::from_kv(kv)?;
            let run = recovery(&p, &work_dir.join("recovery"))?;
            let mut t = Table::new(&["mode", "records", "snapshot_lsn", "records_read", "seconds"]);
            for (mode, r) in [("snapshot", &run.with_snapshot), ("full-log", &run.without_snapshot)] {
                t.push(vec![
                    mode.to_string(),
                    p.records.to_string(),
                    r.snapshot_lsn.to_string(),
                    r.records_read.to_string(),
                    format!("{:.4}", r.seconds),
                ]);
            }
            Ok(t)
        }
        Scenario::BatchGetCrossover => {
            let p = CrossoverParams::from_kv(kv)?;
            let rows = batch_crossover(&p, &work_dir.join("crossover"))?;
            let mut t = Table::new(&["batch", "fraction", "chosen_path", "index_ms", "scan_ms", "index_reads", "scan_records", "identical"]);
            for r in rows {
                t.push(vec![
                    r.batch.to_string(),
                    format!("{:.4}", r.fraction),
                    format!("{:?}", r.chosen).to_lowercase(),
                    format!("{:.3}", r.index_ms),
                    format!("{:.3}", r.scan_ms),
                    r.index_reads.to_string(),
                    r.scan_records.to_string(),
                    r.identical.to_string(),
                ]);
            }
            Ok(t)
        }
    }
}

// ---------------------------------------------------------------------------
// write-scaling

#[derive(Clone, Debug)]
pub struct WriteScalingParams {
    pub partitions: Vec<u32>,
    pub clients: usize,
    /// Measured window of simulated time.
    pub sim_seconds: f64,
    pub seed: u64,
    pub value_size: usize,
    /// Wall-clock seconds of the threaded-engine run; 0 skips it.
    pub engine_seconds: f64,
}

impl Default for WriteScalingParams {
    fn default() -> Self {
        WriteScalingParams {
            partitions: vec![1, 2],
            clients: 32,
            sim_seconds: 2.0,
            seed: 11,
            value_size: 1024,
            engine_seconds: 1.0,
        }
    }
}

impl WriteScalingParams {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(WriteScalingParams {
            partitions: list(kv, "partitions", &d.partitions)?,
            clients: kv.get_or("clients", d.clients)?,
            sim_seconds: kv.get_or("sim_seconds", d.sim_seconds)?,
            seed: kv.get_or("seed", d.seed)?,
            value_size: kv.get_or("value_size", d.value_size)?,
            engine_seconds: kv.get_or("engine_seconds", d.engine_seconds)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ScalingRow {
    /// `sim` or `engine`.
    pub mode: &'static str,
    pub partitions: u32,
    pub clients: usize,
    pub seconds: f64,
    pub acked: u64,
    pub throughput: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Closed-loop write throughput per partition count at fixed concurrency.
pub fn write_scaling(p: &WriteScalingParams, dir: &Path) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &parts in &p.partitions {
        rows.push(sim_scaling(p, parts, &dir.join(format!("sim-p{parts}")))?);
    }
    if p.engine_seconds > 0.0 {
        for &parts in &p.partitions {
            rows.push(engine_scaling(p, parts, &dir.join(format!("engine-p{parts}")))?);
        }
    }
    Ok(rows)
}

fn sim_scaling(p: &WriteScalingParams, partitions: u32, dir: &Path) -> Result<ScalingRow> {
    let cfg = SimConfig {
        partitions,
        seed: p.seed,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(cfg, dir)?;
    sim.start_load(LoadSpec {
        arrival: Arrival::Closed { clients: p.clients },
        workload: write_workload(p.seed, u64::MAX, 1 << 40, p.value_size),
    });
    let warmup = 200_000;
    sim.run_until(warmup);
    let (acked0, lat0) = (sim.metrics().writes_acked, sim.metrics().latencies_us.len());
    let window = (p.sim_seconds * 1e6) as u64;
    sim.run_until(warmup + window);
    let m = sim.metrics();
    let acked = m.writes_acked - acked0;
    let mut lat = m.latencies_us[lat0..].to_vec();
    lat.sort_unstable();
    Ok(ScalingRow {
        mode: "sim",
        partitions,
        clients: p.clients,
        seconds: p.sim_seconds,
        acked,
        throughput: acked as f64 / p.sim_seconds,
        p50_ms: percentile(&lat, 0.5) as f64 / 1e3,
        p99_ms: percentile(&lat, 0.99) as f64 / 1e3,
    })
}

/// Single-node threaded engine, wall clock. Bound by this machine's cores
/// and sync latency, so it is reported but never asserted.
fn engine_scaling(p: &WriteScalingParams, partitions: u32, dir: &Path) -> Result<ScalingRow> {
    let mut cfg = EngineConfig::single_node(dir, partitions);
    cfg.pin_cores = true;
    let engine = Arc::new(Engine::start(cfg, Arc::new(NoTransport))?);
    let stop = Arc::new(AtomicBool::new(false));
    let counter = Arc::new(AtomicU64::new(0));
    let value = Bytes::from(vec![b'v'; p.value_size]);
    let started = Instant::now();
    let workers: Vec<_> = (0..p.clients)
        .map(|c| {
            let (engine, stop, counter, value) = (engine.clone(), stop.clone(), counter.clone(), value.clone());
            std::thread::spawn(move || {
                let mut lat = Vec::new();
                let mut i = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    let key = encode_key(((c as u64) << 32) | i);
                    i += 1;
                    let t = Instant::now();
                    if engine.put(key, value.clone()).is_ok() {
                        counter.fetch_add(1, Ordering::Relaxed);
                        lat.push(t.elapsed().as_micros() as u64);
                    }
                }
                lat
            })
        })
        .collect();
    std::thread::sleep(Duration::from_secs_f64(p.engine_seconds));
    stop.store(true, Ordering::Relaxed);
    let mut lat: Vec<u64> = workers.into_iter().flat_map(|w| w.join().unwrap_or_default()).collect();
    let seconds = started.elapsed().as_secs_f64();
    lat.sort_unstable();
    let acked = counter.load(Ordering::Relaxed);
    engine.shutdown();
    Ok(ScalingRow {
        mode: "engine",
        partitions,
        clients: p.clients,
        seconds,
        acked,
        throughput: acked as f64 / seconds,
        p50_ms: percentile(&lat, 0.5) as f64 / 1e3,
        p99_ms: percentile(&lat, 0.99) as f64 / 1e3,
    })
}

// ---------------------------------------------------------------------------
// cache-hitratio

#[derive(Clone, Debug)]
pub struct CacheSweepParams {
    pub keys: u64,
    pub value_size: usize,
    pub ratios: Vec<f64>,
    pub theta: f64,
    pub warmup_ops: u64,
    pub measure_ops: u64,
    pub seed: u64,
}

impl Default for CacheSweepParams {
    fn default() -> Self {
        CacheSweepParams {
            keys: 100_000,
            value_size: 1024,
            ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            theta: 0.99,
            warmup_ops: 300_000,
            measure_ops: 300_000,
            seed: 7,
        }
    }
}

impl CacheSweepParams {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(CacheSweepParams {
            keys: kv.get_or("keys", d.keys)?,
            value_size: kv.get_or("value_size", d.value_size)?,
            ratios: list(kv, "ratios", &d.ratios)?,
            theta: kv.get_or("theta", d.theta)?,
            warmup_ops: kv.get_or("warmup_ops", d.warmup_ops)?,
            measure_ops: kv.get_or("measure_ops", d.measure_ops)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRow {
    pub distribution: &'static str,
    pub ratio: f64,
    pub policy: &'static str,
    pub hit_ratio: f64,
}

/// Read-through hit ratio for one policy: a miss admits the key.
fn hit_ratio(cache: &mut dyn ReadCache, spec: &WorkloadSpec, value: &Bytes, warmup: u64) -> f64 {
    let mut w = Workload::new(spec.clone());
    for i in 0..spec.op_count {
        if i == warmup {
            cache.reset_counters();
        }
        let key = w.next_key();
        if cache.get(&key).is_none() {
            cache.admit(key, value.clone(), Lsn(1));
        }
    }
    cache.stats().hit_ratio()
}

/// Hit ratio of every policy across cache/data ratios, for uniform and
/// Zipfian access. All policies see the same key stream.
pub fn cache_sweep(p: &CacheSweepParams) -> Vec<CacheRow> {
    let value = Bytes::from(vec![0u8; p.value_size]);
    let data_bytes = p.keys * entry_charge(encode_key(0).len(), p.value_size);
    let mut rows = Vec::new();
    for (dist_name, distribution) in [("uniform", Distribution::Uniform), ("zipfian", Distribution::Zipfian { theta: p.theta })] {
        let spec = WorkloadSpec {
            distribution,
            key_space: p.keys,
            value_size: p.value_size,
            op_count: p.warmup_ops + p.measure_ops,
            seed: p.seed,
            ..WorkloadSpec::default()
        };
        for &ratio in &p.ratios {
            let cap = (data_bytes as f64 * ratio) as u64;
            let mut two = TwoStageCache::new(CacheConfig {
                seed: p.seed,
                ..CacheConfig::with_capacity(cap)
            });
            let policies: [(&'static str, &mut dyn ReadCache); 3] = [
                ("two-stage", &mut two),
                ("lru", &mut LruCache::new(cap)),
                ("fifo", &mut FifoCache::new(cap)),
            ];
            for (policy, cache) in policies {
                rows.push(CacheRow {
                    distribution: dist_name,
                    ratio,
                    policy,
                    hit_ratio: hit_ratio(cache, &spec, &value, p.warmup_ops),
                });
            }
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// freshness

#[derive(Clone, Debug)]
pub struct FreshnessParams {
    pub writes_per_sec: u64,
    pub seconds: f64,
    pub sample_ms: u64,
    pub follower_reads_per_sec: u64,
    pub seed: u64,
    pub value_size: usize,
}

impl Default for FreshnessParams {
    fn default() -> Self {
        FreshnessParams {
            writes_per_sec: 1_000,
            seconds: 30.0,
            sample_ms: 20,
            follower_reads_per_sec: 200,
            seed: 3,
            value_size: 1024,
        }
    }
}

impl FreshnessParams {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(FreshnessParams {
            writes_per_sec: kv.get_or("writes_per_sec", d.writes_per_sec)?,
            seconds: kv.get_or("seconds", d.seconds)?,
            sample_ms: kv.get_or("sample_ms", d.sample_ms)?,
            follower_reads_per_sec: kv.get_or("follower_reads_per_sec", d.follower_reads_per_sec)?,
            seed: kv.get_or("seed", d.seed)?,
            value_size: kv.get_or("value_size", d.value_size)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FreshnessRun {
    pub samples: Vec<FreshnessSample>,
    pub mean_score: f64,
    pub follower_reads: FollowerReadStats,
    pub writes_acked: u64,
}

/// Steady open-loop writes on a 3-node cluster, sampling every follower's
/// LSN against the leader's, with follower reads at the leader's commit
/// point running alongside.
pub fn freshness(p: &FreshnessParams, dir: &Path) -> Result<FreshnessRun> {
    let cfg = SimConfig {
        seed: p.seed,
        sample_every_us: p.sample_ms * 1000,
        follower_reads_per_sec: p.follower_reads_per_sec,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(cfg, &dir.join("freshness"))?;
    let window = (p.seconds * 1e6) as u64;
    sim.start_load(LoadSpec {
        arrival: Arrival::Open {
            ops_per_sec: p.writes_per_sec,
        },
        workload: write_workload(p.seed, (p.writes_per_sec as f64 * p.seconds) as u64, 1 << 40, p.value_size),
    });
    sim.run_until(window);
    sim.stop_follower_reads();
    sim.stop_load();
    if !sim.run_until_quiet(10_000_000) {
        return Err(BenchError::Failed("cluster did not settle after the freshness run".into()));
    }
    // Let parked reads finish.
    sim.run_for(1_000_000);
    let m = sim.metrics();
    let samples: Vec<FreshnessSample> = m.freshness.iter().filter(|s| s.t_us <= window).cloned().collect();
    let mean_score = if samples.is_empty() {
        1.0
    } else {
        samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64
    };
    Ok(FreshnessRun {
        samples,
        mean_score,
        follower_reads: m.follower_reads.clone(),
        writes_acked: m.writes_acked,
    })
}

// ---------------------------------------------------------------------------
// recovery

#[derive(Clone, Debug)]
pub struct RecoveryParams {
    pub records: u64,
    pub snapshot_at: u64,
    pub key_space: u64,
    pub value_size: usize,
    pub seed: u64,
    /// Recoveries per mode; the fastest is reported.
    pub repeats: usize,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams {
            records: 1_000_000,
            snapshot_at: 900_000,
            key_space: 10_000,
            value_size: 64,
            seed: 5,
            repeats: 2,
        }
    }
}

impl RecoveryParams {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(RecoveryParams {
            records: kv.get_or("records", d.records)?,
            snapshot_at: kv.get_or("snapshot_at", d.snapshot_at)?,
            key_space: kv.get_or("key_space", d.key_space)?,
            value_size: kv.get_or("value_size", d.value_size)?,
            seed: kv.get_or("seed", d.seed)?,
            repeats: kv.get_or("repeats", d.repeats)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RecoveryMeasurement {
    pub snapshot_lsn: Lsn,
    pub records_read: u64,
    pub flushed: Lsn,
    pub live_keys: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RecoveryRun {
    pub dir: PathBuf,
    pub with_snapshot: RecoveryMeasurement,
    pub without_snapshot: RecoveryMeasurement,
}

/// Partition settings for offline loads: no background checkpoints or
/// compaction, page-cache durability, a tiny cache.
pub fn offline_partition_config() -> PartitionConfig {
    let mut cfg = PartitionConfig::default();
    cfg.log.flush = FlushPolicy::OsBuffered;
    cfg.checkpoint_every = 0;
    cfg.compact_after_sealed = 0;
    cfg.cache = CacheConfig::with_capacity(1 << 20);
    cfg
}

fn reopen(dir: &Path, repeats: usize) -> Result<RecoveryMeasurement> {
    let mut best: Option<RecoveryMeasurement> = None;
    for _ in 0..repeats.max(1) {
        let (p, report) = Partition::open(dir, 0, offline_partition_config(), IoStats::new(), CommitSource::Leader)?;
        let m = RecoveryMeasurement {
            snapshot_lsn: report.snapshot.as_ref().map(|s| s.last_included_lsn).unwrap_or(Lsn::NONE),
            records_read: report.records_read,
            flushed: report.flushed,
            live_keys: p.live_keys(),
            seconds: report.elapsed.as_secs_f64(),
        };
        if best.as_ref().map_or(true, |b| m.seconds < b.seconds) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one recovery"))
}

/// Writes `records` records, checkpointing after `snapshot_at`, then times
/// recovery from the snapshot and from the full log.
pub fn recovery(p: &RecoveryParams, dir: &Path) -> Result<RecoveryRun> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    {
        let (mut part, _) = Partition::open(dir, 0, offline_partition_config(), IoStats::new(), CommitSource::Leader)?;
        let mut w = Workload::new(WorkloadSpec {
            key_space: p.key_space,
            value_size: p.value_size,
            op_count: p.records,
            seed: p.seed,
            op_mix: logstore_core::workload::OpMix::WRITE_ONLY,
            ..WorkloadSpec::default()
        });
        for lsn in 1..=p.records {
            let key = w.next_key();
            let value = w.next_value();
            part.apply(LogRecord::put(0, Lsn(lsn), key, value))?;
            if lsn % 1024 == 0 || lsn == p.snapshot_at || lsn == p.records {
                part.commit_local()?;
            }
            if lsn == p.snapshot_at {
                part.checkpoint()?;
            }
        }
    }
    let with_snapshot = reopen(dir, p.repeats)?;
    std::fs::remove_file(snapshot_path(dir))?;
    let without_snapshot = reopen(dir, p.repeats)?;
    Ok(RecoveryRun {
        dir: dir.to_path_buf(),
        with_snapshot,
        without_snapshot,
    })
}

// ---------------------------------------------------------------------------
// batchget-crossover

#[derive(Clone, Debug)]
pub struct CrossoverParams {
    pub live_keys: u64,
    pub value_size: usize,
    pub batches: Vec<usize>,
    pub seed: u64,
}

impl Default for CrossoverParams {
    fn default() -> Self {
        CrossoverParams {
            live_keys: 100_000,
            value_size: 100,
            batches: vec![100, 1_000, 5_000, 10_000, 20_000, 50_000],
            seed: 9,
        }
    }
}

impl CrossoverParams {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(CrossoverParams {
            live_keys: kv.get_or("live_keys", d.live_keys)?,
            value_size: kv.get_or("value_size", d.value_size)?,
            batches: list(kv, "batches", &d.batches)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CrossoverRow {
    pub batch: usize,
    pub fraction: f64,
    /// Path picked by the default threshold.
    pub chosen: BatchPath,
    pub index_ms: f64,
    pub scan_ms: f64,
    pub index_reads: u64,
    pub scan_records: u64,
    /// Both forced paths returned the same answer.
    pub identical: bool,
}

type BatchAnswer = Vec<(Bytes, Option<Bytes>)>;

/// Loads `live_keys` keys, then answers batches of each size through both
/// paths. Every tenth requested key is absent.
pub fn batch_crossover(p: &CrossoverParams, dir: &Path) -> Result<Vec<CrossoverRow>> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let mut cfg = offline_partition_config();
    // Point lookups must hit the log, not a warm cache.
    cfg.cache = CacheConfig::with_capacity(0);
    let stats = IoStats::new();
    let (mut part, _) = Partition::open(dir, 0, cfg.clone(), stats.clone(), CommitSource::Leader)?;
    let value = Bytes::from(vec![b'x'; p.value_size]);
    for i in 0..p.live_keys {
        part.apply(LogRecord::put(0, Lsn(i + 1), encode_key(i * 2), value.clone()))?;
        if i % 1024 == 0 {
            part.commit_local()?;
        }
    }
    part.commit_local()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut rows = Vec::new();
    for &batch in &p.batches {
        let mut ids: Vec<u64> = (0..p.live_keys).collect();
        ids.shuffle(&mut rng);
        let keys: Vec<Bytes> = ids
            .into_iter()
            .take(batch)
            .enumerate()
            .map(|(n, i)| encode_key(if n % 10 == 9 { i * 2 + 1 } else { i * 2 }))
            .collect();

        part.set_batch_scan_fraction(cfg.batch_scan_fraction);
        let (_, chosen) = part.exec_batch_get(&keys)?;

        let timed = |part: &mut Partition, fraction: f64| -> Result<(BatchAnswer, f64, u64, u64)> {
            part.set_batch_scan_fraction(fraction);
            let (reads0, scans0) = (stats.record_reads(), stats.scan_records());
            let t = Instant::now();
            let (items, _) = part.exec_batch_get(&keys)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            Ok((items, ms, stats.record_reads() - reads0, stats.scan_records() - scans0))
        };
        let (by_index, index_ms, index_reads, _) = timed(&mut part, f64::INFINITY)?;
        let (by_scan, scan_ms, _, scan_records) = timed(&mut part, 0.0)?;
        let sorted = |mut v: BatchAnswer| {
            v.sort();
            v
        };
        rows.push(CrossoverRow {
            batch,
            fraction: batch as f64 / p.live_keys as f64,
            chosen,
            index_ms,
            scan_ms,
            index_reads,
            scan_records,
            identical: sorted(by_index) == sorted(by_scan),
        });
    }
    part.set_batch_scan_fraction(cfg.batch_scan_fraction);
    Ok(rows)
}
