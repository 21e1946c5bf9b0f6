//! Deterministic discrete-event simulation of a replicated cluster.
//!
//! Every node hosts real [`Partition`]s on disk and runs the real replication
//! state machines; only time, the network and CPU cost are simulated. Time
//! is a virtual microsecond clock, the network is a seeded model with delay,
//! stalls, loss and duplication (FIFO per link), and each partition replica
//! has one executor whose service time follows [`ServiceModel`]. Because
//! nothing depends on wall-clock time or thread scheduling, a seed fully
//! determines a run.
//!
//! Durability is virtual: a record counts as durable on a node once that
//! node's executor has finished the group flush covering it.

mod net;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp};
use tracing::{debug, info};

use crate::cache::CacheConfig;
use crate::engine::{partition_dir, route, Partition, PartitionConfig};
use crate::error::{Error, Result};
use crate::recovery::CommitSource;
use crate::replication::{
    check_promotion, freshness_score, read_gate, EpochMeta, FollowerReplica, QuorumTracker, ReadDecision,
    ReplMessage, ReplyQueue, SendWindow,
};
use crate::stats::{IoStats, SharedStats};
use crate::types::{quorum, Lsn, NodeId, PartitionId};
use crate::wal::{FlushPolicy, LogConfig, LogRecord};
use crate::workload::{Workload, WorkloadOp, WorkloadSpec};

pub use net::NetConfig;

/// Virtual CPU cost of executor work, in microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceModel {
    pub per_record_us: u64,
    /// One group flush per executed batch.
    pub flush_us: u64,
    pub per_read_us: u64,
    /// Fixed cost of handling one replication message.
    pub per_message_us: u64,
    /// Latency of the send stage picking up new records.
    pub send_us: u64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel {
            per_record_us: 8,
            flush_us: 100,
            per_read_us: 5,
            per_message_us: 5,
            send_us: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Node ids are `1..=nodes`; node 1 starts as leader of every partition.
    pub nodes: u32,
    pub partitions: u32,
    pub seed: u64,
    pub net: NetConfig,
    pub service: ServiceModel,
    /// One-way client to server latency, plus uniform jitter.
    pub client_delay_us: u64,
    pub client_jitter_us: u64,
    pub max_batch: usize,
    pub heartbeat_us: u64,
    pub resend_after_us: u64,
    pub block_timeout_us: u64,
    pub sample_every_us: u64,
    /// Follower reads issued per virtual second (0 disables them).
    pub follower_reads_per_sec: u64,
    pub partition: PartitionConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 3,
            partitions: 1,
            seed: 1,
            net: NetConfig::default(),
            service: ServiceModel::default(),
            client_delay_us: 100,
            client_jitter_us: 50,
            max_batch: 256,
            heartbeat_us: 50_000,
            resend_after_us: 20_000,
            block_timeout_us: 1_000_000,
            sample_every_us: 20_000,
            follower_reads_per_sec: 0,
            partition: PartitionConfig {
                log: LogConfig {
                    flush: FlushPolicy::OsBuffered,
                    ..LogConfig::default()
                },
                cache: CacheConfig::with_capacity(4 << 20),
                checkpoint_every: 0,
                compact_after_sealed: 0,
                ..PartitionConfig::default()
            },
        }
    }
}

/// How client load arrives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Arrival {
    /// `clients` concurrent clients, each waiting for its reply.
    Closed { clients: usize },
    /// A fixed request rate regardless of replies.
    Open { ops_per_sec: u64 },
}

#[derive(Clone, Debug)]
pub struct LoadSpec {
    pub arrival: Arrival,
    pub workload: WorkloadSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreshnessSample {
    pub t_us: u64,
    pub partition: PartitionId,
    pub follower: NodeId,
    pub leader_lsn: Lsn,
    pub follower_lsn: Lsn,
    pub score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FollowerReadStats {
    pub issued: u64,
    pub served: u64,
    pub served_immediately: u64,
    pub served_after_advance: u64,
    pub served_after_block: u64,
    pub rejections: u64,
    /// Log records re-read (replayed or scanned) while serving follower reads.
    pub replay_records: u64,
    /// Reads that missed a value acknowledged at or before their read view.
    pub missing_values: u64,
    pub max_wait_us: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SimMetrics {
    pub writes_dispatched: u64,
    pub writes_acked: u64,
    pub reads_served: u64,
    pub failed_requests: u64,
    /// Replies emitted while fewer than a quorum of nodes held the record.
    pub quorum_violations: u64,
    /// Smallest number of nodes holding a record at its reply.
    pub min_holders_at_reply: Option<usize>,
    pub latencies_us: Vec<u64>,
    pub freshness: Vec<FreshnessSample>,
    pub follower_reads: FollowerReadStats,
    /// Most AppendEntries batches outstanding to one peer at once.
    pub max_batches_in_flight: usize,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub messages_duplicated: u64,
}

impl SimMetrics {
    pub fn mean_freshness(&self) -> f64 {
        if self.freshness.is_empty() {
            return 1.0;
        }
        self.freshness.iter().map(|s| s.score).sum::<f64>() / self.freshness.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct PromotionReport {
    pub node: NodeId,
    pub partition: PartitionId,
    pub epoch: u64,
    pub flushed: Lsn,
    /// Wall-clock time of the role change.
    pub elapsed: Duration,
    /// Log records read during the take-over.
    pub records_read: u64,
}

/// Outcome of checking acknowledged writes against one replica.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AckedCheck {
    pub checked: usize,
    pub readable: usize,
    pub missing: Vec<Bytes>,
}

#[derive(Clone, Debug)]
struct PendingReply {
    client: Option<usize>,
    issued: u64,
    key: Bytes,
    value: Option<Bytes>,
}

#[derive(Clone, Debug)]
struct FollowerRead {
    key: Bytes,
    view: Lsn,
    first_issued: u64,
}

#[derive(Debug)]
enum Job {
    /// Marker: drain dispatched writes into a batch when this job starts.
    Writes,
    WriteBatch(Vec<(LogRecord, PendingReply)>),
    Replica(NodeId, ReplMessage),
    LeaderRead { client: Option<usize>, key: Bytes, issued: u64 },
    FollowerRead(FollowerRead),
}

struct LeaderState {
    meta: EpochMeta,
    tracker: QuorumTracker,
    window: SendWindow,
    replies: ReplyQueue<PendingReply>,
    next_lsn: Lsn,
    pending: VecDeque<(LogRecord, PendingReply)>,
    writes_queued: bool,
    synced: BTreeMap<NodeId, bool>,
    batches_in_flight: BTreeMap<NodeId, VecDeque<Lsn>>,
}

enum RoleState {
    Leader(Box<LeaderState>),
    Follower(FollowerReplica),
}

struct Replica {
    p: Partition,
    role: RoleState,
    jobs: VecDeque<Job>,
    running: Option<Job>,
    parked: Vec<(FollowerRead, u64)>,
    send_scheduled: bool,
}

struct Node {
    id: NodeId,
    alive: bool,
    stats: SharedStats,
    dir: PathBuf,
    replicas: Vec<Replica>,
}

#[derive(Debug)]
enum Ev {
    ClientNext { client: usize },
    OpenTick,
    Arrive { client: Option<usize>, op: WorkloadOp, issued: u64 },
    ExecDone { node: NodeId, part: PartitionId },
    SendTick { node: NodeId, part: PartitionId },
    Deliver { from: NodeId, to: NodeId, frame: Vec<u8> },
    Heartbeat { node: NodeId, part: PartitionId },
    Sample,
    FollowerReadTick,
    FollowerReadArrive { node: NodeId, part: PartitionId, read: FollowerRead },
    ClientReply { client: Option<usize>, issued: u64, ok: bool },
}

struct Scheduled {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Min-heap on (time, sequence).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

pub struct Sim {
    config: SimConfig,
    now: u64,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    net: net::Network,
    nodes: Vec<Node>,
    leader_of: Vec<NodeId>,
    load: Option<(Arrival, Workload)>,
    metrics: SimMetrics,
    /// Newest acknowledged write per key: (partition, lsn, value or tombstone).
    acked: BTreeMap<Bytes, (PartitionId, Lsn, Option<Bytes>)>,
    acked_keys: Vec<Bytes>,
    /// Every dispatched write, for checking values newer than the last ack.
    dispatched: BTreeMap<(PartitionId, Lsn), (Bytes, Option<Bytes>)>,
}

const WINDOW_RETAINED: usize = 1 << 16;

impl Sim {
    /// Creates the cluster with data under `dir` (one subdirectory per node).
    pub fn new(config: SimConfig, dir: &Path) -> Result<Sim> {
        if config.nodes == 0 || config.partitions == 0 {
            return Err(Error::Config("simulation needs at least one node and partition".into()));
        }
        let mut nodes = Vec::new();
        for id in 1..=config.nodes {
            let node_dir = dir.join(format!("n{id}"));
            let stats = IoStats::new();
            let mut replicas = Vec::new();
            for part in 0..config.partitions {
                let pdir = partition_dir(&node_dir, part);
                std::fs::create_dir_all(&pdir)?;
                let (p, _) = Partition::open(&pdir, part, config.partition.clone(), stats.clone(), CommitSource::Leader)?;
                let meta = EpochMeta::load(&pdir)?;
                let role = RoleState::Follower(FollowerReplica::new(id, part, meta));
                replicas.push(Replica {
                    p,
                    role,
                    jobs: VecDeque::new(),
                    running: None,
                    parked: Vec::new(),
                    send_scheduled: false,
                });
            }
            nodes.push(Node {
                id,
                alive: true,
                stats,
                dir: node_dir,
                replicas,
            });
        }
        let mut sim = Sim {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net: net::Network::new(config.net.clone()),
            leader_of: vec![1; config.partitions as usize],
            config,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            nodes,
            load: None,
            metrics: SimMetrics::default(),
            acked: BTreeMap::new(),
            acked_keys: Vec::new(),
            dispatched: BTreeMap::new(),
        };
        for part in 0..sim.config.partitions {
            let meta = match &sim.replica(1, part).role {
                RoleState::Follower(f) => f.meta(),
                RoleState::Leader(_) => unreachable!(),
            };
            sim.become_leader(1, part, meta);
        }
        sim.schedule(sim.config.sample_every_us, Ev::Sample);
        if sim.config.follower_reads_per_sec > 0 {
            let gap = 1_000_000 / sim.config.follower_reads_per_sec;
            sim.schedule(gap, Ev::FollowerReadTick);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Current virtual time in microseconds.
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut SimMetrics {
        &mut self.metrics
    }

    pub fn leader_of(&self, part: PartitionId) -> NodeId {
        self.leader_of[part as usize]
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.node(node).alive
    }

    pub fn node_stats(&self, node: NodeId) -> &SharedStats {
        &self.node(node).stats
    }

    pub fn partition(&self, node: NodeId, part: PartitionId) -> &Partition {
        &self.replica(node, part).p
    }

    pub fn partition_mut(&mut self, node: NodeId, part: PartitionId) -> &mut Partition {
        &mut self.replica_mut(node, part).p
    }

    /// Number of writes acknowledged to clients, counting each key once.
    pub fn acked_keys(&self) -> usize {
        self.acked.len()
    }

    pub fn network_totals(&self) -> (u64, u64, u64) {
        (self.net.sent, self.net.dropped, self.net.duplicated)
    }

    /// Starts client load; replaces any previous load.
    pub fn start_load(&mut self, spec: LoadSpec) {
        let arrival = spec.arrival;
        self.load = Some((arrival, Workload::new(spec.workload)));
        match arrival {
            Arrival::Closed { clients } => {
                for c in 0..clients {
                    self.schedule(0, Ev::ClientNext { client: c });
                }
            }
            Arrival::Open { .. } => self.schedule(0, Ev::OpenTick),
        }
    }

    /// Stops issuing follower reads; reads already issued still complete.
    pub fn stop_follower_reads(&mut self) {
        self.config.follower_reads_per_sec = 0;
    }

    /// Stops issuing new requests; in-flight requests still complete.
    pub fn stop_load(&mut self) {
        self.load = None;
    }

    /// Processes events up to and including virtual time `t_us`.
    pub fn run_until(&mut self, t_us: u64) {
        while let Some(top) = self.events.peek() {
            if top.at > t_us {
                break;
            }
            let Scheduled { at, ev, .. } = self.events.pop().unwrap();
            self.now = at;
            self.handle(ev);
        }
        self.now = self.now.max(t_us);
    }

    pub fn run_for(&mut self, us: u64) {
        self.run_until(self.now + us);
    }

    /// Runs until every live replica holds the leader's log and every
    /// pending reply went out, or until `max_us` more time has passed.
    /// Returns whether the cluster became quiet.
    pub fn run_until_quiet(&mut self, max_us: u64) -> bool {
        let deadline = self.now + max_us;
        while self.now < deadline {
            self.run_for(10_000);
            if self.is_quiet() {
                return true;
            }
        }
        self.is_quiet()
    }

    fn is_quiet(&self) -> bool {
        (0..self.config.partitions).all(|part| {
            let leader = self.leader_of(part);
            if !self.is_alive(leader) {
                return true;
            }
            let lr = self.replica(leader, part);
            let (flushed, commit) = (lr.p.lsn_state().flushed(), lr.p.lsn_state().potential_commit());
            let leader_idle = match &lr.role {
                RoleState::Leader(l) => l.replies.is_empty() && l.pending.is_empty() && flushed.next() == l.next_lsn,
                RoleState::Follower(_) => true,
            };
            leader_idle
                && self.nodes.iter().filter(|n| n.alive).all(|n| {
                    let s = n.replicas[part as usize].p.lsn_state();
                    s.flushed() == flushed && s.potential_commit() == commit
                })
        })
    }

    /// Crash-stops a node: it stops processing and its messages are lost.
    /// Its files stay on disk.
    pub fn kill(&mut self, node: NodeId) {
        info!(node, t_us = self.now, "node killed");
        let n = self.node_mut(node);
        n.alive = false;
        for r in &mut n.replicas {
            r.jobs.clear();
            r.running = None;
            r.parked.clear();
        }
    }

    /// Restarts a killed node from its files, as a follower everywhere.
    pub fn restart(&mut self, node: NodeId) -> Result<()> {
        let cfg = self.config.partition.clone();
        let idx = (node - 1) as usize;
        let (dir, stats) = (self.nodes[idx].dir.clone(), self.nodes[idx].stats.clone());
        let mut replicas = Vec::new();
        // Drop the old handles first so nothing holds the files open.
        self.nodes[idx].replicas.clear();
        for part in 0..self.config.partitions {
            let pdir = partition_dir(&dir, part);
            let (p, _) = Partition::open(&pdir, part, cfg.clone(), stats.clone(), CommitSource::Leader)?;
            let meta = EpochMeta::load(&pdir)?;
            replicas.push(Replica {
                p,
                role: RoleState::Follower(FollowerReplica::new(node, part, meta)),
                jobs: VecDeque::new(),
                running: None,
                parked: Vec::new(),
                send_scheduled: false,
            });
        }
        let n = &mut self.nodes[idx];
        n.replicas = replicas;
        n.alive = true;
        self.net.reset_node(node);
        info!(node, t_us = self.now, "node restarted");
        Ok(())
    }

    /// Makes `node` the leader of `part`. Refused if the node is not a live
    /// follower or a reachable peer holds a longer log.
    pub fn promote(&mut self, node: NodeId, part: PartitionId) -> Result<PromotionReport> {
        if !self.is_alive(node) {
            return Err(Error::Config(format!("node {node} is down")));
        }
        let meta = match &self.replica(node, part).role {
            RoleState::Follower(f) => f.meta(),
            RoleState::Leader(_) => return Err(Error::Config(format!("node {node} already leads {part}"))),
        };
        let local = self.replica(node, part).p.lsn_state().flushed();
        let reachable: Vec<(NodeId, Lsn)> = self
            .nodes
            .iter()
            .filter(|n| n.alive && n.id != node)
            .map(|n| (n.id, n.replicas[part as usize].p.lsn_state().flushed()))
            .collect();
        check_promotion(local, &reachable)?;

        let stats = self.node(node).stats.clone();
        let reads_before = stats.recovery_records_read() + stats.scan_records() + stats.record_reads();
        let started = Instant::now();
        let new_meta = EpochMeta {
            epoch: meta.epoch + 1,
            epoch_start: local,
        };
        new_meta.store(self.replica(node, part).p.dir())?;
        self.become_leader(node, part, new_meta);
        let elapsed = started.elapsed();
        let records_read = stats.recovery_records_read() + stats.scan_records() + stats.record_reads() - reads_before;

        let old = self.leader_of[part as usize];
        self.leader_of[part as usize] = node;
        info!(node, part, old, epoch = new_meta.epoch, %local, "promoted");
        Ok(PromotionReport {
            node,
            partition: part,
            epoch: new_meta.epoch,
            flushed: local,
            elapsed,
            records_read,
        })
    }

    /// Checks every acknowledged write of the partitions led or followed by
    /// `node` against that node's store: each key must hold the acknowledged
    /// value or one written after it.
    pub fn check_acked(&mut self, node: NodeId) -> Result<AckedCheck> {
        let mut out = AckedCheck::default();
        let acked: Vec<_> = self.acked.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (key, (part, lsn, value)) in acked {
            out.checked += 1;
            let p = &mut self.replica_mut(node, part).p;
            let got = p.exec_get(&key)?;
            let version = p.index().get(&key).map(|e| e.version_lsn);
            let ok = match (&got, version) {
                (None, _) => value.is_none() || self.deleted_after(part, &key, lsn),
                (Some(v), Some(ver)) if ver == lsn => Some(v) == value.as_ref(),
                (Some(v), Some(ver)) if ver > lsn => {
                    matches!(self.dispatched.get(&(part, ver)), Some((k, Some(dv))) if *k == key && dv == v)
                }
                _ => false,
            };
            if ok {
                out.readable += 1;
            } else {
                out.missing.push(key);
            }
        }
        Ok(out)
    }

    fn deleted_after(&self, part: PartitionId, key: &Bytes, lsn: Lsn) -> bool {
        self.dispatched
            .range((part, lsn.next())..=(part, Lsn(u64::MAX)))
            .any(|(_, (k, v))| k == key && v.is_none())
    }

    /// Compares the records `1..=min flushed` of `part` across live nodes.
    /// Returns the compared prefix length.
    pub fn check_log_identity(&self, part: PartitionId) -> std::result::Result<Lsn, String> {
        let live: Vec<&Node> = self.nodes.iter().filter(|n| n.alive).collect();
        let upto = live
            .iter()
            .map(|n| n.replicas[part as usize].p.lsn_state().flushed())
            .min()
            .unwrap_or(Lsn::NONE);
        let mut reference: Option<(NodeId, Vec<Vec<u8>>)> = None;
        for n in live {
            let log = n.replicas[part as usize].p.log();
            let mut encoded = Vec::new();
            for item in log.iter_from_lsn(Lsn(1)) {
                let (rec, _) = item.map_err(|e| format!("node {}: {e}", n.id))?;
                if rec.lsn > upto {
                    break;
                }
                encoded.push(rec.encode());
            }
            if encoded.len() as u64 != upto.0 {
                return Err(format!("node {} has {} records below {upto}", n.id, encoded.len()));
            }
            match &reference {
                None => reference = Some((n.id, encoded)),
                Some((rid, r)) => {
                    if let Some(i) = (0..r.len()).find(|&i| r[i] != encoded[i]) {
                        return Err(format!("nodes {rid} and {} differ at lsn {}", n.id, i + 1));
                    }
                }
            }
        }
        Ok(upto)
    }

    // ----- internals -----

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[(id - 1) as usize]
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[(id - 1) as usize]
    }

    fn replica(&self, node: NodeId, part: PartitionId) -> &Replica {
        &self.node(node).replicas[part as usize]
    }

    fn replica_mut(&mut self, node: NodeId, part: PartitionId) -> &mut Replica {
        &mut self.node_mut(node).replicas[part as usize]
    }

    fn schedule(&mut self, delay: u64, ev: Ev) {
        self.seq += 1;
        self.events.push(Scheduled {
            at: self.now + delay,
            seq: self.seq,
            ev,
        });
    }

    fn peers_of(&self, node: NodeId) -> Vec<NodeId> {
        (1..=self.config.nodes).filter(|&n| n != node).collect()
    }

    fn become_leader(&mut self, node: NodeId, part: PartitionId, meta: EpochMeta) {
        let peers = self.peers_of(node);
        let (max_batch, resend) = (self.config.max_batch, self.config.resend_after_us);
        let now = self.now;
        let r = self.replica_mut(node, part);
        let flushed = r.p.flush().expect("flush on promotion");
        let mut tracker = QuorumTracker::new(node, &peers);
        tracker.set_dispatched(flushed);
        tracker.on_ack(node, flushed);
        let mut window = SendWindow::new(&peers, flushed, max_batch, WINDOW_RETAINED, resend);
        for &p in &peers {
            window.on_connect(p, now);
        }
        // In the initial epoch every replica starts from the same empty state;
        // later epochs first bring each peer in with a truncate.
        let synced = peers.iter().map(|&p| (p, meta.epoch == 1 && meta.epoch_start.is_none())).collect();
        r.role = RoleState::Leader(Box::new(LeaderState {
            meta,
            tracker,
            window,
            replies: ReplyQueue::new(),
            next_lsn: flushed.next(),
            pending: VecDeque::new(),
            writes_queued: false,
            synced,
            batches_in_flight: peers.iter().map(|&p| (p, VecDeque::new())).collect(),
        }));
        for peer in peers {
            self.sync_peer(node, part, peer);
        }
        self.schedule(self.config.heartbeat_us, Ev::Heartbeat { node, part });
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::ClientNext { client } => self.client_next(Some(client)),
            Ev::OpenTick => {
                if let Some((Arrival::Open { ops_per_sec }, _)) = &self.load {
                    // Poisson arrivals: evenly spaced requests would line up
                    // with the sampler and hide replication lag.
                    let mean = 1e6 / (*ops_per_sec).max(1) as f64;
                    let gap = (Exp::new(1.0 / mean).expect("positive rate").sample(&mut self.rng) as u64).max(1);
                    self.client_next(None);
                    if self.load.is_some() {
                        self.schedule(gap, Ev::OpenTick);
                    }
                }
            }
            Ev::Arrive { client, op, issued } => self.arrive(client, op, issued),
            Ev::ExecDone { node, part } => self.exec_done(node, part),
            Ev::SendTick { node, part } => self.send_tick(node, part),
            Ev::Deliver { from, to, frame } => self.deliver(from, to, frame),
            Ev::Heartbeat { node, part } => self.heartbeat(node, part),
            Ev::Sample => {
                self.sample();
                self.schedule(self.config.sample_every_us, Ev::Sample);
            }
            Ev::FollowerReadTick => {
                if self.config.follower_reads_per_sec == 0 {
                    return;
                }
                self.issue_follower_read();
                let gap = 1_000_000 / self.config.follower_reads_per_sec.max(1);
                self.schedule(gap, Ev::FollowerReadTick);
            }
            Ev::FollowerReadArrive { node, part, read } => {
                if self.is_alive(node) {
                    self.replica_mut(node, part).jobs.push_back(Job::FollowerRead(read));
                    self.try_start(node, part);
                }
            }
            Ev::ClientReply { client, issued, ok } => {
                if ok {
                    self.metrics.latencies_us.push(self.now - issued);
                } else {
                    self.metrics.failed_requests += 1;
                }
                if let Some(c) = client {
                    // A failed request backs off briefly before the next one.
                    let delay = if ok { 0 } else { 1_000 };
                    self.schedule(delay, Ev::ClientNext { client: c });
                }
            }
        }
    }

    fn client_next(&mut self, client: Option<usize>) {
        let Some((_, workload)) = &mut self.load else { return };
        let Some(op) = workload.next_op() else {
            self.load = None;
            return;
        };
        let issued = self.now;
        let delay = self.client_delay();
        self.schedule(delay, Ev::Arrive { client, op, issued });
    }

    fn client_delay(&mut self) -> u64 {
        self.config.client_delay_us + self.rng.gen_range(0..=self.config.client_jitter_us)
    }

    fn reply_client(&mut self, client: Option<usize>, issued: u64, ok: bool) {
        let delay = self.client_delay();
        self.schedule(delay, Ev::ClientReply { client, issued, ok });
    }

    /// Request dispatch at the partition leader: modifications get the next
    /// LSN and go to both the executor queue and the replication channel.
    fn arrive(&mut self, client: Option<usize>, op: WorkloadOp, issued: u64) {
        let part = route(op.key(), self.config.partitions);
        let node = self.leader_of(part);
        let is_leader = self.is_alive(node) && matches!(self.replica(node, part).role, RoleState::Leader(_));
        if !is_leader {
            self.reply_client(client, issued, false);
            return;
        }
        let (rec, reply) = match op {
            WorkloadOp::Get(key) => {
                self.replica_mut(node, part).jobs.push_back(Job::LeaderRead { client, key, issued });
                self.try_start(node, part);
                return;
            }
            WorkloadOp::Put(key, value) => (
                LogRecord::put(part, Lsn::NONE, key.clone(), value.clone()),
                PendingReply {
                    client,
                    issued,
                    key,
                    value: Some(value),
                },
            ),
            WorkloadOp::Delete(key) => (
                LogRecord::delete(part, Lsn::NONE, key.clone()),
                PendingReply {
                    client,
                    issued,
                    key,
                    value: None,
                },
            ),
        };
        let r = &mut self.nodes[(node - 1) as usize].replicas[part as usize];
        let RoleState::Leader(l) = &mut r.role else { unreachable!() };
        let mut rec = rec;
        rec.lsn = l.next_lsn;
        l.next_lsn = l.next_lsn.next();
        l.tracker.set_dispatched(rec.lsn);
        l.window.push(rec.clone());
        let lsn = rec.lsn;
        self.dispatched.insert((part, lsn), (reply.key.clone(), reply.value.clone()));
        l.pending.push_back((rec, reply));
        if !l.writes_queued {
            l.writes_queued = true;
            r.jobs.push_back(Job::Writes);
        }
        self.metrics.writes_dispatched += 1;
        self.schedule_send(node, part);
        self.try_start(node, part);
    }

    fn try_start(&mut self, node: NodeId, part: PartitionId) {
        let svc = self.config.service.clone();
        let max_batch = self.config.max_batch;
        let r = self.replica_mut(node, part);
        if r.running.is_some() {
            return;
        }
        let Some(job) = r.jobs.pop_front() else { return };
        let job = match job {
            Job::Writes => {
                let RoleState::Leader(l) = &mut r.role else {
                    return;
                };
                let n = l.pending.len().min(max_batch);
                let batch: Vec<_> = l.pending.drain(..n).collect();
                if l.pending.is_empty() {
                    l.writes_queued = false;
                } else {
                    r.jobs.push_back(Job::Writes);
                }
                Job::WriteBatch(batch)
            }
            other => other,
        };
        let cost = match &job {
            Job::WriteBatch(b) => svc.per_record_us * b.len() as u64 + svc.flush_us,
            Job::Replica(_, ReplMessage::AppendEntries { records, .. }) if !records.is_empty() => {
                svc.per_message_us + svc.per_record_us * records.len() as u64 + svc.flush_us
            }
            Job::Replica(..) => svc.per_message_us,
            Job::LeaderRead { .. } | Job::FollowerRead(_) => svc.per_read_us,
            Job::Writes => unreachable!(),
        };
        r.running = Some(job);
        self.schedule(cost, Ev::ExecDone { node, part });
    }

    fn exec_done(&mut self, node: NodeId, part: PartitionId) {
        if !self.is_alive(node) {
            return;
        }
        let Some(job) = self.replica_mut(node, part).running.take() else { return };
        match job {
            Job::WriteBatch(batch) => self.execute_writes(node, part, batch),
            Job::Replica(from, msg) => {
                self.replica_message(node, part, from, msg);
                self.recheck_parked(node, part);
            }
            Job::LeaderRead { client, key, issued } => {
                self.replica_mut(node, part).p.exec_get(&key).expect("leader read");
                self.metrics.reads_served += 1;
                self.reply_client(client, issued, true);
            }
            Job::FollowerRead(read) => self.follower_read(node, part, read),
            Job::Writes => unreachable!(),
        }
        self.try_start(node, part);
    }

    /// The executor's batch: apply, one group flush, then the local ack.
    fn execute_writes(&mut self, node: NodeId, part: PartitionId, batch: Vec<(LogRecord, PendingReply)>) {
        let r = self.replica_mut(node, part);
        let RoleState::Leader(l) = &mut r.role else {
            // Stepped down while the batch was queued; its clients time out.
            return;
        };
        for (rec, reply) in batch {
            let lsn = rec.lsn;
            r.p.apply(rec).expect("leader apply");
            l.replies.push(lsn, reply);
        }
        let flushed = r.p.flush().expect("leader flush");
        l.tracker.on_ack(node, flushed);
        self.commit_progress(node, part);
    }

    /// Reply stage: releases every reply whose record reached a quorum.
    fn commit_progress(&mut self, node: NodeId, part: PartitionId) {
        let q = quorum(self.config.nodes as usize);
        let r = self.replica_mut(node, part);
        let RoleState::Leader(l) = &mut r.role else { return };
        let commit = l.tracker.commit();
        let state = r.p.lsn_state_mut();
        state.advance_commit(commit);
        state.replay_to_commit();
        let ready = l.replies.drain_committed(commit);
        for (lsn, reply) in ready {
            let holders = self
                .nodes
                .iter()
                .filter(|n| n.replicas[part as usize].p.lsn_state().flushed() >= lsn)
                .count();
            if holders < q {
                self.metrics.quorum_violations += 1;
            }
            let m = &mut self.metrics.min_holders_at_reply;
            *m = Some(m.map_or(holders, |x| x.min(holders)));
            self.metrics.writes_acked += 1;
            if !self.acked.contains_key(&reply.key) {
                self.acked_keys.push(reply.key.clone());
            }
            self.acked.insert(reply.key.clone(), (part, lsn, reply.value.clone()));
            self.reply_client(reply.client, reply.issued, true);
        }
    }

    fn schedule_send(&mut self, node: NodeId, part: PartitionId) {
        let delay = self.config.service.send_us;
        let r = self.replica_mut(node, part);
        if !r.send_scheduled {
            r.send_scheduled = true;
            self.schedule(delay, Ev::SendTick { node, part });
        }
    }

    /// Send stage: ships every available batch to every synced peer without
    /// waiting for acknowledgements.
    fn send_tick(&mut self, node: NodeId, part: PartitionId) {
        if !self.is_alive(node) {
            return;
        }
        let now = self.now;
        let r = &mut self.nodes[(node - 1) as usize].replicas[part as usize];
        r.send_scheduled = false;
        let Replica { p, role, .. } = r;
        let RoleState::Leader(l) = role else { return };
        let mut out = Vec::new();
        let peers: Vec<NodeId> = l.window.peers().collect();
        for peer in peers {
            if !l.synced[&peer] {
                continue;
            }
            let mut fetch = |start: Lsn, n: usize| -> Vec<LogRecord> {
                p.log()
                    .iter_from_lsn(start)
                    .take(n)
                    .filter_map(|r| r.ok().map(|(rec, _)| rec))
                    .collect()
            };
            while let Some(records) = l.window.next_batch(peer, now, &mut fetch) {
                let inflight = l.batches_in_flight.get_mut(&peer).unwrap();
                inflight.push_back(records.last().unwrap().lsn);
                self.metrics.max_batches_in_flight = self.metrics.max_batches_in_flight.max(inflight.len());
                out.push((
                    peer,
                    ReplMessage::AppendEntries {
                        partition: part,
                        epoch: l.meta.epoch,
                        leader_commit: l.tracker.commit(),
                        records,
                    },
                ));
            }
        }
        for (peer, msg) in out {
            self.send(node, peer, &msg);
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: &ReplMessage) {
        let frame = msg.encode_frame();
        let times = self.net.schedule(&mut self.rng, self.now, from, to);
        self.metrics.messages_sent = self.net.sent;
        self.metrics.messages_dropped = self.net.dropped;
        self.metrics.messages_duplicated = self.net.duplicated;
        for at in times {
            let delay = at - self.now;
            self.schedule(delay, Ev::Deliver {
                from,
                to,
                frame: frame.clone(),
            });
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, frame: Vec<u8>) {
        if !self.is_alive(to) || !self.is_alive(from) {
            return;
        }
        let msg = ReplMessage::read_from(&mut &frame[..])
            .expect("simulated frames are well formed")
            .expect("one frame per delivery");
        let part = msg.partition();
        match msg {
            ReplMessage::AppendEntries { .. } | ReplMessage::Truncate { .. } => {
                self.replica_mut(to, part).jobs.push_back(Job::Replica(from, msg));
                self.try_start(to, part);
            }
            _ => self.leader_response(to, part, msg),
        }
    }

    /// Receive/ack stage on the leader.
    fn leader_response(&mut self, node: NodeId, part: PartitionId, msg: ReplMessage) {
        let now = self.now;
        let r = self.replica_mut(node, part);
        let RoleState::Leader(l) = &mut r.role else { return };
        let epoch = l.meta.epoch;
        match msg {
            ReplMessage::Ack {
                epoch: e,
                node: from,
                last_flushed,
                ..
            } if e == epoch => {
                l.synced.insert(from, true);
                l.tracker.on_ack(from, last_flushed);
                l.window.on_ack(from, last_flushed, now);
                if let Some(q) = l.batches_in_flight.get_mut(&from) {
                    while q.front().is_some_and(|&x| x <= last_flushed) {
                        q.pop_front();
                    }
                }
                self.commit_progress(node, part);
                self.schedule_send(node, part);
            }
            ReplMessage::Nack {
                epoch: e,
                node: from,
                expected,
                ..
            } if e == epoch => {
                l.window.on_nack(from, expected, now);
                if let Some(q) = l.batches_in_flight.get_mut(&from) {
                    q.clear();
                }
                self.schedule_send(node, part);
            }
            ReplMessage::EpochRejected { epoch: e, node: from, .. } => {
                if e < epoch {
                    l.synced.insert(from, false);
                    self.sync_peer(node, part, from);
                } else if e > epoch {
                    debug!(node, part, "newer epoch seen; stepping down");
                    let meta = l.meta;
                    r.role = RoleState::Follower(FollowerReplica::new(node, part, meta));
                }
            }
            other => debug!(node, ?other, "stale replication response ignored"),
        }
    }

    /// Brings an unsynced peer into the leader's epoch.
    fn sync_peer(&mut self, node: NodeId, part: PartitionId, peer: NodeId) {
        let r = self.replica_mut(node, part);
        let RoleState::Leader(l) = &mut r.role else { return };
        if l.synced[&peer] {
            return;
        }
        let msg = ReplMessage::Truncate {
            partition: part,
            epoch: l.meta.epoch,
            keep: l.meta.epoch_start,
        };
        self.send(node, peer, &msg);
    }

    fn replica_message(&mut self, node: NodeId, part: PartitionId, from: NodeId, msg: ReplMessage) {
        let msg_epoch = match &msg {
            ReplMessage::AppendEntries { epoch, .. } | ReplMessage::Truncate { epoch, .. } => *epoch,
            _ => return,
        };
        let r = self.replica_mut(node, part);
        if let RoleState::Leader(l) = &r.role {
            if msg_epoch <= l.meta.epoch {
                let resp = ReplMessage::EpochRejected {
                    partition: part,
                    epoch: l.meta.epoch,
                    node,
                };
                self.send(node, from, &resp);
                return;
            }
            let meta = l.meta;
            r.role = RoleState::Follower(FollowerReplica::new(node, part, meta));
        }
        let Replica { p, role, .. } = r;
        let RoleState::Follower(f) = role else { unreachable!() };
        if let Some(resp) = f.handle(p, msg).expect("follower apply") {
            self.send(node, from, &resp);
        }
    }

    fn heartbeat(&mut self, node: NodeId, part: PartitionId) {
        if !self.is_alive(node) {
            return;
        }
        let now = self.now;
        let r = self.replica_mut(node, part);
        let RoleState::Leader(l) = &mut r.role else { return };
        let rewound = !l.window.check_timeouts(now).is_empty();
        let mut out = Vec::new();
        let mut unsynced = Vec::new();
        for (&peer, &synced) in &l.synced {
            if synced {
                out.push((
                    peer,
                    ReplMessage::AppendEntries {
                        partition: part,
                        epoch: l.meta.epoch,
                        leader_commit: l.tracker.commit(),
                        records: Vec::new(),
                    },
                ));
            } else {
                unsynced.push(peer);
            }
        }
        for (peer, msg) in out {
            self.send(node, peer, &msg);
        }
        for peer in unsynced {
            self.sync_peer(node, part, peer);
        }
        if rewound {
            self.schedule_send(node, part);
        }
        self.schedule(self.config.heartbeat_us, Ev::Heartbeat { node, part });
    }

    fn sample(&mut self) {
        for part in 0..self.config.partitions {
            let leader = self.leader_of(part);
            if !self.is_alive(leader) {
                continue;
            }
            let leader_lsn = self.replica(leader, part).p.lsn_state().flushed();
            let mut samples = Vec::new();
            for n in self.nodes.iter().filter(|n| n.alive && n.id != leader) {
                let follower_lsn = n.replicas[part as usize].p.lsn_state().flushed();
                samples.push(FreshnessSample {
                    t_us: self.now,
                    partition: part,
                    follower: n.id,
                    leader_lsn,
                    follower_lsn,
                    score: freshness_score(follower_lsn, leader_lsn),
                });
            }
            self.metrics.freshness.extend(samples);
        }
    }

    /// The harness plays the read-view service: the view is the leader's
    /// current commit point.
    fn issue_follower_read(&mut self) {
        if self.acked_keys.is_empty() {
            return;
        }
        let key = self.acked_keys.choose(&mut self.rng).unwrap().clone();
        let part = route(&key, self.config.partitions);
        let leader = self.leader_of(part);
        if !self.is_alive(leader) {
            return;
        }
        let followers: Vec<NodeId> = self.nodes.iter().filter(|n| n.alive && n.id != leader).map(|n| n.id).collect();
        let Some(&node) = followers.choose(&mut self.rng) else { return };
        let view = self.replica(leader, part).p.lsn_state().potential_commit();
        self.metrics.follower_reads.issued += 1;
        let read = FollowerRead {
            key,
            view,
            first_issued: self.now,
        };
        let delay = self.client_delay();
        self.schedule(delay, Ev::FollowerReadArrive { node, part, read });
    }

    fn follower_read(&mut self, node: NodeId, part: PartitionId, read: FollowerRead) {
        let timeout = self.config.block_timeout_us;
        let r = self.replica_mut(node, part);
        let decision = match r.role {
            RoleState::Leader(_) => ReadDecision::ServeNow { advanced: false },
            RoleState::Follower(_) => read_gate(read.view, r.p.lsn_state_mut()),
        };
        match decision {
            ReadDecision::ServeNow { advanced } => {
                let stats = &mut self.metrics.follower_reads;
                if advanced {
                    stats.served_after_advance += 1;
                } else {
                    stats.served_immediately += 1;
                }
                self.serve_follower_read(node, part, read);
            }
            ReadDecision::Block { .. } => {
                let deadline = self.now + timeout;
                self.replica_mut(node, part).parked.push((read, deadline));
            }
            ReadDecision::Reject => self.reject_follower_read(node, part, read),
        }
    }

    fn reject_follower_read(&mut self, node: NodeId, part: PartitionId, read: FollowerRead) {
        self.metrics.follower_reads.rejections += 1;
        // The client retries the same view after a short back-off.
        let delay = 2 * self.config.client_delay_us + 1_000;
        self.schedule(delay, Ev::FollowerReadArrive { node, part, read });
    }

    fn serve_follower_read(&mut self, node: NodeId, part: PartitionId, read: FollowerRead) {
        let stats = self.node(node).stats.clone();
        let before = stats.recovery_records_read() + stats.scan_records();
        let got = self.replica_mut(node, part).p.exec_get(&read.key).expect("follower read");
        let replayed = stats.recovery_records_read() + stats.scan_records() - before;
        let fr = &mut self.metrics.follower_reads;
        fr.served += 1;
        fr.replay_records += replayed;
        fr.max_wait_us = fr.max_wait_us.max(self.now - read.first_issued);
        if let Some((_, lsn, Some(_))) = self.acked.get(&read.key) {
            if *lsn <= read.view && got.is_none() && !self.deleted_after(part, &read.key, *lsn) {
                self.metrics.follower_reads.missing_values += 1;
            }
        }
    }

    /// Retries reads blocked on the commit point after new commit info.
    fn recheck_parked(&mut self, node: NodeId, part: PartitionId) {
        let now = self.now;
        let r = self.replica_mut(node, part);
        if r.parked.is_empty() {
            return;
        }
        let parked = std::mem::take(&mut r.parked);
        for (read, deadline) in parked {
            let decision = read_gate(read.view, self.replica_mut(node, part).p.lsn_state_mut());
            match decision {
                ReadDecision::ServeNow { .. } => {
                    self.metrics.follower_reads.served_after_block += 1;
                    self.serve_follower_read(node, part, read);
                }
                ReadDecision::Block { .. } if now < deadline => {
                    self.replica_mut(node, part).parked.push((read, deadline));
                }
                _ => self.reject_follower_read(node, part, read),
            }
        }
    }
}

/// Convenience: a deterministic write-only workload over `key_space` keys.
pub fn write_workload(seed: u64, ops: u64, key_space: u64, value_size: usize) -> WorkloadSpec {
    WorkloadSpec {
        key_space,
        value_size,
        op_mix: crate::workload::OpMix::WRITE_ONLY,
        op_count: ops,
        seed,
        ..WorkloadSpec::default()
    }
}
