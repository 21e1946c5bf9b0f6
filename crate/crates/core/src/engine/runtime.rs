//! Threaded runtime: one pinned executor per partition, plus a send worker
//! and a reply worker per partition for replication.
//!
//! Stages talk only through channels. Client requests enter through
//! [`Engine::submit`]; modifications get their LSN there and are handed to
//! both the executor queue and the send worker, so replication starts while
//! the executor is still applying. The reply worker owns the quorum marks
//! and releases each reply once its record is committed. Commit points flow
//! back to the other stages through monotone atomics.

use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{bounded, select, unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError, TrySendError};
use parking_lot::Mutex;
use tracing::{debug, error, info, warn};

use super::{partition_dir, route, BatchPath, Partition, PartitionConfig};
use crate::cache::CacheStats;
use crate::error::{Error, Result};
use crate::recovery::{CommitSource, RecoveryReport};
use crate::replication::{
    check_promotion, read_gate, EpochMeta, FollowerReplica, QuorumTracker, ReadDecision, ReplMessage, ReplyQueue,
    SendWindow,
};
use crate::stats::{IoStats, SharedStats};
use crate::types::{Lsn, NodeId, PartitionId, Role};
use crate::wal::LogRecord;

/// Outbound side of the replication network.
pub trait Transport: Send + Sync + 'static {
    /// Best-effort, non-blocking send. Lost messages are recovered by
    /// retransmission.
    fn send(&self, to: NodeId, msg: ReplMessage);
}

/// Transport for a single-node deployment.
pub struct NoTransport;

impl Transport for NoTransport {
    fn send(&self, to: NodeId, _msg: ReplMessage) {
        warn!(to, "no replication transport configured; message dropped");
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub node_id: NodeId,
    pub data_dir: std::path::PathBuf,
    pub partitions: u32,
    /// Other nodes of the cluster.
    pub peers: Vec<NodeId>,
    /// Initial leader of each partition.
    pub leaders: Vec<NodeId>,
    pub partition: PartitionConfig,
    /// Bound of each partition's client queue.
    pub queue_capacity: usize,
    pub max_batch: usize,
    pub heartbeat: Duration,
    pub resend_after: Duration,
    pub block_timeout: Duration,
    pub request_timeout: Duration,
    pub pin_cores: bool,
}

impl EngineConfig {
    /// One node leading every partition.
    pub fn single_node(data_dir: impl Into<std::path::PathBuf>, partitions: u32) -> EngineConfig {
        EngineConfig {
            node_id: 1,
            data_dir: data_dir.into(),
            partitions,
            peers: Vec::new(),
            leaders: vec![1; partitions as usize],
            partition: PartitionConfig::default(),
            queue_capacity: 4096,
            max_batch: 256,
            heartbeat: Duration::from_millis(50),
            resend_after: Duration::from_millis(500),
            block_timeout: Duration::from_secs(1),
            request_timeout: Duration::from_secs(10),
            pin_cores: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.partitions == 0 {
            return Err(Error::Config("partitions must be at least 1".into()));
        }
        if self.leaders.len() != self.partitions as usize {
            return Err(Error::Config(format!(
                "{} leaders given for {} partitions",
                self.leaders.len(),
                self.partitions
            )));
        }
        let mut all: Vec<NodeId> = self.peers.clone();
        all.push(self.node_id);
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate node id".into()));
        }
        if let Some(l) = self.leaders.iter().find(|l| !all.contains(l)) {
            return Err(Error::Config(format!("leader {l} is not a cluster member")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Get(Bytes),
    Put(Bytes, Bytes),
    Delete(Bytes),
    /// Keys in `[start, end)`, at most `limit`.
    Range { start: Bytes, end: Bytes, limit: usize },
    BatchGet(Vec<Bytes>),
}

impl Op {
    fn is_write(&self) -> bool {
        matches!(self, Op::Put(..) | Op::Delete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub op: Op,
    /// Read view for follower reads; `None` reads whatever is visible.
    pub read_view: Option<Lsn>,
}

impl Request {
    pub fn new(op: Op) -> Request {
        Request { op, read_view: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Value(Option<Bytes>),
    Written { lsn: Lsn },
    Deleted { existed: bool, lsn: Lsn },
    Range(Vec<(Bytes, Bytes)>),
    Batch { items: Vec<(Bytes, Option<Bytes>)>, path: BatchPath },
}

/// Completion handle for a submitted request.
pub type Ticket = Receiver<Result<Response>>;
type Responder = Sender<Result<Response>>;

#[derive(Clone, Debug)]
pub struct PartitionStatus {
    pub partition: PartitionId,
    pub role: Role,
    pub leader: Option<NodeId>,
    pub epoch: u64,
    pub flushed: Lsn,
    pub potential_commit: Lsn,
    pub replayed: Lsn,
    pub live_keys: usize,
    pub cache: CacheStats,
}

#[derive(Clone, Debug)]
pub struct PromoteOutcome {
    pub epoch: u64,
    pub flushed: Lsn,
    pub elapsed: Duration,
}

enum ClientTask {
    Write(LogRecord, Responder),
    Read(Request, Responder),
}

enum CtlTask {
    Replicate(NodeId, ReplMessage),
    Fetch { start: Lsn, max: usize, reply: Sender<Vec<LogRecord>> },
    Status(Sender<PartitionStatus>),
    Promote { reachable: Vec<(NodeId, Lsn)>, reply: Sender<Result<PromoteOutcome>> },
    Commit,
    Stop,
}

enum SendEvent {
    Record(LogRecord),
    Ack(NodeId, Lsn),
    Nack(NodeId, Lsn),
    Rejected(NodeId, u64),
    Activate { meta: EpochMeta, last: Lsn },
    Deactivate,
    Stop,
}

enum ReplyEvent {
    Dispatched(Lsn),
    Pending(Lsn, Responder, Response),
    LocalAck(Lsn),
    PeerAck(NodeId, Lsn),
    Activate { flushed: Lsn },
    Deactivate,
    Stop,
}

/// Dispatcher state: LSN assignment must be atomic with the hand-off to
/// both queues, so it sits behind a short critical section.
struct Dispatch {
    role: Role,
    leader: Option<NodeId>,
    next_lsn: Lsn,
}

/// Monotone values published by one stage and read by others.
#[derive(Default)]
struct Shared {
    commit: AtomicU64,
    min_mark: AtomicU64,
    epoch: AtomicU64,
}

struct PartHandle {
    dispatch: Arc<Mutex<Dispatch>>,
    client_tx: Sender<ClientTask>,
    ctl_tx: Sender<CtlTask>,
    send_tx: Sender<SendEvent>,
    reply_tx: Sender<ReplyEvent>,
    shared: Arc<Shared>,
}

pub struct Engine {
    config: EngineConfig,
    stats: SharedStats,
    parts: Vec<PartHandle>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    reports: Vec<RecoveryReport>,
}

impl Engine {
    /// Recovers every partition (in parallel) and starts the stages.
    pub fn start(config: EngineConfig, transport: Arc<dyn Transport>) -> Result<Engine> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir)?;
        let stats = IoStats::new();
        let opened: Vec<Result<(Partition, RecoveryReport, EpochMeta)>> = thread::scope(|s| {
            let handles: Vec<_> = (0..config.partitions)
                .map(|id| {
                    let dir = partition_dir(&config.data_dir, id);
                    let (pcfg, stats) = (config.partition.clone(), stats.clone());
                    s.spawn(move || {
                        std::fs::create_dir_all(&dir)?;
                        let (p, report) = Partition::open(&dir, id, pcfg, stats, CommitSource::Leader)?;
                        p.release_owner();
                        let meta = EpochMeta::load(&dir)?;
                        Ok((p, report, meta))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("recovery thread panicked")).collect()
        });
        let mut partitions = Vec::new();
        let mut reports = Vec::new();
        for r in opened {
            let (p, report, meta) = r?;
            partitions.push((p, meta));
            reports.push(report);
        }

        let cores = if config.pin_cores { core_affinity::get_core_ids().unwrap_or_default() } else { Vec::new() };
        if config.pin_cores && cores.is_empty() {
            warn!("core pinning unavailable; executors run unpinned");
        }
        let mut parts = Vec::new();
        let mut threads = Vec::new();
        for (i, (p, meta)) in partitions.into_iter().enumerate() {
            let id = i as PartitionId;
            let (client_tx, client_rx) = bounded(config.queue_capacity.max(1));
            let (ctl_tx, ctl_rx) = unbounded();
            let (send_tx, send_rx) = unbounded();
            let (reply_tx, reply_rx) = unbounded();
            let shared = Arc::new(Shared::default());
            let dispatch = Arc::new(Mutex::new(Dispatch {
                role: Role::Follower,
                leader: Some(config.leaders[i]),
                next_lsn: p.last_lsn().next(),
            }));
            let leader_at_start = config.leaders[i] == config.node_id;
            let mut exec = Executor {
                node: config.node_id,
                follower: FollowerReplica::new(config.node_id, id, meta),
                meta,
                role: Role::Follower,
                p,
                parked: Vec::new(),
                dispatch: dispatch.clone(),
                send_tx: send_tx.clone(),
                reply_tx: reply_tx.clone(),
                shared: shared.clone(),
                transport: transport.clone(),
                max_batch: config.max_batch.max(1),
                block_timeout: config.block_timeout,
            };
            if leader_at_start {
                // A (re)starting leader opens a new epoch at its own log end:
                // replicas holding records it never acknowledged drop them.
                exec.take_leadership().map_err(|e| {
                    error!(partition = id, %e, "could not start as leader");
                    e
                })?;
                exec.p.release_owner();
            }
            let core = (!cores.is_empty()).then(|| cores[i % cores.len()]);
            threads.push(
                thread::Builder::new()
                    .name(format!("exec-p{id}"))
                    .spawn(move || {
                        if let Some(c) = core {
                            if !core_affinity::set_for_current(c) {
                                warn!(partition = id, "failed to pin executor; running unpinned");
                            }
                        }
                        exec.run(client_rx, ctl_rx);
                    })?,
            );
            let sender = SendWorker {
                partition: id,
                peers: config.peers.clone(),
                transport: transport.clone(),
                ctl_tx: ctl_tx.clone(),
                shared: shared.clone(),
                max_batch: config.max_batch.max(1),
                heartbeat: config.heartbeat,
                resend_after: config.resend_after,
                epoch0: Instant::now(),
            };
            threads.push(thread::Builder::new().name(format!("send-p{id}")).spawn(move || sender.run(send_rx))?);
            let replier = ReplyWorker {
                node: config.node_id,
                peers: config.peers.clone(),
                ctl_tx: ctl_tx.clone(),
                shared: shared.clone(),
            };
            threads.push(thread::Builder::new().name(format!("reply-p{id}")).spawn(move || replier.run(reply_rx))?);
            parts.push(PartHandle {
                dispatch,
                client_tx,
                ctl_tx,
                send_tx,
                reply_tx,
                shared,
            });
        }
        info!(node = config.node_id, partitions = config.partitions, "engine started");
        Ok(Engine {
            config,
            stats,
            parts,
            threads: Mutex::new(threads),
            reports,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn stats(&self) -> &SharedStats {
        &self.stats
    }

    pub fn recovery_reports(&self) -> &[RecoveryReport] {
        &self.reports
    }

    pub fn partition_of(&self, key: &[u8]) -> PartitionId {
        route(key, self.config.partitions)
    }

    /// Queues a single-partition request. Modifications get their LSN here.
    pub fn submit(&self, req: Request) -> Result<Ticket> {
        let key = match &req.op {
            Op::Get(k) | Op::Put(k, _) | Op::Delete(k) => k,
            Op::Range { .. } | Op::BatchGet(_) => {
                return Err(Error::Config("range and batch reads go through execute()".into()))
            }
        };
        if key.is_empty() {
            return Err(Error::EmptyKey);
        }
        let part = self.partition_of(key);
        self.submit_to(part, req)
    }

    fn submit_to(&self, part: PartitionId, req: Request) -> Result<Ticket> {
        let h = &self.parts[part as usize];
        let (tx, rx) = bounded(1);
        if !req.op.is_write() {
            return match h.client_tx.try_send(ClientTask::Read(req, tx)) {
                Ok(()) => Ok(rx),
                Err(TrySendError::Full(_)) => Err(Error::Backpressure(part)),
                Err(TrySendError::Disconnected(_)) => Err(Error::Stopped),
            };
        }
        let mut d = h.dispatch.lock();
        if d.role != Role::Leader {
            return Err(Error::NotLeader {
                partition: part,
                leader: d.leader,
            });
        }
        let lsn = d.next_lsn;
        let rec = match req.op {
            Op::Put(k, v) => LogRecord::put(part, lsn, k, v),
            Op::Delete(k) => LogRecord::delete(part, lsn, k),
            _ => unreachable!(),
        };
        match h.client_tx.try_send(ClientTask::Write(rec.clone(), tx)) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => return Err(Error::Backpressure(part)),
            Err(TrySendError::Disconnected(_)) => return Err(Error::Stopped),
        }
        d.next_lsn = lsn.next();
        let _ = h.reply_tx.send(ReplyEvent::Dispatched(lsn));
        if !self.config.peers.is_empty() {
            let _ = h.send_tx.send(SendEvent::Record(rec));
        }
        Ok(rx)
    }

    fn wait(&self, part: PartitionId, ticket: Ticket) -> Result<Response> {
        match ticket.recv_timeout(self.config.request_timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => Err(Error::Wire("request timed out".into())),
            // The reply was dropped: leadership moved while it was pending.
            Err(RecvTimeoutError::Disconnected) => Err(Error::NotLeader {
                partition: part,
                leader: self.parts[part as usize].dispatch.lock().leader,
            }),
        }
    }

    /// Runs a request to completion, splitting range and batch reads
    /// across partitions.
    pub fn execute(&self, req: Request) -> Result<Response> {
        match req.op {
            Op::Range { start, end, limit } => {
                let mut tickets = Vec::new();
                for part in 0..self.config.partitions {
                    let r = Request {
                        op: Op::Range {
                            start: start.clone(),
                            end: end.clone(),
                            limit,
                        },
                        read_view: req.read_view,
                    };
                    tickets.push((part, self.submit_to(part, r)?));
                }
                let mut all = Vec::new();
                for (part, t) in tickets {
                    match self.wait(part, t)? {
                        Response::Range(items) => all.extend(items),
                        other => return Err(Error::Wire(format!("unexpected response {other:?}"))),
                    }
                }
                all.sort_by(|a, b| a.0.cmp(&b.0));
                all.truncate(limit);
                Ok(Response::Range(all))
            }
            Op::BatchGet(keys) => {
                let mut per_part: Vec<Vec<Bytes>> = vec![Vec::new(); self.config.partitions as usize];
                for k in &keys {
                    per_part[self.partition_of(k) as usize].push(k.clone());
                }
                let mut tickets = Vec::new();
                for (part, ks) in per_part.into_iter().enumerate() {
                    if ks.is_empty() {
                        continue;
                    }
                    let r = Request {
                        op: Op::BatchGet(ks),
                        read_view: req.read_view,
                    };
                    tickets.push((part as PartitionId, self.submit_to(part as PartitionId, r)?));
                }
                let mut found = std::collections::HashMap::new();
                let mut path = BatchPath::Index;
                for (part, t) in tickets {
                    match self.wait(part, t)? {
                        Response::Batch { items, path: p } => {
                            if p == BatchPath::Scan {
                                path = BatchPath::Scan;
                            }
                            found.extend(items);
                        }
                        other => return Err(Error::Wire(format!("unexpected response {other:?}"))),
                    }
                }
                let mut seen = std::collections::HashSet::new();
                let items = keys
                    .into_iter()
                    .filter(|k| seen.insert(k.clone()))
                    .map(|k| {
                        let v = found.get(&k).cloned().flatten();
                        (k, v)
                    })
                    .collect();
                Ok(Response::Batch { items, path })
            }
            op => {
                let key = match &op {
                    Op::Get(k) | Op::Put(k, _) | Op::Delete(k) => k.clone(),
                    _ => unreachable!(),
                };
                let part = self.partition_of(&key);
                let t = self.submit(Request {
                    op,
                    read_view: req.read_view,
                })?;
                self.wait(part, t)
            }
        }
    }

    pub fn get(&self, key: impl Into<Bytes>) -> Result<Option<Bytes>> {
        match self.execute(Request::new(Op::Get(key.into())))? {
            Response::Value(v) => Ok(v),
            other => Err(Error::Wire(format!("unexpected response {other:?}"))),
        }
    }

    pub fn put(&self, key: impl Into<Bytes>, value: impl Into<Bytes>) -> Result<Lsn> {
        match self.execute(Request::new(Op::Put(key.into(), value.into())))? {
            Response::Written { lsn } => Ok(lsn),
            other => Err(Error::Wire(format!("unexpected response {other:?}"))),
        }
    }

    pub fn delete(&self, key: impl Into<Bytes>) -> Result<bool> {
        match self.execute(Request::new(Op::Delete(key.into())))? {
            Response::Deleted { existed, .. } => Ok(existed),
            other => Err(Error::Wire(format!("unexpected response {other:?}"))),
        }
    }

    pub fn status(&self, part: PartitionId) -> Result<PartitionStatus> {
        let h = self.parts.get(part as usize).ok_or_else(|| Error::Config(format!("no partition {part}")))?;
        let (tx, rx) = bounded(1);
        h.ctl_tx.send(CtlTask::Status(tx)).map_err(|_| Error::Stopped)?;
        rx.recv_timeout(self.config.request_timeout).map_err(|_| Error::Stopped)
    }

    pub fn statuses(&self) -> Result<Vec<PartitionStatus>> {
        (0..self.config.partitions).map(|p| self.status(p)).collect()
    }

    /// Takes over leadership of `part`. `reachable` lists the flushed LSN
    /// of every peer that could be asked; a longer log among them refuses
    /// the promotion.
    pub fn promote(&self, part: PartitionId, reachable: Vec<(NodeId, Lsn)>) -> Result<PromoteOutcome> {
        let h = self.parts.get(part as usize).ok_or_else(|| Error::Config(format!("no partition {part}")))?;
        let (tx, rx) = bounded(1);
        h.ctl_tx.send(CtlTask::Promote { reachable, reply: tx }).map_err(|_| Error::Stopped)?;
        rx.recv_timeout(self.config.request_timeout).map_err(|_| Error::Stopped)?
    }

    /// Inbound replication traffic from `from`.
    pub fn on_message(&self, from: NodeId, msg: ReplMessage) {
        let part = msg.partition();
        let Some(h) = self.parts.get(part as usize) else {
            warn!(from, part, "message for unknown partition");
            return;
        };
        let epoch = h.shared.epoch.load(AtomicOrdering::Acquire);
        match msg {
            ReplMessage::Ack {
                epoch: e,
                node,
                last_flushed,
                ..
            } => {
                if e == epoch {
                    let _ = h.send_tx.send(SendEvent::Ack(node, last_flushed));
                    let _ = h.reply_tx.send(ReplyEvent::PeerAck(node, last_flushed));
                }
            }
            ReplMessage::Nack { epoch: e, node, expected, .. } => {
                if e == epoch {
                    let _ = h.send_tx.send(SendEvent::Nack(node, expected));
                }
            }
            ReplMessage::EpochRejected { epoch: e, node, .. } => {
                let _ = h.send_tx.send(SendEvent::Rejected(node, e));
                let _ = h.ctl_tx.send(CtlTask::Replicate(from, msg));
            }
            ReplMessage::AppendEntries { .. } | ReplMessage::Truncate { .. } => {
                let _ = h.ctl_tx.send(CtlTask::Replicate(from, msg));
            }
        }
    }

    /// Stops every stage; executors flush and checkpoint on the way out.
    pub fn shutdown(&self) {
        let threads: Vec<_> = std::mem::take(&mut *self.threads.lock());
        if threads.is_empty() {
            return;
        }
        for h in &self.parts {
            let _ = h.ctl_tx.send(CtlTask::Stop);
            let _ = h.send_tx.send(SendEvent::Stop);
            let _ = h.reply_tx.send(ReplyEvent::Stop);
        }
        for t in threads {
            if t.join().is_err() {
                error!("stage thread panicked");
            }
        }
        info!(node = self.config.node_id, "engine stopped");
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Parked {
    req: Request,
    reply: Responder,
    deadline: Instant,
}

struct Executor {
    node: NodeId,
    role: Role,
    meta: EpochMeta,
    follower: FollowerReplica,
    p: Partition,
    parked: Vec<Parked>,
    dispatch: Arc<Mutex<Dispatch>>,
    send_tx: Sender<SendEvent>,
    reply_tx: Sender<ReplyEvent>,
    shared: Arc<Shared>,
    transport: Arc<dyn Transport>,
    max_batch: usize,
    block_timeout: Duration,
}

impl Executor {
    fn run(mut self, client_rx: Receiver<ClientTask>, ctl_rx: Receiver<CtlTask>) {
        let tick = Duration::from_millis(20);
        loop {
            let mut ctl = Vec::new();
            let mut batch = Vec::new();
            select! {
                recv(ctl_rx) -> t => match t {
                    Ok(t) => ctl.push(t),
                    Err(_) => break,
                },
                recv(client_rx) -> t => if let Ok(t) = t { batch.push(t) },
                default(tick) => {}
            }
            while let Ok(t) = ctl_rx.try_recv() {
                ctl.push(t);
            }
            while batch.len() < self.max_batch {
                match client_rx.try_recv() {
                    Ok(t) => batch.push(t),
                    Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
                }
            }
            let mut stop = false;
            for t in ctl {
                if matches!(t, CtlTask::Stop) {
                    stop = true;
                } else {
                    self.control(t);
                }
            }
            if !batch.is_empty() {
                self.process(batch);
            }
            self.expire_parked();
            if let Err(e) = self.maintenance() {
                warn!(partition = self.p.id(), %e, "background maintenance failed");
            }
            if stop {
                break;
            }
        }
        if let Err(e) = self.p.flush().and_then(|_| self.p.checkpoint().map(|_| Lsn::NONE)) {
            warn!(partition = self.p.id(), %e, "final checkpoint failed");
        }
    }

    fn publish_commit(&mut self) {
        if self.role == Role::Leader {
            let c = Lsn(self.shared.commit.load(AtomicOrdering::Acquire));
            let s = self.p.lsn_state_mut();
            s.advance_commit(c);
            s.replay_to_commit();
        }
    }

    /// Applies a batch drained from the client queue, with a single group
    /// flush for all modifications in it.
    fn process(&mut self, batch: Vec<ClientTask>) {
        let mut written = Vec::new();
        for t in batch {
            match t {
                ClientTask::Write(rec, reply) => {
                    if self.role != Role::Leader {
                        let _ = reply.send(Err(Error::NotLeader {
                            partition: self.p.id(),
                            leader: self.dispatch.lock().leader,
                        }));
                        continue;
                    }
                    let (lsn, is_put) = (rec.lsn, rec.kind == crate::types::RecordKind::Put);
                    match self.p.apply(rec) {
                        Ok(existed) => {
                            let resp = if is_put {
                                Response::Written { lsn }
                            } else {
                                Response::Deleted { existed, lsn }
                            };
                            written.push((lsn, reply, resp));
                        }
                        Err(e) => {
                            error!(partition = self.p.id(), %e, "apply failed; partition stops taking writes");
                            self.fault();
                            let _ = reply.send(Err(e));
                        }
                    }
                }
                ClientTask::Read(req, reply) => self.read(req, reply),
            }
        }
        if written.is_empty() {
            return;
        }
        match self.p.flush() {
            Ok(flushed) => {
                for (lsn, reply, resp) in written {
                    let _ = self.reply_tx.send(ReplyEvent::Pending(lsn, reply, resp));
                }
                let _ = self.reply_tx.send(ReplyEvent::LocalAck(flushed));
            }
            Err(e) => {
                error!(partition = self.p.id(), %e, "group flush failed; partition stops taking writes");
                self.fault();
                for (_, reply, _) in written {
                    let _ = reply.send(Err(Error::Faulted(self.p.id())));
                }
            }
        }
    }

    fn fault(&mut self) {
        let mut d = self.dispatch.lock();
        d.role = Role::Follower;
        d.leader = None;
    }

    fn read(&mut self, req: Request, reply: Responder) {
        if self.role == Role::Follower {
            if let Some(view) = req.read_view {
                match read_gate(view, self.p.lsn_state_mut()) {
                    ReadDecision::ServeNow { .. } => {}
                    ReadDecision::Block { .. } => {
                        self.parked.push(Parked {
                            req,
                            reply,
                            deadline: Instant::now() + self.block_timeout,
                        });
                        return;
                    }
                    ReadDecision::Reject => {
                        let _ = reply.send(Err(Error::ReadRejected {
                            requested: view,
                            flushed: self.p.lsn_state().flushed(),
                        }));
                        return;
                    }
                }
            }
        }
        let _ = reply.send(self.serve(req.op));
    }

    fn serve(&mut self, op: Op) -> Result<Response> {
        match op {
            Op::Get(k) => self.p.exec_get(&k).map(Response::Value),
            Op::Range { start, end, limit } => self.p.exec_range(&start, &end, limit).map(Response::Range),
            Op::BatchGet(keys) => self
                .p
                .exec_batch_get(&keys)
                .map(|(items, path)| Response::Batch { items, path }),
            Op::Put(..) | Op::Delete(_) => unreachable!("writes are not reads"),
        }
    }

    fn recheck_parked(&mut self) {
        if self.parked.is_empty() {
            return;
        }
        for p in std::mem::take(&mut self.parked) {
            self.read(p.req, p.reply);
        }
    }

    fn expire_parked(&mut self) {
        let now = Instant::now();
        let flushed = self.p.lsn_state().flushed();
        self.parked.retain(|p| {
            if p.deadline > now {
                return true;
            }
            let _ = p.reply.send(Err(Error::ReadRejected {
                requested: p.req.read_view.unwrap_or_default(),
                flushed,
            }));
            false
        });
    }

    fn maintenance(&mut self) -> Result<()> {
        self.publish_commit();
        self.p.maybe_checkpoint()?;
        // Leaders keep records every replica still needs in unsorted
        // segments, where catch-up reads them.
        let up_to = match self.role {
            Role::Leader => Lsn(self.shared.min_mark.load(AtomicOrdering::Acquire)),
            Role::Follower => self.p.lsn_state().potential_commit(),
        };
        self.p.maybe_compact(up_to)?;
        Ok(())
    }

    fn control(&mut self, t: CtlTask) {
        match t {
            CtlTask::Replicate(from, msg) => {
                if let Err(e) = self.replicate(from, msg) {
                    error!(partition = self.p.id(), %e, "replication apply failed");
                }
                self.recheck_parked();
            }
            CtlTask::Fetch { start, max, reply } => {
                let recs = self
                    .p
                    .log()
                    .iter_from_lsn(start)
                    .take(max)
                    .map_while(|r| r.ok().map(|(rec, _)| rec))
                    .collect();
                let _ = reply.send(recs);
            }
            CtlTask::Status(reply) => {
                self.publish_commit();
                let s = self.p.lsn_state();
                let _ = reply.send(PartitionStatus {
                    partition: self.p.id(),
                    role: self.role,
                    leader: self.dispatch.lock().leader,
                    epoch: self.meta.epoch,
                    flushed: s.flushed(),
                    potential_commit: s.potential_commit(),
                    replayed: s.replayed(),
                    live_keys: self.p.live_keys(),
                    cache: self.p.cache_stats(),
                });
            }
            CtlTask::Promote { reachable, reply } => {
                let started = Instant::now();
                let r = if self.role == Role::Leader {
                    Err(Error::Config(format!("already leader of partition {}", self.p.id())))
                } else {
                    check_promotion(self.p.lsn_state().flushed(), &reachable).and_then(|_| self.take_leadership())
                };
                let _ = reply.send(r.map(|_| PromoteOutcome {
                    epoch: self.meta.epoch,
                    flushed: self.p.lsn_state().flushed(),
                    elapsed: started.elapsed(),
                }));
            }
            CtlTask::Commit => self.publish_commit(),
            CtlTask::Stop => {}
        }
    }

    /// Role flip to leader in a new epoch. The index is already current, so
    /// nothing is replayed.
    fn take_leadership(&mut self) -> Result<()> {
        let flushed = self.p.flush()?;
        let meta = EpochMeta {
            epoch: self.meta.epoch + 1,
            epoch_start: flushed,
        };
        meta.store(self.p.dir())?;
        self.meta = meta;
        self.role = Role::Leader;
        self.shared.epoch.store(meta.epoch, AtomicOrdering::Release);
        let _ = self.reply_tx.send(ReplyEvent::Activate { flushed });
        let _ = self.send_tx.send(SendEvent::Activate { meta, last: flushed });
        let mut d = self.dispatch.lock();
        d.role = Role::Leader;
        d.leader = Some(self.node);
        d.next_lsn = flushed.next();
        info!(partition = self.p.id(), epoch = meta.epoch, %flushed, "leading partition");
        Ok(())
    }

    fn step_down(&mut self, leader: Option<NodeId>) {
        info!(partition = self.p.id(), ?leader, "stepping down");
        self.role = Role::Follower;
        self.follower = FollowerReplica::new(self.node, self.p.id(), self.meta);
        let _ = self.reply_tx.send(ReplyEvent::Deactivate);
        let _ = self.send_tx.send(SendEvent::Deactivate);
        let mut d = self.dispatch.lock();
        d.role = Role::Follower;
        d.leader = leader;
    }

    fn replicate(&mut self, from: NodeId, msg: ReplMessage) -> Result<()> {
        let epoch = match &msg {
            ReplMessage::AppendEntries { epoch, .. } | ReplMessage::Truncate { epoch, .. } => *epoch,
            ReplMessage::EpochRejected { epoch, .. } => {
                if self.role == Role::Leader && *epoch > self.meta.epoch {
                    self.step_down(None);
                }
                return Ok(());
            }
            _ => return Ok(()),
        };
        if self.role == Role::Leader {
            if epoch <= self.meta.epoch {
                self.transport.send(
                    from,
                    ReplMessage::EpochRejected {
                        partition: self.p.id(),
                        epoch: self.meta.epoch,
                        node: self.node,
                    },
                );
                return Ok(());
            }
            self.step_down(Some(from));
        }
        self.dispatch.lock().leader = Some(from);
        if let Some(resp) = self.follower.handle(&mut self.p, msg)? {
            self.transport.send(from, resp);
        }
        self.meta = self.follower.meta();
        debug!(partition = self.p.id(), flushed = %self.p.lsn_state().flushed(), "replicated");
        Ok(())
    }
}

struct Active {
    meta: EpochMeta,
    window: SendWindow,
    synced: std::collections::BTreeMap<NodeId, bool>,
}

struct SendWorker {
    partition: PartitionId,
    peers: Vec<NodeId>,
    transport: Arc<dyn Transport>,
    ctl_tx: Sender<CtlTask>,
    shared: Arc<Shared>,
    max_batch: usize,
    heartbeat: Duration,
    resend_after: Duration,
    epoch0: Instant,
}

const WINDOW_RETAINED: usize = 1 << 16;

impl SendWorker {
    fn now(&self) -> u64 {
        self.epoch0.elapsed().as_millis() as u64
    }

    fn run(self, rx: Receiver<SendEvent>) {
        let mut active: Option<Active> = None;
        let mut next_beat = Instant::now() + self.heartbeat;
        loop {
            let timeout = next_beat.saturating_duration_since(Instant::now());
            let first = match rx.recv_timeout(timeout) {
                Ok(ev) => Some(ev),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            let mut events: Vec<SendEvent> = first.into_iter().collect();
            while let Ok(ev) = rx.try_recv() {
                events.push(ev);
            }
            for ev in events {
                match ev {
                    SendEvent::Stop => return,
                    SendEvent::Activate { meta, last } => {
                        let now = self.now();
                        let mut window = SendWindow::new(
                            &self.peers,
                            last,
                            self.max_batch,
                            WINDOW_RETAINED,
                            self.resend_after.as_millis() as u64,
                        );
                        for &p in &self.peers {
                            window.on_connect(p, now);
                        }
                        let synced = self.peers.iter().map(|&p| (p, false)).collect();
                        let a = Active { meta, window, synced };
                        for &p in &self.peers {
                            self.truncate_peer(&a, p);
                        }
                        active = Some(a);
                    }
                    SendEvent::Deactivate => active = None,
                    _ if active.is_none() => {}
                    SendEvent::Record(rec) => active.as_mut().unwrap().window.push(rec),
                    SendEvent::Ack(node, lsn) => {
                        let now = self.now();
                        let a = active.as_mut().unwrap();
                        a.synced.insert(node, true);
                        a.window.on_ack(node, lsn, now);
                    }
                    SendEvent::Nack(node, expected) => {
                        let now = self.now();
                        active.as_mut().unwrap().window.on_nack(node, expected, now);
                    }
                    SendEvent::Rejected(node, epoch) => {
                        let a = active.as_mut().unwrap();
                        if epoch < a.meta.epoch {
                            a.synced.insert(node, false);
                            self.truncate_peer(a, node);
                        }
                    }
                }
            }
            if let Some(a) = active.as_mut() {
                if Instant::now() >= next_beat {
                    self.beat(a);
                }
                self.pump(a);
            }
            if Instant::now() >= next_beat {
                next_beat = Instant::now() + self.heartbeat;
            }
        }
    }

    fn commit(&self) -> Lsn {
        Lsn(self.shared.commit.load(AtomicOrdering::Acquire))
    }

    fn truncate_peer(&self, a: &Active, peer: NodeId) {
        self.transport.send(
            peer,
            ReplMessage::Truncate {
                partition: self.partition,
                epoch: a.meta.epoch,
                keep: a.meta.epoch_start,
            },
        );
    }

    fn beat(&self, a: &mut Active) {
        a.window.check_timeouts(self.now());
        for (&peer, &synced) in &a.synced {
            if synced {
                self.transport.send(
                    peer,
                    ReplMessage::AppendEntries {
                        partition: self.partition,
                        epoch: a.meta.epoch,
                        leader_commit: self.commit(),
                        records: Vec::new(),
                    },
                );
            } else {
                self.truncate_peer(a, peer);
            }
        }
    }

    /// Sends every available batch to every synced peer, without waiting
    /// for earlier batches to be acknowledged.
    fn pump(&self, a: &mut Active) {
        let now = self.now();
        let ctl = self.ctl_tx.clone();
        let mut fetch = move |start: Lsn, max: usize| -> Vec<LogRecord> {
            let (tx, rx) = bounded(1);
            if ctl.send(CtlTask::Fetch { start, max, reply: tx }).is_err() {
                return Vec::new();
            }
            rx.recv_timeout(Duration::from_secs(5)).unwrap_or_default()
        };
        let peers: Vec<NodeId> = a.synced.iter().filter(|(_, &s)| s).map(|(&p, _)| p).collect();
        for peer in peers {
            while let Some(records) = a.window.next_batch(peer, now, &mut fetch) {
                self.transport.send(
                    peer,
                    ReplMessage::AppendEntries {
                        partition: self.partition,
                        epoch: a.meta.epoch,
                        leader_commit: self.commit(),
                        records,
                    },
                );
            }
        }
    }
}

struct ReplyWorker {
    node: NodeId,
    peers: Vec<NodeId>,
    ctl_tx: Sender<CtlTask>,
    shared: Arc<Shared>,
}

impl ReplyWorker {
    fn run(self, rx: Receiver<ReplyEvent>) {
        let mut state: Option<(QuorumTracker, ReplyQueue<(Responder, Response)>)> = None;
        let mut published = Lsn::NONE;
        while let Ok(first) = rx.recv() {
            let mut events = vec![first];
            while let Ok(ev) = rx.try_recv() {
                events.push(ev);
            }
            for ev in events {
                match ev {
                    ReplyEvent::Stop => return,
                    ReplyEvent::Activate { flushed } => {
                        let mut t = QuorumTracker::new(self.node, &self.peers);
                        t.set_dispatched(flushed);
                        t.on_ack(self.node, flushed);
                        state = Some((t, ReplyQueue::new()));
                    }
                    // Dropping the queue drops the responders: waiting
                    // clients learn that leadership moved.
                    ReplyEvent::Deactivate => state = None,
                    _ if state.is_none() => {}
                    ReplyEvent::Dispatched(lsn) => state.as_mut().unwrap().0.set_dispatched(lsn),
                    ReplyEvent::Pending(lsn, reply, resp) => state.as_mut().unwrap().1.push(lsn, (reply, resp)),
                    ReplyEvent::LocalAck(lsn) => {
                        state.as_mut().unwrap().0.on_ack(self.node, lsn);
                    }
                    ReplyEvent::PeerAck(node, lsn) => {
                        state.as_mut().unwrap().0.on_ack(node, lsn);
                    }
                }
            }
            let Some((tracker, replies)) = state.as_mut() else { continue };
            let commit = tracker.commit();
            self.shared.min_mark.store(tracker.min_mark().0, AtomicOrdering::Release);
            if commit > published {
                published = commit;
                self.shared.commit.fetch_max(commit.0, AtomicOrdering::AcqRel);
                let _ = self.ctl_tx.send(CtlTask::Commit);
            }
            for (_, (reply, resp)) in replies.drain_committed(commit) {
                let _ = reply.send(Ok(resp));
            }
        }
    }
}
