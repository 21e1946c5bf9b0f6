//! TCP front end. One listening port carries both client requests and
//! replication streams; a peer connection announces itself with a HELLO
//! frame and then sends replication frames only.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use logstore_core::engine::{Engine, Op, Request, Response, Transport};
use logstore_core::replication::ReplMessage;
use logstore_core::{Lsn, NodeId};
use tracing::{debug, info, warn};

use crate::client::Client;
use crate::config::ServerConfig;
use crate::protocol::{read_raw, write_message, ClientRequest, ClientResponse, ProtocolError, StatsEntry, REQ_HELLO};

const PEER_TIMEOUT: Duration = Duration::from_millis(500);
const RECONNECT_BACKOFF: Duration = Duration::from_millis(100);

/// Replication transport over one outbound TCP connection per peer.
///
/// Sends never block the caller: each peer has a writer thread that drains
/// an unbounded queue. While a peer is unreachable its messages are
/// dropped; the leader's retransmission covers the gap.
pub struct TcpTransport {
    queues: BTreeMap<NodeId, Sender<ReplMessage>>,
}

impl TcpTransport {
    pub fn new(local: NodeId, peers: &BTreeMap<NodeId, SocketAddr>) -> TcpTransport {
        let mut queues = BTreeMap::new();
        for (&node, &addr) in peers {
            let (tx, rx) = unbounded();
            queues.insert(node, tx);
            thread::Builder::new()
                .name(format!("peer-{node}"))
                .spawn(move || peer_writer(local, node, addr, rx))
                .expect("spawn peer writer");
        }
        TcpTransport { queues }
    }
}

impl Transport for TcpTransport {
    fn send(&self, to: NodeId, msg: ReplMessage) {
        match self.queues.get(&to) {
            Some(q) => {
                let _ = q.send(msg);
            }
            None => warn!(to, "message for unknown peer dropped"),
        }
    }
}

fn peer_writer(local: NodeId, node: NodeId, addr: SocketAddr, rx: Receiver<ReplMessage>) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    loop {
        let msg = match rx.recv_timeout(RECONNECT_BACKOFF) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        if conn.is_none() {
            match open_peer(local, addr) {
                Ok(c) => {
                    info!(node, %addr, "connected to peer");
                    conn = Some(c);
                }
                Err(e) => {
                    debug!(node, %addr, %e, "peer unreachable; dropping message");
                    // Drop what queued up meanwhile instead of replaying a
                    // stale burst later.
                    thread::sleep(RECONNECT_BACKOFF);
                    while rx.try_recv().is_ok() {}
                    continue;
                }
            }
        }
        let w = conn.as_mut().expect("connected");
        let mut res = write_message(w, &msg.encode_frame());
        while res.is_ok() {
            match rx.try_recv() {
                Ok(m) => res = std::io::Write::write_all(w, &m.encode_frame()).map_err(Into::into),
                Err(_) => break,
            }
        }
        if let Err(e) = res.and_then(|_| std::io::Write::flush(w).map_err(Into::into)) {
            warn!(node, %e, "peer connection lost");
            conn = None;
        }
    }
}

fn open_peer(local: NodeId, addr: SocketAddr) -> Result<BufWriter<TcpStream>, ProtocolError> {
    let s = TcpStream::connect_timeout(&addr, PEER_TIMEOUT)?;
    s.set_nodelay(true)?;
    s.set_write_timeout(Some(Duration::from_secs(5)))?;
    let mut w = BufWriter::new(s);
    write_message(&mut w, &ClientRequest::Hello { node: local }.encode())?;
    Ok(w)
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] logstore_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A running node.
pub struct Server {
    engine: Arc<Engine>,
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    /// Recovers the engine, then starts listening.
    pub fn start(cfg: ServerConfig) -> Result<Server, ServerError> {
        let listener = TcpListener::bind(cfg.listen).map_err(|source| ServerError::Bind {
            addr: cfg.listen,
            source,
        })?;
        let local_addr = listener.local_addr()?;
        let transport = Arc::new(TcpTransport::new(cfg.node_id, &cfg.peers));
        let engine = Arc::new(Engine::start(cfg.engine.clone(), transport)?);
        for r in engine.recovery_reports() {
            info!(
                records_read = r.records_read,
                flushed = %r.flushed,
                elapsed_ms = r.elapsed.as_millis() as u64,
                "partition recovered"
            );
        }
        let stop = Arc::new(AtomicBool::new(false));
        let ctx = Arc::new(Ctx {
            engine: engine.clone(),
            peers: cfg.peers.clone(),
        });
        let flag = stop.clone();
        let acceptor = thread::Builder::new().name("accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::Acquire) {
                    break;
                }
                match conn {
                    Ok(s) => {
                        let ctx = ctx.clone();
                        let _ = thread::Builder::new().name("conn".into()).spawn(move || {
                            let peer = s.peer_addr().ok();
                            if let Err(e) = ctx.serve_connection(s) {
                                debug!(?peer, %e, "connection closed");
                            }
                        });
                    }
                    Err(e) => warn!(%e, "accept failed"),
                }
            }
        })?;
        info!(node = cfg.node_id, addr = %local_addr, partitions = cfg.engine.partitions, "serving");
        Ok(Server {
            engine,
            local_addr,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Stops accepting, then flushes and checkpoints every partition.
    pub fn shutdown(&mut self) {
        if let Some(a) = self.acceptor.take() {
            self.stop.store(true, Ordering::Release);
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.local_addr, PEER_TIMEOUT);
            let _ = a.join();
        }
        self.engine.shutdown();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Ctx {
    engine: Arc<Engine>,
    peers: BTreeMap<NodeId, SocketAddr>,
}

fn view(l: Lsn) -> Option<Lsn> {
    (!l.is_none()).then_some(l)
}

impl Ctx {
    fn serve_connection(&self, stream: TcpStream) -> Result<(), ProtocolError> {
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let (t, payload) = match read_raw(&mut reader) {
                Ok(f) => f,
                Err(ProtocolError::Closed) => return Ok(()),
                Err(e) => return Err(e),
            };
            if t == REQ_HELLO {
                let ClientRequest::Hello { node } = ClientRequest::decode(t, &payload)? else {
                    unreachable!()
                };
                return self.serve_peer(node, &mut reader);
            }
            let resp = match ClientRequest::decode(t, &payload) {
                Ok(req) => self.handle(req),
                Err(e) => ClientResponse::Error {
                    code: crate::protocol::ErrorCode::BadRequest,
                    leader: 0,
                    message: e.to_string(),
                },
            };
            write_message(&mut writer, &resp.encode())?;
        }
    }

    fn serve_peer(&self, node: NodeId, reader: &mut BufReader<TcpStream>) -> Result<(), ProtocolError> {
        if !self.peers.contains_key(&node) {
            warn!(node, "replication stream from a node that is not a configured peer");
            return Ok(());
        }
        debug!(node, "peer stream opened");
        while let Some(msg) = ReplMessage::read_from(reader)? {
            self.engine.on_message(node, msg);
        }
        Ok(())
    }

    fn handle(&self, req: ClientRequest) -> ClientResponse {
        let op = match req {
            ClientRequest::Get { key, view: v } => (Op::Get(key), view(v)),
            ClientRequest::Put { key, value } => (Op::Put(key, value), None),
            ClientRequest::Delete { key } => (Op::Delete(key), None),
            ClientRequest::Range { start, end, limit, view: v } => (
                Op::Range {
                    start,
                    end,
                    limit: limit as usize,
                },
                view(v),
            ),
            ClientRequest::BatchGet { keys, view: v } => (Op::BatchGet(keys), view(v)),
            ClientRequest::Stats => {
                return match self.engine.statuses() {
                    Ok(s) => ClientResponse::Stats(s.iter().map(StatsEntry::from).collect()),
                    Err(e) => ClientResponse::from_error(&e),
                }
            }
            ClientRequest::Promote { partition } => return self.promote(partition),
            ClientRequest::Hello { .. } => {
                return ClientResponse::Error {
                    code: crate::protocol::ErrorCode::BadRequest,
                    leader: 0,
                    message: "unexpected HELLO".into(),
                }
            }
        };
        let (op, read_view) = op;
        match self.engine.execute(Request { op, read_view }) {
            Ok(Response::Value(v)) => ClientResponse::Value(v),
            Ok(Response::Written { lsn }) => ClientResponse::Written { lsn },
            Ok(Response::Deleted { existed, lsn }) => ClientResponse::Deleted { existed, lsn },
            Ok(Response::Range(items)) => ClientResponse::Items(items),
            Ok(Response::Batch { items, path }) => ClientResponse::Batch {
                scan: path == logstore_core::engine::BatchPath::Scan,
                items,
            },
            Err(e) => ClientResponse::from_error(&e),
        }
    }

    /// Asks every reachable peer for its flushed LSN, then takes over.
    fn promote(&self, partition: u32) -> ClientResponse {
        let mut reachable = Vec::new();
        for (&node, addr) in &self.peers {
            let flushed = Client::connect(addr, PEER_TIMEOUT)
                .and_then(|mut c| c.call(&ClientRequest::Stats))
                .ok()
                .and_then(|r| match r {
                    ClientResponse::Stats(s) => s.into_iter().find(|e| e.partition == partition).map(|e| e.flushed),
                    _ => None,
                });
            match flushed {
                Some(f) => reachable.push((node, f)),
                None => info!(node, "peer unreachable during promotion"),
            }
        }
        match self.engine.promote(partition, reachable) {
            Ok(out) => ClientResponse::Promoted {
                epoch: out.epoch,
                flushed: out.flushed,
                elapsed_us: out.elapsed.as_micros() as u64,
            },
            Err(e) => ClientResponse::from_error(&e),
        }
    }
}
