//! Leader-side bookkeeping: per-node acknowledgement marks, pending replies,
//! and the per-peer send cursors that let batches be pipelined.
//!
//! Each piece is plain single-owner state so that the threaded runtime can
//! give each to a different stage, and the simulator can drive them all from
//! one loop.

use std::collections::{BTreeMap, VecDeque};

use tracing::warn;

use crate::types::{quorum, Lsn, NodeId};
use crate::wal::LogRecord;

/// Cumulative acknowledgement marks, one per replica (local node included).
///
/// A node's mark `m` means it holds every record up to `m` durably, so the
/// ack set of record `u` is `{n : mark(n) >= u}`.
#[derive(Clone, Debug)]
pub struct QuorumTracker {
    local: NodeId,
    marks: BTreeMap<NodeId, Lsn>,
    dispatched: Lsn,
}

impl QuorumTracker {
    /// `peers` excludes the local node.
    pub fn new(local: NodeId, peers: &[NodeId]) -> QuorumTracker {
        let mut marks: BTreeMap<NodeId, Lsn> = peers.iter().map(|&p| (p, Lsn::NONE)).collect();
        marks.insert(local, Lsn::NONE);
        QuorumTracker {
            local,
            marks,
            dispatched: Lsn::NONE,
        }
    }

    pub fn cluster_size(&self) -> usize {
        self.marks.len()
    }

    pub fn local(&self) -> NodeId {
        self.local
    }

    /// Highest LSN handed to the channel so far.
    pub fn dispatched(&self) -> Lsn {
        self.dispatched
    }

    pub fn set_dispatched(&mut self, lsn: Lsn) {
        self.dispatched = self.dispatched.max(lsn);
    }

    /// Records `node`'s durable frontier. Returns false for unknown nodes.
    pub fn on_ack(&mut self, node: NodeId, flushed: Lsn) -> bool {
        match self.marks.get_mut(&node) {
            Some(m) => {
                *m = (*m).max(flushed);
                true
            }
            None => {
                warn!(node, "ack from unknown node ignored");
                false
            }
        }
    }

    pub fn mark(&self, node: NodeId) -> Option<Lsn> {
        self.marks.get(&node).copied()
    }

    /// Number of replicas durably holding `lsn`.
    pub fn ack_count(&self, lsn: Lsn) -> usize {
        self.marks.values().filter(|&&m| m >= lsn).count()
    }

    /// Highest LSN held by a quorum that includes this node; every LSN at
    /// or below it is committed. Never beyond what has been dispatched, so a
    /// mark for an LSN the channel has not produced yet acknowledges nothing.
    ///
    /// Requiring the local copy means every acknowledged record is in the
    /// leader's log, so a restarted leader can safely cut followers back to
    /// its own log.
    pub fn commit(&self) -> Lsn {
        let mut marks: Vec<Lsn> = self.marks.values().copied().collect();
        marks.sort_unstable_by(|a, b| b.cmp(a));
        marks[quorum(marks.len()) - 1].min(self.marks[&self.local]).min(self.dispatched)
    }

    /// Lowest mark over all replicas: records at or below it are held by
    /// everyone.
    pub fn min_mark(&self) -> Lsn {
        self.marks.values().copied().min().unwrap_or(Lsn::NONE).min(self.dispatched)
    }
}

/// Replies waiting for their record to commit, in LSN order.
#[derive(Debug)]
pub struct ReplyQueue<T> {
    pending: VecDeque<(Lsn, T)>,
}

impl<T> Default for ReplyQueue<T> {
    fn default() -> Self {
        ReplyQueue {
            pending: VecDeque::new(),
        }
    }
}

impl<T> ReplyQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the reply for `lsn`. LSNs must be pushed in order.
    pub fn push(&mut self, lsn: Lsn, reply: T) {
        debug_assert!(self.pending.back().map_or(true, |(l, _)| *l < lsn));
        self.pending.push_back((lsn, reply));
    }

    /// Removes and returns every reply at or below `commit`, each exactly once.
    pub fn drain_committed(&mut self, commit: Lsn) -> Vec<(Lsn, T)> {
        let n = self.pending.partition_point(|(l, _)| *l <= commit);
        self.pending.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn oldest(&self) -> Option<Lsn> {
        self.pending.front().map(|(l, _)| *l)
    }
}

#[derive(Clone, Copy, Debug)]
struct PeerCursor {
    /// Next LSN to send.
    next: Lsn,
    /// Highest LSN the peer has confirmed.
    acked: Lsn,
    connected: bool,
    /// Time of the last progress (send from the acked point, or ack).
    last_progress: u64,
}

/// Per-peer send cursors over a window of recently dispatched records.
///
/// Batches go out as soon as records are available, without waiting for
/// earlier batches to be acknowledged. A peer that falls behind the retained
/// window is served from the log by the caller-supplied fetch function.
#[derive(Debug)]
pub struct SendWindow {
    retained: VecDeque<LogRecord>,
    /// LSN of `retained[0]`, or the next LSN to be pushed when empty.
    first: Lsn,
    peers: BTreeMap<NodeId, PeerCursor>,
    max_batch: usize,
    max_retained: usize,
    resend_after: u64,
}

impl SendWindow {
    /// `last_lsn` is the last record already in the log; new pushes continue
    /// after it. `resend_after` is the retransmission timeout in the caller's
    /// time unit.
    pub fn new(peers: &[NodeId], last_lsn: Lsn, max_batch: usize, max_retained: usize, resend_after: u64) -> SendWindow {
        SendWindow {
            retained: VecDeque::new(),
            first: last_lsn.next(),
            peers: peers
                .iter()
                .map(|&p| {
                    (
                        p,
                        PeerCursor {
                            next: last_lsn.next(),
                            acked: Lsn::NONE,
                            connected: true,
                            last_progress: 0,
                        },
                    )
                })
                .collect(),
            max_batch: max_batch.max(1),
            max_retained: max_retained.max(1),
            resend_after,
        }
    }

    /// Last LSN pushed.
    pub fn last_lsn(&self) -> Lsn {
        Lsn(self.first.0 + self.retained.len() as u64 - 1)
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.peers.keys().copied()
    }

    /// Adds the next dispatched record. Records must be contiguous.
    pub fn push(&mut self, rec: LogRecord) {
        assert_eq!(rec.lsn, self.last_lsn().next(), "send window records must be contiguous");
        self.retained.push_back(rec);
        self.trim();
    }

    /// The next batch for `peer`, or `None` when it is disconnected or
    /// caught up. Records older than the retained window come from `fetch`
    /// (start LSN, max count).
    pub fn next_batch(
        &mut self,
        peer: NodeId,
        now: u64,
        fetch: &mut dyn FnMut(Lsn, usize) -> Vec<LogRecord>,
    ) -> Option<Vec<LogRecord>> {
        let last = self.last_lsn();
        let max_batch = self.max_batch;
        let first = self.first;
        let c = self.peers.get_mut(&peer)?;
        if !c.connected || c.next > last {
            return None;
        }
        if c.next == c.acked.next() {
            // Sending from the acknowledged point: restart the timer.
            c.last_progress = now;
        }
        let batch: Vec<LogRecord> = if c.next < first {
            let mut recs = fetch(c.next, max_batch);
            recs.truncate(max_batch.min((first.0 - c.next.0) as usize));
            recs
        } else {
            let start = (c.next.0 - first.0) as usize;
            let end = (start + max_batch).min(self.retained.len());
            self.retained.range(start..end).cloned().collect()
        };
        match batch.last() {
            Some(r) if batch[0].lsn == c.next => {
                c.next = r.lsn.next();
                Some(batch)
            }
            _ => {
                warn!(peer, next = %c.next, "catch-up fetch returned nothing usable");
                None
            }
        }
    }

    /// Cumulative ack from `peer`.
    pub fn on_ack(&mut self, peer: NodeId, flushed: Lsn, now: u64) {
        if let Some(c) = self.peers.get_mut(&peer) {
            if flushed > c.acked {
                c.acked = flushed;
                c.last_progress = now;
            }
            if c.next <= flushed {
                c.next = flushed.next();
            }
        }
        self.trim();
    }

    /// The peer reported a gap: resend from `expected`.
    pub fn on_nack(&mut self, peer: NodeId, expected: Lsn, now: u64) {
        if let Some(c) = self.peers.get_mut(&peer) {
            let held = Lsn(expected.0.saturating_sub(1));
            if held > c.acked {
                c.acked = held;
            }
            c.next = expected.max(Lsn(1));
            c.last_progress = now;
        }
        self.trim();
    }

    /// Connection lost: everything unacknowledged is resent on reconnect.
    pub fn on_disconnect(&mut self, peer: NodeId) {
        if let Some(c) = self.peers.get_mut(&peer) {
            c.connected = false;
            c.next = c.acked.next();
        }
    }

    pub fn on_connect(&mut self, peer: NodeId, now: u64) {
        if let Some(c) = self.peers.get_mut(&peer) {
            c.connected = true;
            c.next = c.acked.next();
            c.last_progress = now;
        }
    }

    /// Rewinds peers whose unacknowledged records have seen no progress for
    /// the retransmission timeout (lost messages). Returns rewound peers.
    pub fn check_timeouts(&mut self, now: u64) -> Vec<NodeId> {
        let mut rewound = Vec::new();
        for (&peer, c) in self.peers.iter_mut() {
            if c.connected && c.next > c.acked.next() && now.saturating_sub(c.last_progress) >= self.resend_after {
                c.next = c.acked.next();
                c.last_progress = now;
                rewound.push(peer);
            }
        }
        rewound
    }

    /// Records sent to `peer` but not yet acknowledged.
    pub fn in_flight(&self, peer: NodeId) -> u64 {
        self.peers
            .get(&peer)
            .map_or(0, |c| c.next.0.saturating_sub(c.acked.0 + 1))
    }

    pub fn acked(&self, peer: NodeId) -> Option<Lsn> {
        self.peers.get(&peer).map(|c| c.acked)
    }

    pub fn next_to_send(&self, peer: NodeId) -> Option<Lsn> {
        self.peers.get(&peer).map(|c| c.next)
    }

    pub fn retained_len(&self) -> usize {
        self.retained.len()
    }

    /// Drops records every peer has, then enforces the size cap (dropped
    /// unacknowledged records are fetched from the log if needed).
    fn trim(&mut self) {
        let min_acked = self.peers.values().map(|c| c.acked).min().unwrap_or(self.last_lsn());
        while self.retained.front().is_some_and(|r| r.lsn <= min_acked) || self.retained.len() > self.max_retained {
            self.retained.pop_front();
            self.first = self.first.next();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::Bytes;

    fn rec(lsn: u64) -> LogRecord {
        LogRecord::put(0, Lsn(lsn), Bytes::from(format!("k{lsn}")), Bytes::from_static(b"v"))
    }

    fn no_fetch() -> impl FnMut(Lsn, usize) -> Vec<LogRecord> {
        |_, _| panic!("unexpected log fetch")
    }

    #[test]
    fn three_nodes_need_local_plus_one() {
        let mut q = QuorumTracker::new(1, &[2, 3]);
        q.set_dispatched(Lsn(5));
        q.on_ack(1, Lsn(5));
        assert_eq!(q.ack_count(Lsn(5)), 1);
        assert_eq!(q.commit(), Lsn(0), "local ack alone is not a quorum");
        q.on_ack(3, Lsn(3));
        assert_eq!(q.commit(), Lsn(3));
        assert_eq!(q.ack_count(Lsn(3)), 2);
        q.on_ack(2, Lsn(5));
        assert_eq!(q.commit(), Lsn(5));
        assert_eq!(q.min_mark(), Lsn(3));
    }

    #[test]
    fn followers_alone_do_not_commit() {
        let mut q = QuorumTracker::new(1, &[2, 3]);
        q.set_dispatched(Lsn(5));
        q.on_ack(2, Lsn(5));
        q.on_ack(3, Lsn(5));
        q.on_ack(1, Lsn(2));
        assert_eq!(q.commit(), Lsn(2));
        q.on_ack(1, Lsn(5));
        assert_eq!(q.commit(), Lsn(5));
    }

    #[test]
    fn single_node_commits_on_local_ack() {
        let mut q = QuorumTracker::new(7, &[]);
        q.set_dispatched(Lsn(4));
        q.on_ack(7, Lsn(4));
        assert_eq!(q.commit(), Lsn(4));
    }

    #[test]
    fn acks_are_cumulative_and_idempotent() {
        let mut q = QuorumTracker::new(1, &[2, 3]);
        q.set_dispatched(Lsn(10));
        q.on_ack(1, Lsn(10));
        q.on_ack(2, Lsn(5));
        q.on_ack(2, Lsn(5));
        assert_eq!(q.ack_count(Lsn(5)), 2, "a duplicate ack does not count twice");
        q.on_ack(2, Lsn(3));
        assert_eq!(q.mark(2), Some(Lsn(5)), "marks never regress");
        assert!(!q.on_ack(9, Lsn(10)));
        assert_eq!(q.commit(), Lsn(5));
    }

    #[test]
    fn ack_beyond_dispatched_acks_nothing_extra() {
        let mut q = QuorumTracker::new(1, &[2, 3]);
        q.set_dispatched(Lsn(4));
        q.on_ack(1, Lsn(4));
        q.on_ack(2, Lsn(100));
        assert_eq!(q.mark(2), Some(Lsn(100)));
        assert_eq!(q.commit(), Lsn(4));
        q.set_dispatched(Lsn(6));
        q.on_ack(1, Lsn(6));
        assert_eq!(q.commit(), Lsn(6));
    }

    #[test]
    fn replies_released_once_in_order() {
        let mut r = ReplyQueue::new();
        for l in 1..=5 {
            r.push(Lsn(l), l * 10);
        }
        assert!(r.drain_committed(Lsn(0)).is_empty());
        assert_eq!(r.drain_committed(Lsn(3)), vec![(Lsn(1), 10), (Lsn(2), 20), (Lsn(3), 30)]);
        assert!(r.drain_committed(Lsn(3)).is_empty());
        assert_eq!(r.oldest(), Some(Lsn(4)));
        assert_eq!(r.drain_committed(Lsn(9)).len(), 2);
        assert!(r.is_empty());
    }

    #[test]
    fn pending_records_pack_into_one_batch() {
        let mut w = SendWindow::new(&[2], Lsn(0), 64, 1024, 1000);
        for l in 1..=3 {
            w.push(rec(l));
        }
        let b = w.next_batch(2, 0, &mut no_fetch()).unwrap();
        assert_eq!(b.iter().map(|r| r.lsn.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(w.next_batch(2, 0, &mut no_fetch()).is_none());
    }

    #[test]
    fn batches_pipeline_without_waiting_for_acks() {
        let mut w = SendWindow::new(&[2, 3], Lsn(0), 4, 1024, 1000);
        for l in 1..=4 {
            w.push(rec(l));
        }
        assert!(w.next_batch(2, 0, &mut no_fetch()).is_some());
        for l in 5..=8 {
            w.push(rec(l));
        }
        let second = w.next_batch(2, 0, &mut no_fetch()).unwrap();
        assert_eq!(second[0].lsn, Lsn(5));
        assert_eq!(w.in_flight(2), 8, "two batches in flight before any ack");
        w.on_ack(2, Lsn(4), 1);
        assert_eq!(w.in_flight(2), 4);
    }

    #[test]
    fn nack_and_disconnect_rewind() {
        let mut w = SendWindow::new(&[2], Lsn(0), 2, 1024, 1000);
        for l in 1..=6 {
            w.push(rec(l));
        }
        while w.next_batch(2, 0, &mut no_fetch()).is_some() {}
        w.on_nack(2, Lsn(3), 5);
        assert_eq!(w.acked(2), Some(Lsn(2)));
        assert_eq!(w.next_batch(2, 5, &mut no_fetch()).unwrap()[0].lsn, Lsn(3));
        w.on_disconnect(2);
        assert!(w.next_batch(2, 6, &mut no_fetch()).is_none());
        w.on_connect(2, 7);
        assert_eq!(w.next_to_send(2), Some(Lsn(3)));
    }

    #[test]
    fn silent_loss_rewinds_after_timeout() {
        let mut w = SendWindow::new(&[2], Lsn(0), 8, 1024, 100);
        for l in 1..=3 {
            w.push(rec(l));
        }
        w.next_batch(2, 10, &mut no_fetch()).unwrap();
        assert!(w.check_timeouts(50).is_empty());
        assert_eq!(w.check_timeouts(110), vec![2]);
        assert_eq!(w.next_batch(2, 110, &mut no_fetch()).unwrap()[0].lsn, Lsn(1));
    }

    #[test]
    fn lagging_peer_is_served_from_the_log() {
        let mut w = SendWindow::new(&[2, 3], Lsn(10), 4, 2, 1000);
        for l in 11..=16 {
            w.push(rec(l));
        }
        // Only 15..16 retained; peer 2 reports it has 8.
        w.on_nack(2, Lsn(9), 0);
        let mut fetched = Vec::new();
        let mut fetch = |start: Lsn, n: usize| {
            fetched.push((start, n));
            (start.0..start.0 + n as u64).map(rec).collect()
        };
        let b = w.next_batch(2, 0, &mut fetch).unwrap();
        assert_eq!(b.iter().map(|r| r.lsn.0).collect::<Vec<_>>(), vec![9, 10, 11, 12]);
        let b = w.next_batch(2, 0, &mut fetch).unwrap();
        assert_eq!(b.iter().map(|r| r.lsn.0).collect::<Vec<_>>(), vec![13, 14]);
        let b = w.next_batch(2, 0, &mut fetch).unwrap();
        assert_eq!(b.iter().map(|r| r.lsn.0).collect::<Vec<_>>(), vec![15, 16]);
        assert_eq!(fetched.len(), 2);
    }
}
