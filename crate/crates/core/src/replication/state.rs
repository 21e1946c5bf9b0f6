//! Per-partition LSN frontier and the follower read gate.

use crate::types::Lsn;

/// The three LSN frontiers of a replica.
///
/// `flushed`: durable in the local log. `potential_commit`: known committed
/// on the leader. `replayed`: applied to the local index and visible to reads.
/// Always `replayed <= potential_commit <= flushed`, each non-decreasing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartitionLsnState {
    flushed: Lsn,
    potential_commit: Lsn,
    replayed: Lsn,
}

impl PartitionLsnState {
    /// State of a node that is the only authority on its log.
    pub fn all_at(lsn: Lsn) -> PartitionLsnState {
        PartitionLsnState {
            flushed: lsn,
            potential_commit: lsn,
            replayed: lsn,
        }
    }

    /// State of a replica that has `flushed` records but has not yet heard
    /// which of them are committed.
    pub fn uncommitted(flushed: Lsn) -> PartitionLsnState {
        PartitionLsnState {
            flushed,
            ..PartitionLsnState::default()
        }
    }

    pub fn flushed(&self) -> Lsn {
        self.flushed
    }

    pub fn potential_commit(&self) -> Lsn {
        self.potential_commit
    }

    pub fn replayed(&self) -> Lsn {
        self.replayed
    }

    pub fn advance_flushed(&mut self, lsn: Lsn) {
        self.flushed = self.flushed.max(lsn);
    }

    /// Raises the commit point, never beyond what is flushed locally.
    pub fn advance_commit(&mut self, lsn: Lsn) {
        self.potential_commit = self.potential_commit.max(lsn.min(self.flushed));
    }

    /// Makes everything known-committed visible. In this store the index is
    /// maintained as records arrive, so this is a pointer move.
    pub fn replay_to_commit(&mut self) -> bool {
        let moved = self.replayed < self.potential_commit;
        self.replayed = self.potential_commit;
        moved
    }

    /// Shrinks the frontier after a tail truncation, restoring the ordering.
    pub fn truncate(&mut self, keep: Lsn) {
        self.flushed = self.flushed.min(keep);
        self.potential_commit = self.potential_commit.min(keep);
        self.replayed = self.replayed.min(keep);
    }

    pub fn check_invariant(&self) -> bool {
        self.replayed <= self.potential_commit && self.potential_commit <= self.flushed
    }
}

/// Outcome of [`read_gate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadDecision {
    /// Serve from the local index. `advanced` is true when the replay
    /// pointer had to be moved first.
    ServeNow { advanced: bool },
    /// Wait until the commit point reaches `until`.
    Block { until: Lsn },
    /// The requested view is beyond anything this replica holds.
    Reject,
}

/// Decides whether a follower can serve a read at view `l`.
///
/// Views are inclusive: a view of `l` needs every record up to and including
/// `l` to be visible.
pub fn read_gate(l: Lsn, state: &mut PartitionLsnState) -> ReadDecision {
    if l <= state.replayed {
        ReadDecision::ServeNow { advanced: false }
    } else if l <= state.potential_commit {
        state.replay_to_commit();
        ReadDecision::ServeNow { advanced: true }
    } else if l <= state.flushed {
        ReadDecision::Block { until: l }
    } else {
        ReadDecision::Reject
    }
}

/// Follower frontier over leader frontier, clamped to `[0, 1]`; an empty
/// leader log counts as perfectly fresh.
pub fn freshness_score(follower_lsn: Lsn, leader_lsn: Lsn) -> f64 {
    if leader_lsn.0 == 0 {
        return 1.0;
    }
    (follower_lsn.0 as f64 / leader_lsn.0 as f64).clamp(0.0, 1.0)
}
