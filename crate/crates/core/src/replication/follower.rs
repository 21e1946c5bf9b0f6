//! Follower side of the replication protocol, plus leadership metadata.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use tracing::{info, warn};

use crate::engine::Partition;
use crate::error::{Error, Result};
use crate::types::{Lsn, NodeId, PartitionId};
use crate::wal::{sync_dir, LogRecord};

use super::wire::ReplMessage;

pub const EPOCH_FILE: &str = "EPOCH";

/// Leadership epoch of a partition replica, persisted next to its log.
///
/// `epoch_start` is the leader's last LSN when the epoch began; a replica
/// joining this epoch keeps its log only up to that point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochMeta {
    pub epoch: u64,
    pub epoch_start: Lsn,
}

impl Default for EpochMeta {
    fn default() -> Self {
        EpochMeta {
            epoch: 1,
            epoch_start: Lsn::NONE,
        }
    }
}

fn epoch_path(dir: &Path) -> PathBuf {
    dir.join(EPOCH_FILE)
}

impl EpochMeta {
    /// Reads the epoch file; a missing file means the initial epoch.
    pub fn load(dir: &Path) -> Result<EpochMeta> {
        let text = match fs::read_to_string(epoch_path(dir)) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(EpochMeta::default()),
            Err(e) => return Err(e.into()),
        };
        let mut parts = text.split_whitespace().map(str::parse::<u64>);
        match (parts.next(), parts.next()) {
            (Some(Ok(epoch)), Some(Ok(start))) => Ok(EpochMeta {
                epoch,
                epoch_start: Lsn(start),
            }),
            _ => Err(Error::CorruptManifest(format!("bad epoch file {text:?}"))),
        }
    }

    /// Atomically replaces the epoch file.
    pub fn store(&self, dir: &Path) -> Result<()> {
        let path = epoch_path(dir);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{} {}", self.epoch, self.epoch_start.0)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        sync_dir(dir)?;
        Ok(())
    }
}

/// Refuses promotion when a reachable peer holds a longer log.
pub fn check_promotion(local_flushed: Lsn, reachable: &[(NodeId, Lsn)]) -> Result<()> {
    match reachable.iter().max_by_key(|(_, l)| *l) {
        Some(&(peer, peer_flushed)) if peer_flushed > local_flushed => Err(Error::PromotionRefused {
            peer,
            peer_flushed,
            local_flushed,
        }),
        _ => Ok(()),
    }
}

/// A replica's view of one partition it follows.
#[derive(Clone, Debug)]
pub struct FollowerReplica {
    node: NodeId,
    partition: PartitionId,
    meta: EpochMeta,
}

impl FollowerReplica {
    pub fn new(node: NodeId, partition: PartitionId, meta: EpochMeta) -> FollowerReplica {
        FollowerReplica { node, partition, meta }
    }

    pub fn epoch(&self) -> u64 {
        self.meta.epoch
    }

    pub fn meta(&self) -> EpochMeta {
        self.meta
    }

    fn rejected(&self) -> ReplMessage {
        ReplMessage::EpochRejected {
            partition: self.partition,
            epoch: self.meta.epoch,
            node: self.node,
        }
    }

    fn ack(&self, flushed: Lsn) -> ReplMessage {
        ReplMessage::Ack {
            partition: self.partition,
            epoch: self.meta.epoch,
            node: self.node,
            last_flushed: flushed,
        }
    }

    /// Handles one replication message addressed to this replica, returning
    /// the response to send back (if any).
    pub fn handle(&mut self, p: &mut Partition, msg: ReplMessage) -> Result<Option<ReplMessage>> {
        match msg {
            ReplMessage::AppendEntries {
                epoch,
                leader_commit,
                records,
                ..
            } => self.on_append_entries(p, epoch, leader_commit, records).map(Some),
            ReplMessage::Truncate { epoch, keep, .. } => self.on_truncate(p, epoch, keep).map(Some),
            other => {
                warn!(partition = self.partition, ?other, "unexpected message on follower");
                Ok(None)
            }
        }
    }

    /// Appends a contiguous batch, group-flushes it, and applies the
    /// piggybacked commit point.
    ///
    /// Records at or below the local flushed LSN are duplicates and skipped;
    /// a batch starting past `flushed + 1` is answered with a NACK naming the
    /// expected LSN. Messages from any epoch other than ours are rejected; a
    /// newer leader first brings us into its epoch with a truncate.
    pub fn on_append_entries(
        &mut self,
        p: &mut Partition,
        epoch: u64,
        leader_commit: Lsn,
        records: Vec<LogRecord>,
    ) -> Result<ReplMessage> {
        if epoch != self.meta.epoch {
            return Ok(self.rejected());
        }
        let mut expected = p.last_lsn().next();
        let mut appended = false;
        for rec in records {
            if rec.lsn < expected {
                continue;
            }
            if rec.lsn > expected {
                // Keep what arrived in order, then ask for the gap.
                let flushed = p.flush()?;
                self.absorb_commit(p, leader_commit, flushed);
                return Ok(ReplMessage::Nack {
                    partition: self.partition,
                    epoch: self.meta.epoch,
                    node: self.node,
                    expected,
                });
            }
            p.apply(rec)?;
            expected = expected.next();
            appended = true;
        }
        let flushed = if appended { p.flush()? } else { p.lsn_state().flushed() };
        self.absorb_commit(p, leader_commit, flushed);
        Ok(self.ack(flushed))
    }

    fn absorb_commit(&self, p: &mut Partition, leader_commit: Lsn, flushed: Lsn) {
        let state = p.lsn_state_mut();
        state.advance_commit(leader_commit.min(flushed));
        state.replay_to_commit();
        debug_assert!(state.check_invariant());
    }

    /// Joins the sender's epoch, discarding anything above `keep`.
    pub fn on_truncate(&mut self, p: &mut Partition, epoch: u64, keep: Lsn) -> Result<ReplMessage> {
        if epoch < self.meta.epoch {
            return Ok(self.rejected());
        }
        if epoch > self.meta.epoch {
            let dropped = p.last_lsn().0.saturating_sub(keep.0);
            if dropped > 0 {
                info!(partition = self.partition, %keep, dropped, epoch, "discarding records from an older epoch");
            }
            p.truncate_after(keep)?;
            self.meta = EpochMeta {
                epoch,
                epoch_start: keep,
            };
            self.meta.store(p.dir())?;
        }
        let flushed = p.flush()?;
        Ok(self.ack(flushed))
    }
}
