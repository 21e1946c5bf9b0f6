//! Adaptive radix tree mapping keys to the log position of their newest
//! record.
//!
//! Every entry carries the LSN of the record it points at; `put` only moves
//! an entry forward in LSN order, which makes log replay idempotent.

mod node;
mod snapshot;
#[cfg(test)]
mod tests;

use std::ops::ControlFlow;

use bytes::Bytes;

use crate::types::Lsn;
use crate::wal::LogPosition;
use node::{Inner, Leaf, Node};

pub use node::NodeKind;
pub use snapshot::{read_snapshot_header, SnapshotInfo, SNAPSHOT_TRAILER_LEN};

/// One key's index entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub key: Bytes,
    pub position: LogPosition,
    pub version_lsn: Lsn,
}

impl From<&Leaf> for IndexEntry {
    fn from(l: &Leaf) -> Self {
        IndexEntry {
            key: l.key.clone(),
            position: l.position,
            version_lsn: l.version,
        }
    }
}

/// Result of [`RadixIndex::put`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    /// The older entry that was replaced.
    Replaced(IndexEntry),
    /// The existing entry is at least as new; nothing changed.
    Stale(IndexEntry),
}

#[derive(Debug, Default)]
pub struct RadixIndex {
    root: Option<Node>,
    len: usize,
    max_version: Lsn,
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixIndex {
    pub fn new() -> RadixIndex {
        RadixIndex::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Highest version LSN ever stored (not lowered by removals).
    pub fn max_version(&self) -> Lsn {
        self.max_version
    }

    pub fn clear(&mut self) {
        *self = RadixIndex::new();
    }

    pub fn get(&self, key: &[u8]) -> Option<IndexEntry> {
        self.find(key).map(IndexEntry::from)
    }

    fn find(&self, key: &[u8]) -> Option<&Leaf> {
        let mut node = self.root.as_ref()?;
        let mut depth = 0;
        loop {
            match node {
                Node::Leaf(l) => return (l.key.as_ref() == key).then_some(&**l),
                Node::Inner(inner) => {
                    if !key[depth..].starts_with(&inner.prefix) {
                        return None;
                    }
                    depth += inner.prefix.len();
                    if key.len() == depth {
                        return inner.terminal.as_deref();
                    }
                    node = inner.children.get(key[depth])?;
                    depth += 1;
                }
            }
        }
    }

    /// Points `key` at `position` if `version` is newer than what is stored.
    pub fn put(&mut self, key: Bytes, position: LogPosition, version: Lsn) -> PutOutcome {
        debug_assert!(!key.is_empty(), "empty keys are rejected before the index");
        let leaf = Box::new(Leaf { key, position, version });
        let outcome = match self.root.as_mut() {
            None => {
                self.root = Some(Node::Leaf(leaf));
                PutOutcome::Inserted
            }
            Some(root) => insert(root, leaf, 0),
        };
        if !matches!(outcome, PutOutcome::Stale(_)) {
            self.max_version = self.max_version.max(version);
        }
        if outcome == PutOutcome::Inserted {
            self.len += 1;
        }
        outcome
    }

    /// Moves an entry to a new position only if it still holds `version`.
    /// Used to apply compaction output without clobbering newer writes.
    pub fn relocate(&mut self, key: &[u8], version: Lsn, position: LogPosition) -> bool {
        match self.find_mut(key) {
            Some(leaf) if leaf.version == version => {
                leaf.position = position;
                true
            }
            _ => false,
        }
    }

    fn find_mut(&mut self, key: &[u8]) -> Option<&mut Leaf> {
        let mut node = self.root.as_mut()?;
        let mut depth = 0;
        loop {
            match node {
                Node::Leaf(l) => return (l.key.as_ref() == key).then_some(&mut **l),
                Node::Inner(inner) => {
                    if !key[depth..].starts_with(&inner.prefix) {
                        return None;
                    }
                    depth += inner.prefix.len();
                    if key.len() == depth {
                        return inner.terminal.as_deref_mut();
                    }
                    node = inner.children.get_mut(key[depth])?;
                    depth += 1;
                }
            }
        }
    }

    pub fn remove(&mut self, key: &[u8]) -> Option<IndexEntry> {
        self.remove_where(key, |_| true)
    }

    /// Removes the entry only if its version is older than `lsn` (a
    /// tombstone at `lsn` must not erase a newer write).
    pub fn remove_if_older(&mut self, key: &[u8], lsn: Lsn) -> Option<IndexEntry> {
        self.remove_where(key, |l| l.version < lsn)
    }

    fn remove_where(&mut self, key: &[u8], pred: impl Fn(&Leaf) -> bool) -> Option<IndexEntry> {
        let root = self.root.as_mut()?;
        let removed = match remove(root, key, 0, &pred) {
            Removal::NotFound => return None,
            Removal::Removed(l) => l,
            Removal::RemovedEmpty(l) => {
                self.root = None;
                l
            }
        };
        self.len -= 1;
        Some(IndexEntry::from(&*removed))
    }

    /// Visits every entry in ascending key order until `f` breaks.
    pub fn for_each<B>(&self, mut f: impl FnMut(&IndexEntry) -> ControlFlow<B>) -> ControlFlow<B> {
        self.range_visit(&[], None, &mut f)
    }

    /// Entries with `start <= key < end`, ascending, at most `limit`.
    pub fn range(&self, start: &[u8], end: &[u8], limit: usize) -> Vec<IndexEntry> {
        let mut out = Vec::new();
        if limit == 0 || start >= end {
            return out;
        }
        let _ = self.range_visit(start, Some(end), &mut |e: &IndexEntry| {
            out.push(e.clone());
            if out.len() >= limit {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        out
    }

    /// Ordered visit of entries in `[start, end)`; `end = None` is unbounded.
    pub fn range_visit<B>(
        &self,
        start: &[u8],
        end: Option<&[u8]>,
        f: &mut impl FnMut(&IndexEntry) -> ControlFlow<B>,
    ) -> ControlFlow<B> {
        let Some(root) = self.root.as_ref() else {
            return ControlFlow::Continue(());
        };
        let mut path = Vec::new();
        match visit(root, &mut path, start, end, f) {
            ControlFlow::Break(Exit::User(b)) => ControlFlow::Break(b),
            ControlFlow::Break(Exit::End) | ControlFlow::Continue(()) => ControlFlow::Continue(()),
        }
    }

    /// All entries in key order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        let mut out = Vec::with_capacity(self.len);
        let _ = self.for_each(|e| {
            out.push(e.clone());
            ControlFlow::<()>::Continue(())
        });
        out
    }

    /// Layout of the node reached by following `path` exactly: an inner
    /// node whose full path equals `path`, or the leaf for that key.
    pub fn kind_at(&self, path: &[u8]) -> Option<NodeKind> {
        let mut node = self.root.as_ref()?;
        let mut depth = 0;
        loop {
            match node {
                Node::Leaf(l) => return (l.key.as_ref() == path).then_some(NodeKind::Leaf),
                Node::Inner(inner) => {
                    let rest = &path[depth..];
                    if rest.len() <= inner.prefix.len() {
                        return (rest == inner.prefix.as_slice()).then(|| inner.children.kind());
                    }
                    if !rest.starts_with(&inner.prefix) {
                        return None;
                    }
                    depth += inner.prefix.len();
                    node = inner.children.get(path[depth])?;
                    depth += 1;
                }
            }
        }
    }

    /// Layout of the root node.
    pub fn root_kind(&self) -> Option<NodeKind> {
        self.root.as_ref().map(|n| match n {
            Node::Leaf(_) => NodeKind::Leaf,
            Node::Inner(i) => i.children.kind(),
        })
    }
}

fn insert(node: &mut Node, leaf: Box<Leaf>, depth: usize) -> PutOutcome {
    match node {
        Node::Leaf(existing) => {
            if existing.key == leaf.key {
                return replace_leaf(existing, leaf);
            }
            let lcp = common_prefix(&existing.key[depth..], &leaf.key[depth..]);
            let split = Node::Inner(Box::new(Inner::new(leaf.key[depth..depth + lcp].to_vec())));
            let old = std::mem::replace(node, split);
            let (Node::Inner(inner), Node::Leaf(old)) = (node, old) else {
                unreachable!()
            };
            inner.place_leaf(old, depth + lcp);
            inner.place_leaf(leaf, depth + lcp);
            PutOutcome::Inserted
        }
        Node::Inner(inner) => {
            let m = common_prefix(&inner.prefix, &leaf.key[depth..]);
            if m < inner.prefix.len() {
                let split = Node::Inner(Box::new(Inner::new(inner.prefix[..m].to_vec())));
                let old = std::mem::replace(node, split);
                let (Node::Inner(new), Node::Inner(mut old)) = (node, old) else {
                    unreachable!()
                };
                let b = old.prefix[m];
                old.prefix.drain(..=m);
                new.children.insert(b, Node::Inner(old));
                new.place_leaf(leaf, depth + m);
                return PutOutcome::Inserted;
            }
            let d = depth + inner.prefix.len();
            if leaf.key.len() == d {
                return match inner.terminal.as_mut() {
                    Some(t) => replace_leaf(t, leaf),
                    None => {
                        inner.terminal = Some(leaf);
                        PutOutcome::Inserted
                    }
                };
            }
            let b = leaf.key[d];
            match inner.children.get_mut(b) {
                Some(child) => insert(child, leaf, d + 1),
                None => {
                    inner.children.insert(b, Node::Leaf(leaf));
                    PutOutcome::Inserted
                }
            }
        }
    }
}

fn replace_leaf(existing: &mut Box<Leaf>, new: Box<Leaf>) -> PutOutcome {
    if new.version > existing.version {
        let old = std::mem::replace(existing, new);
        PutOutcome::Replaced(IndexEntry::from(&*old))
    } else {
        PutOutcome::Stale(IndexEntry::from(&**existing))
    }
}

enum Removal {
    NotFound,
    Removed(Box<Leaf>),
    /// The node itself is gone; the parent must unlink it.
    RemovedEmpty(Box<Leaf>),
}

fn remove(node: &mut Node, key: &[u8], depth: usize, pred: &impl Fn(&Leaf) -> bool) -> Removal {
    let Node::Inner(inner) = node else {
        let Node::Leaf(l) = node else { unreachable!() };
        if l.key.as_ref() == key && pred(l) {
            return Removal::RemovedEmpty(l.clone());
        }
        return Removal::NotFound;
    };
    if !key[depth..].starts_with(&inner.prefix) {
        return Removal::NotFound;
    }
    let d = depth + inner.prefix.len();
    let removed = if key.len() == d {
        match inner.terminal.take_if(|t| pred(t)) {
            Some(t) => t,
            None => return Removal::NotFound,
        }
    } else {
        let b = key[d];
        let Some(child) = inner.children.get_mut(b) else {
            return Removal::NotFound;
        };
        match remove(child, key, d + 1, pred) {
            Removal::NotFound => return Removal::NotFound,
            Removal::Removed(l) => return Removal::Removed(l),
            Removal::RemovedEmpty(l) => {
                inner.children.remove(b);
                l
            }
        }
    };
    if normalize(node) {
        Removal::RemovedEmpty(removed)
    } else {
        Removal::Removed(removed)
    }
}

/// Collapses an inner node left with too little content. Returns true when
/// the node holds nothing and must be unlinked.
fn normalize(node: &mut Node) -> bool {
    let Node::Inner(inner) = node else {
        return false;
    };
    match (inner.children.len(), inner.terminal.is_some()) {
        (0, false) => true,
        (0, true) => {
            let t = inner.terminal.take().unwrap();
            *node = Node::Leaf(t);
            false
        }
        (1, false) => {
            let (b, child) = inner.children.take_only();
            let mut prefix = std::mem::take(&mut inner.prefix);
            *node = match child {
                Node::Leaf(l) => Node::Leaf(l),
                Node::Inner(mut ci) => {
                    prefix.push(b);
                    prefix.extend_from_slice(&ci.prefix);
                    ci.prefix = prefix;
                    Node::Inner(ci)
                }
            };
            false
        }
        _ => false,
    }
}

/// Why an ordered visit stopped early.
enum Exit<B> {
    /// The visitor asked to stop.
    User(B),
    /// A key at or past the end bound was reached.
    End,
}

fn visit<B>(
    node: &Node,
    path: &mut Vec<u8>,
    start: &[u8],
    end: Option<&[u8]>,
    f: &mut impl FnMut(&IndexEntry) -> ControlFlow<B>,
) -> ControlFlow<Exit<B>> {
    match node {
        Node::Leaf(l) => {
            let k = l.key.as_ref();
            if end.is_some_and(|e| k >= e) {
                return ControlFlow::Break(Exit::End);
            }
            if k >= start {
                f(&IndexEntry::from(&**l)).map_break(Exit::User)?;
            }
            ControlFlow::Continue(())
        }
        Node::Inner(inner) => {
            let base = path.len();
            path.extend_from_slice(&inner.prefix);
            let result = visit_inner(inner, path, start, end, f);
            path.truncate(base);
            result
        }
    }
}

fn visit_inner<B>(
    inner: &Inner,
    path: &mut Vec<u8>,
    start: &[u8],
    end: Option<&[u8]>,
    f: &mut impl FnMut(&IndexEntry) -> ControlFlow<B>,
) -> ControlFlow<Exit<B>> {
    // Every key below starts with `path`.
    if end.is_some_and(|e| path.as_slice() >= e) {
        return ControlFlow::Break(Exit::End);
    }
    if path.as_slice() < start && !start.starts_with(path) {
        return ControlFlow::Continue(());
    }
    if let Some(t) = &inner.terminal {
        if t.key.as_ref() >= start {
            f(&IndexEntry::from(&**t)).map_break(Exit::User)?;
        }
    }
    // Children whose byte sorts below the start key's next byte are skipped.
    let floor = if start.starts_with(path) {
        start.get(path.len()).copied()
    } else {
        None
    };
    inner.children.for_each_ordered(|b, child| {
        if floor.is_some_and(|fl| b < fl) {
            return ControlFlow::Continue(());
        }
        path.push(b);
        let r = visit(child, path, start, end, f);
        path.pop();
        r
    })
}
