//! ART node layouts.
//!
//! Inner nodes store their full compressed prefix (pessimistic path
//! compression) and an optional terminal leaf for the key that ends exactly
//! at the node, which lets one key be a prefix of another.

use bytes::Bytes;

use crate::types::Lsn;
use crate::wal::LogPosition;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Node4,
    Node16,
    Node48,
    Node256,
    Leaf,
}

#[derive(Clone, Debug)]
pub(crate) struct Leaf {
    pub key: Bytes,
    pub position: LogPosition,
    pub version: Lsn,
}

#[derive(Debug)]
pub(crate) enum Node {
    Leaf(Box<Leaf>),
    Inner(Box<Inner>),
}

#[derive(Debug)]
pub(crate) struct Inner {
    pub prefix: Vec<u8>,
    pub terminal: Option<Box<Leaf>>,
    pub children: Children,
}

impl Inner {
    pub fn new(prefix: Vec<u8>) -> Inner {
        Inner {
            prefix,
            terminal: None,
            children: Children::new(),
        }
    }

    /// Places a leaf whose key diverges (or ends) at `depth`.
    pub fn place_leaf(&mut self, leaf: Box<Leaf>, depth: usize) {
        if leaf.key.len() == depth {
            debug_assert!(self.terminal.is_none());
            self.terminal = Some(leaf);
        } else {
            let b = leaf.key[depth];
            self.children.insert(b, Node::Leaf(leaf));
        }
    }
}

const EMPTY48: u8 = u8::MAX;

/// Child table. Sparse layouts keep keys sorted so ordered traversal never
/// needs to sort.
#[derive(Debug)]
pub(crate) enum Children {
    /// Up to 4 children, keys sorted.
    N4 { keys: Vec<u8>, nodes: Vec<Node> },
    /// Up to 16 children, keys sorted.
    N16 { keys: Vec<u8>, nodes: Vec<Node> },
    /// 256-entry byte map into 48 slots.
    N48 {
        index: Box<[u8; 256]>,
        slots: Vec<Option<Node>>,
        len: usize,
    },
    N256 { nodes: Vec<Option<Node>>, len: usize },
}

impl Children {
    pub fn new() -> Children {
        Children::N4 {
            keys: Vec::with_capacity(4),
            nodes: Vec::with_capacity(4),
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            Children::N4 { .. } => NodeKind::Node4,
            Children::N16 { .. } => NodeKind::Node16,
            Children::N48 { .. } => NodeKind::Node48,
            Children::N256 { .. } => NodeKind::Node256,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Children::N4 { keys, .. } | Children::N16 { keys, .. } => keys.len(),
            Children::N48 { len, .. } | Children::N256 { len, .. } => *len,
        }
    }

    pub fn get(&self, b: u8) -> Option<&Node> {
        match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => {
                keys.binary_search(&b).ok().map(|i| &nodes[i])
            }
            Children::N48 { index, slots, .. } => match index[b as usize] {
                EMPTY48 => None,
                s => slots[s as usize].as_ref(),
            },
            Children::N256 { nodes, .. } => nodes[b as usize].as_ref(),
        }
    }

    pub fn get_mut(&mut self, b: u8) -> Option<&mut Node> {
        match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => match keys.binary_search(&b) {
                Ok(i) => Some(&mut nodes[i]),
                Err(_) => None,
            },
            Children::N48 { index, slots, .. } => match index[b as usize] {
                EMPTY48 => None,
                s => slots[s as usize].as_mut(),
            },
            Children::N256 { nodes, .. } => nodes[b as usize].as_mut(),
        }
    }

    /// Inserts a child for a byte that is not present, growing the layout
    /// when full.
    pub fn insert(&mut self, b: u8, node: Node) {
        let full = match self {
            Children::N4 { keys, .. } => keys.len() == 4,
            Children::N16 { keys, .. } => keys.len() == 16,
            Children::N48 { len, .. } => *len == 48,
            Children::N256 { .. } => false,
        };
        if full {
            self.grow();
        }
        match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => {
                let i = keys.binary_search(&b).expect_err("duplicate child byte");
                keys.insert(i, b);
                nodes.insert(i, node);
            }
            Children::N48 { index, slots, len } => {
                debug_assert_eq!(index[b as usize], EMPTY48);
                let s = slots.iter().position(Option::is_none).expect("free slot");
                slots[s] = Some(node);
                index[b as usize] = s as u8;
                *len += 1;
            }
            Children::N256 { nodes, len } => {
                debug_assert!(nodes[b as usize].is_none());
                nodes[b as usize] = Some(node);
                *len += 1;
            }
        }
    }

    fn grow(&mut self) {
        let old = std::mem::replace(self, Children::new());
        *self = match old {
            Children::N4 { keys, nodes } => {
                let mut k = Vec::with_capacity(16);
                let mut n = Vec::with_capacity(16);
                k.extend(keys);
                n.extend(nodes);
                Children::N16 { keys: k, nodes: n }
            }
            Children::N16 { keys, nodes } => {
                let mut index = Box::new([EMPTY48; 256]);
                let mut slots: Vec<Option<Node>> = (0..48).map(|_| None).collect();
                let len = keys.len();
                for (s, (k, n)) in keys.into_iter().zip(nodes).enumerate() {
                    index[k as usize] = s as u8;
                    slots[s] = Some(n);
                }
                Children::N48 { index, slots, len }
            }
            Children::N48 { index, mut slots, len } => {
                let mut nodes: Vec<Option<Node>> = (0..256).map(|_| None).collect();
                for b in 0..256usize {
                    if index[b] != EMPTY48 {
                        nodes[b] = slots[index[b] as usize].take();
                    }
                }
                Children::N256 { nodes, len }
            }
            full @ Children::N256 { .. } => full,
        };
    }

    pub fn remove(&mut self, b: u8) -> Option<Node> {
        let removed = match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => match keys.binary_search(&b) {
                Ok(i) => {
                    keys.remove(i);
                    Some(nodes.remove(i))
                }
                Err(_) => None,
            },
            Children::N48 { index, slots, len } => match index[b as usize] {
                EMPTY48 => None,
                s => {
                    index[b as usize] = EMPTY48;
                    *len -= 1;
                    slots[s as usize].take()
                }
            },
            Children::N256 { nodes, len } => {
                let n = nodes[b as usize].take();
                if n.is_some() {
                    *len -= 1;
                }
                n
            }
        };
        if removed.is_some() {
            self.maybe_shrink();
        }
        removed
    }

    /// Shrink thresholds leave hysteresis below each growth boundary.
    fn maybe_shrink(&mut self) {
        let len = self.len();
        let shrink = match self {
            Children::N16 { .. } => len <= 3,
            Children::N48 { .. } => len <= 12,
            Children::N256 { .. } => len <= 37,
            Children::N4 { .. } => false,
        };
        if !shrink {
            return;
        }
        let entries = std::mem::replace(self, Children::new()).into_sorted();
        *self = match entries.len() {
            0..=4 => Children::N4 {
                keys: entries.iter().map(|(b, _)| *b).collect(),
                nodes: entries.into_iter().map(|(_, n)| n).collect(),
            },
            5..=16 => Children::N16 {
                keys: entries.iter().map(|(b, _)| *b).collect(),
                nodes: entries.into_iter().map(|(_, n)| n).collect(),
            },
            _ => {
                let mut index = Box::new([EMPTY48; 256]);
                let mut slots: Vec<Option<Node>> = (0..48).map(|_| None).collect();
                let len = entries.len();
                for (s, (b, n)) in entries.into_iter().enumerate() {
                    index[b as usize] = s as u8;
                    slots[s] = Some(n);
                }
                Children::N48 { index, slots, len }
            }
        };
    }

    fn into_sorted(self) -> Vec<(u8, Node)> {
        match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => keys.into_iter().zip(nodes).collect(),
            Children::N48 { index, mut slots, .. } => (0..256usize)
                .filter(|&b| index[b] != EMPTY48)
                .map(|b| (b as u8, slots[index[b] as usize].take().unwrap()))
                .collect(),
            Children::N256 { nodes, .. } => nodes
                .into_iter()
                .enumerate()
                .filter_map(|(b, n)| n.map(|n| (b as u8, n)))
                .collect(),
        }
    }

    /// Removes and returns the single remaining child.
    pub fn take_only(&mut self) -> (u8, Node) {
        debug_assert_eq!(self.len(), 1);
        let mut all = std::mem::replace(self, Children::new()).into_sorted();
        all.pop().unwrap()
    }

    /// Children in ascending byte order.
    pub fn for_each_ordered<B>(
        &self,
        mut f: impl FnMut(u8, &Node) -> std::ops::ControlFlow<B>,
    ) -> std::ops::ControlFlow<B> {
        use std::ops::ControlFlow;
        match self {
            Children::N4 { keys, nodes } | Children::N16 { keys, nodes } => {
                for (b, n) in keys.iter().zip(nodes) {
                    f(*b, n)?;
                }
            }
            Children::N48 { index, slots, .. } => {
                for b in 0..256usize {
                    if index[b] != EMPTY48 {
                        f(b as u8, slots[index[b] as usize].as_ref().unwrap())?;
                    }
                }
            }
            Children::N256 { nodes, .. } => {
                for (b, n) in nodes.iter().enumerate() {
                    if let Some(n) = n {
                        f(b as u8, n)?;
                    }
                }
            }
        }
        ControlFlow::Continue(())
    }
}
