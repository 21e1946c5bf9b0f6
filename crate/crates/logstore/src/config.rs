//! Line-oriented `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may also be given on
//! the command line (`--set key=value`), and command-line values win.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use logstore_core::engine::{EngineConfig, PartitionConfig};
use logstore_core::wal::FlushPolicy;
use logstore_core::NodeId;

/// Environment variable overriding `data_dir`.
pub const DATA_DIR_ENV: &str = "LOGSTORE_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid value for `{key}`: {value:?} ({reason})")]
    Invalid { key: String, value: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("{0}")]
    Inconsistent(String),
}

/// Raw key/value pairs, later entries overriding earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig, ConfigError> {
        let mut cfg = KvConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            cfg.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<KvConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        KvConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Applies `key=value` overrides (from the command line).
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
            self.set(k, v);
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.to_string(),
            value: self.raw(key).unwrap_or_default().to_string(),
            reason: reason.into(),
        }
    }
}

/// Everything a server node needs.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub node_id: NodeId,
    pub listen: SocketAddr,
    /// Other nodes and their addresses.
    pub peers: BTreeMap<NodeId, SocketAddr>,
    pub engine: EngineConfig,
}

impl ServerConfig {
    /// Builds the server configuration. `LOGSTORE_DATA_DIR`, when set,
    /// replaces `data_dir`.
    pub fn from_kv(kv: &KvConfig) -> Result<ServerConfig, ConfigError> {
        let node_id: NodeId = kv.get("node_id")?.ok_or(ConfigError::Missing("node_id"))?;
        let listen: SocketAddr = kv.get("listen")?.ok_or(ConfigError::Missing("listen"))?;
        let peers = parse_peers(kv)?;
        if peers.contains_key(&node_id) {
            return Err(ConfigError::DuplicateNode(node_id));
        }
        let data_dir = match std::env::var_os(DATA_DIR_ENV) {
            Some(d) => PathBuf::from(d),
            None => kv.get::<PathBuf>("data_dir")?.ok_or(ConfigError::Missing("data_dir"))?,
        };
        let partitions: u32 = kv.get_or("partitions", 1)?;
        if partitions == 0 {
            return Err(kv.invalid("partitions", "must be at least 1"));
        }
        let lowest = peers.keys().copied().chain([node_id]).min().unwrap_or(node_id);
        let leaders = match kv.raw("leaders") {
            None => vec![lowest; partitions as usize],
            Some(list) => {
                let leaders = list
                    .split(',')
                    .map(|s| s.trim().parse::<NodeId>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| kv.invalid("leaders", e.to_string()))?;
                if leaders.len() != partitions as usize {
                    return Err(kv.invalid("leaders", format!("need one leader per partition ({partitions})")));
                }
                if let Some(l) = leaders.iter().find(|l| **l != node_id && !peers.contains_key(l)) {
                    return Err(ConfigError::Inconsistent(format!("leader {l} is not a cluster member")));
                }
                leaders
            }
        };

        let mut part = PartitionConfig::default();
        part.log.segment_bytes = kv.get_or("segment_bytes", part.log.segment_bytes)?;
        part.log.flush = kv.get_or::<FlushPolicy>("flush", part.log.flush)?;
        part.cache.capacity_bytes = kv.get_or("cache_bytes", part.cache.capacity_bytes)?;
        part.checkpoint_every = kv.get_or("checkpoint_every", part.checkpoint_every)?;
        part.compact_after_sealed = kv.get_or("compact_after_sealed", part.compact_after_sealed)?;
        part.batch_scan_fraction = kv.get_or("batch_scan_fraction", part.batch_scan_fraction)?;

        let mut engine = EngineConfig::single_node(data_dir, partitions);
        engine.node_id = node_id;
        engine.peers = peers.keys().copied().collect();
        engine.leaders = leaders;
        engine.partition = part;
        engine.queue_capacity = kv.get_or("queue_capacity", engine.queue_capacity)?;
        engine.max_batch = kv.get_or("max_batch", engine.max_batch)?;
        engine.heartbeat = millis(kv, "heartbeat_ms", engine.heartbeat)?;
        engine.resend_after = millis(kv, "resend_after_ms", engine.resend_after)?;
        engine.block_timeout = millis(kv, "block_timeout_ms", engine.block_timeout)?;
        engine.request_timeout = millis(kv, "request_timeout_ms", engine.request_timeout)?;
        engine.pin_cores = kv.get_or("pin_cores", engine.pin_cores)?;
        Ok(ServerConfig {
            node_id,
            listen,
            peers,
            engine,
        })
    }
}

fn millis(kv: &KvConfig, key: &str, default: Duration) -> Result<Duration, ConfigError> {
    Ok(kv.get::<u64>(key)?.map(Duration::from_millis).unwrap_or(default))
}

/// `peers = 2@10.0.0.2:7400, 3@10.0.0.3:7400`
fn parse_peers(kv: &KvConfig) -> Result<BTreeMap<NodeId, SocketAddr>, ConfigError> {
    let mut peers = BTreeMap::new();
    let Some(list) = kv.raw("peers") else {
        return Ok(peers);
    };
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (id, addr) = item
            .split_once('@')
            .ok_or_else(|| kv.invalid("peers", format!("`{item}` is not id@host:port")))?;
        let id: NodeId = id.trim().parse().map_err(|e: std::num::ParseIntError| kv.invalid("peers", e.to_string()))?;
        let addr: SocketAddr = addr
            .trim()
            .parse()
            .map_err(|e: std::net::AddrParseError| kv.invalid("peers", e.to_string()))?;
        if peers.insert(id, addr).is_some() {
            return Err(ConfigError::DuplicateNode(id));
        }
    }
    Ok(peers)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = "
        # node 1 of 3
        node_id = 1
        listen = 127.0.0.1:7401
        peers = 2@127.0.0.1:7402, 3@127.0.0.1:7403
        data_dir = /tmp/ls1
        partitions = 2
        leaders = 1, 2
        cache_bytes = 1048576   # 1 MiB
        flush = os
    ";

    #[test]
    fn parses_cluster_file() {
        let cfg = ServerConfig::from_kv(&KvConfig::parse(THREE).unwrap()).unwrap();
        assert_eq!(cfg.node_id, 1);
        assert_eq!(cfg.peers.len(), 2);
        assert_eq!(cfg.engine.peers, vec![2, 3]);
        assert_eq!(cfg.engine.leaders, vec![1, 2]);
        assert_eq!(cfg.engine.partition.cache.capacity_bytes, 1 << 20);
        assert_eq!(cfg.engine.partition.log.flush, FlushPolicy::OsBuffered);
    }

    #[test]
    fn flags_win() {
        let mut kv = KvConfig::parse(THREE).unwrap();
        kv.apply_overrides(["partitions=1", "leaders = 3"]).unwrap();
        let cfg = ServerConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.engine.partitions, 1);
        assert_eq!(cfg.engine.leaders, vec![3]);
    }

    #[test]
    fn duplicate_node_ids_abort() {
        let mut kv = KvConfig::parse(THREE).unwrap();
        kv.set("peers", "1@127.0.0.1:7402");
        assert!(matches!(ServerConfig::from_kv(&kv), Err(ConfigError::DuplicateNode(1))));
        kv.set("peers", "2@127.0.0.1:7402, 2@127.0.0.1:7403");
        assert!(matches!(ServerConfig::from_kv(&kv), Err(ConfigError::DuplicateNode(2))));
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(matches!(KvConfig::parse("no equals sign"), Err(ConfigError::Syntax { line: 1 })));
        let mut kv = KvConfig::parse(THREE).unwrap();
        kv.set("partitions", "many");
        assert!(matches!(ServerConfig::from_kv(&kv), Err(ConfigError::Invalid { .. })));
        kv.set("partitions", "3");
        assert!(ServerConfig::from_kv(&kv).is_err(), "leader list length mismatch");
        let mut kv = KvConfig::parse(THREE).unwrap();
        kv.set("leaders", "1, 9");
        assert!(matches!(ServerConfig::from_kv(&kv), Err(ConfigError::Inconsistent(_))));
    }

    #[test]
    fn single_node_defaults() {
        let kv = KvConfig::parse("node_id = 4\nlisten = 127.0.0.1:0\ndata_dir = d").unwrap();
        let cfg = ServerConfig::from_kv(&kv).unwrap();
        assert!(cfg.peers.is_empty());
        assert_eq!(cfg.engine.leaders, vec![4]);
    }
}
