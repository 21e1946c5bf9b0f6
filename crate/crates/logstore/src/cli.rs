//! `logstore cli` commands.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use bytes::Bytes;
use logstore_core::Lsn;

use crate::client::Client;
use crate::protocol::{ClientRequest, ClientResponse, ErrorCode, ProtocolError};

/// Process exit status of a failed command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot reach server: {0}")]
    Unreachable(ProtocolError),
    #[error("{0}")]
    Protocol(ProtocolError),
    #[error("{message}")]
    Server { code: ErrorCode, leader: u32, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Server { code: ErrorCode::NotLeader, .. } => 3,
            CliError::Server { .. } => 1,
            CliError::Usage(_) => 2,
            CliError::Unreachable(_) | CliError::Protocol(_) | CliError::Io(_) => 4,
        }
    }
}

const USAGE: &str = "GET k | PUT k v | DEL k | RANGE a b n | BATCHGET file | STATS | PROMOTE partition";

/// Parses the command words into a request.
pub fn parse_command(words: &[String], read_view: Lsn) -> Result<ClientRequest, CliError> {
    let usage = || CliError::Usage(USAGE.to_string());
    let (cmd, args) = words.split_first().ok_or_else(usage)?;
    let b = |s: &String| Bytes::copy_from_slice(s.as_bytes());
    let req = match (cmd.to_ascii_uppercase().as_str(), args) {
        ("GET", [k]) => ClientRequest::Get { key: b(k), view: read_view },
        ("PUT", [k, v]) => ClientRequest::Put { key: b(k), value: b(v) },
        ("DEL", [k]) => ClientRequest::Delete { key: b(k) },
        ("RANGE", [a, z, n]) => ClientRequest::Range {
            start: b(a),
            end: b(z),
            limit: n.parse().map_err(|_| CliError::Usage(format!("RANGE limit {n:?} is not a number")))?,
            view: read_view,
        },
        ("BATCHGET", [file]) => ClientRequest::BatchGet {
            keys: read_key_file(Path::new(file))?,
            view: read_view,
        },
        ("STATS", []) => ClientRequest::Stats,
        ("PROMOTE", [p]) => ClientRequest::Promote {
            partition: p.parse().map_err(|_| CliError::Usage(format!("partition {p:?} is not a number")))?,
        },
        _ => return Err(usage()),
    };
    Ok(req)
}

/// One key per line; blank lines are skipped.
pub fn read_key_file(path: &Path) -> Result<Vec<Bytes>, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(|l| Bytes::copy_from_slice(l.as_bytes()))
        .collect())
}

fn show(v: &[u8]) -> String {
    String::from_utf8_lossy(v).into_owned()
}

/// Prints a successful response; error responses become [`CliError`].
pub fn render(resp: ClientResponse, out: &mut impl Write) -> Result<(), CliError> {
    match resp {
        ClientResponse::Value(Some(v)) => writeln!(out, "{}", show(&v))?,
        ClientResponse::Value(None) => writeln!(out, "(nil)")?,
        ClientResponse::Written { lsn } => writeln!(out, "OK {lsn}")?,
        ClientResponse::Deleted { existed, lsn } => writeln!(out, "{} {lsn}", if existed { "DELETED" } else { "(nil)" })?,
        ClientResponse::Items(items) => {
            for (k, v) in items {
                writeln!(out, "{}\t{}", show(&k), show(&v))?;
            }
        }
        ClientResponse::Batch { items, .. } => {
            for (k, v) in items {
                let v = v.as_deref().map(show).unwrap_or_else(|| "(nil)".into());
                writeln!(out, "{}\t{v}", show(&k))?;
            }
        }
        ClientResponse::Stats(entries) => {
            writeln!(out, "partition role     leader epoch flushed    commit     replayed   keys       cache_hits cache_misses")?;
            for e in entries {
                writeln!(
                    out,
                    "{:<9} {:<8} {:<6} {:<5} {:<10} {:<10} {:<10} {:<10} {:<10} {}",
                    e.partition,
                    if e.leader_role { "leader" } else { "follower" },
                    e.leader,
                    e.epoch,
                    e.flushed.get(),
                    e.potential_commit.get(),
                    e.replayed.get(),
                    e.live_keys,
                    e.cache_hits,
                    e.cache_misses
                )?;
            }
        }
        ClientResponse::Promoted { epoch, flushed, elapsed_us } => {
            writeln!(out, "promoted: epoch {epoch}, log at {flushed}, took {elapsed_us} us")?
        }
        ClientResponse::Error { code, leader, message } => {
            let message = if code == ErrorCode::NotLeader && leader != 0 {
                format!("not leader; leader is node {leader}")
            } else {
                message
            };
            return Err(CliError::Server { code, leader, message });
        }
    }
    Ok(())
}

/// Runs one command against `addr`, printing the result to `out`.
pub fn run(addr: &str, words: &[String], read_view: Lsn, timeout: Duration, out: &mut impl Write) -> Result<(), CliError> {
    let req = parse_command(words, read_view)?;
    let mut client = Client::connect(addr, timeout).map_err(CliError::Unreachable)?;
    let resp = client.call(&req).map_err(CliError::Protocol)?;
    render(resp, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_commands() {
        assert_eq!(
            parse_command(&words("put a 1"), Lsn::NONE).unwrap(),
            ClientRequest::Put {
                key: Bytes::from("a"),
                value: Bytes::from("1")
            }
        );
        assert_eq!(
            parse_command(&words("GET a"), Lsn(5)).unwrap(),
            ClientRequest::Get {
                key: Bytes::from("a"),
                view: Lsn(5)
            }
        );
        assert!(matches!(parse_command(&words("RANGE a b x"), Lsn::NONE), Err(CliError::Usage(_))));
        assert!(matches!(parse_command(&words("GET"), Lsn::NONE), Err(CliError::Usage(_))));
        assert!(matches!(parse_command(&[], Lsn::NONE), Err(CliError::Usage(_))));
    }

    #[test]
    fn renders_nil_and_errors() {
        let mut out = Vec::new();
        render(ClientResponse::Value(None), &mut out).unwrap();
        assert_eq!(out, b"(nil)\n");
        let err = render(
            ClientResponse::Error {
                code: ErrorCode::NotLeader,
                leader: 2,
                message: String::new(),
            },
            &mut out,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "not leader; leader is node 2");
        assert_eq!(err.exit_code(), 3);
    }
}
