use std::net::{SocketAddr, TcpListener};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

use logstore::config::{KvConfig, ServerConfig};
use logstore::Server;

const BIN: &str = env!("CARGO_BIN_EXE_logstore");

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn node_config(dir: &TempDir, node: u32, addrs: &[SocketAddr]) -> KvConfig {
    let peers: Vec<String> = addrs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i as u32 + 1 != node)
        .map(|(i, a)| format!("{}@{a}", i + 1))
        .collect();
    KvConfig::parse(&format!(
        "node_id = {node}\nlisten = {}\npeers = {}\ndata_dir = {}\npartitions = 2\nleaders = 1, 1\n\
         heartbeat_ms = 10\nresend_after_ms = 100\npin_cores = false\nflush = os\n",
        addrs[node as usize - 1],
        peers.join(", "),
        dir.path().join(format!("n{node}")).display()
    ))
    .unwrap()
}

fn cli(addr: SocketAddr, args: &[&str]) -> Output {
    Command::new(BIN)
        .env("RUST_LOG", "warn")
        .args(["cli", "--addr", &addr.to_string()])
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim_end().to_string()
}

fn eventually(what: &str, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(15);
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn cluster_over_tcp() {
    let dir = TempDir::new().unwrap();
    let addrs: Vec<SocketAddr> = (0..3).map(|_| free_addr()).collect();
    let mut servers: Vec<Option<Server>> = (1..=3)
        .map(|n| Some(Server::start(ServerConfig::from_kv(&node_config(&dir, n, &addrs)).unwrap()).unwrap()))
        .collect();
    let (leader, follower) = (addrs[0], addrs[1]);

    let o = cli(leader, &["PUT", "a", "1"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("OK"));
    let o = cli(leader, &["GET", "a"]);
    assert_eq!((o.status.code(), stdout(&o).as_str()), (Some(0), "1"));
    let o = cli(leader, &["GET", "absent"]);
    assert_eq!((o.status.code(), stdout(&o).as_str()), (Some(0), "(nil)"));

    let o = cli(follower, &["PUT", "b", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leader is node 1"), "{o:?}");

    for (k, v) in [("b", "2"), ("c", "3"), ("d", "4")] {
        assert!(cli(leader, &["PUT", k, v]).status.success());
    }
    assert_eq!(stdout(&cli(leader, &["RANGE", "b", "d", "10"])), "b\t2\nc\t3");
    let keys = dir.path().join("keys.txt");
    std::fs::write(&keys, "a\nzz\nc\n").unwrap();
    assert_eq!(stdout(&cli(leader, &["BATCHGET", keys.to_str().unwrap()])), "a\t1\nzz\t(nil)\nc\t3");
    assert!(stdout(&cli(leader, &["DEL", "d"])).starts_with("DELETED"));
    assert!(stdout(&cli(leader, &["DEL", "d"])).starts_with("(nil)"));

    let stats = stdout(&cli(leader, &["STATS"]));
    assert_eq!(stats.lines().count(), 3, "{stats}");
    assert!(stats.lines().skip(1).all(|l| l.contains("leader")));

    // Follower read at a view the follower has reached.
    eventually("follower catch-up", || stdout(&cli(follower, &["--read-view", "1", "GET", "a"])) == "1");

    let o = cli(leader, &["FROB"]);
    assert_eq!(o.status.code(), Some(2));

    // Leader loss: node 2 takes over both partitions and keeps the data.
    servers[0].take().unwrap().shutdown();
    eventually("followers in sync", || {
        let s2 = stdout(&cli(addrs[1], &["STATS"]));
        let s3 = stdout(&cli(addrs[2], &["STATS"]));
        let cols = |s: &str| s.lines().skip(1).map(|l| l.split_whitespace().nth(4).unwrap().to_string()).collect::<Vec<_>>();
        cols(&s2) == cols(&s3)
    });
    for p in ["0", "1"] {
        let o = cli(addrs[1], &["PROMOTE", p]);
        assert!(o.status.success(), "{o:?}");
        assert!(stdout(&o).starts_with("promoted"));
    }
    assert_eq!(stdout(&cli(addrs[1], &["GET", "c"])), "3");
    assert!(cli(addrs[1], &["PUT", "e", "5"]).status.success());
    eventually("node 3 follows the new leader", || stdout(&cli(addrs[2], &["--read-view", "1", "GET", "e"])) == "5");
    drop(servers);
}

#[test]
fn unreachable_server_exits_nonzero() {
    let o = cli(free_addr(), &["GET", "a"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn serve_rejects_duplicate_node_ids() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("node.conf");
    std::fs::write(
        &cfg,
        format!(
            "node_id = 1\nlisten = 127.0.0.1:0\npeers = 1@127.0.0.1:9\ndata_dir = {}\n",
            dir.path().join("d").display()
        ),
    )
    .unwrap();
    let o = Command::new(BIN).args(["serve", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("duplicate node id 1"), "{o:?}");
}

#[test]
fn bench_writes_csv() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("hit.csv");
    let o = Command::new(BIN)
        .env("LOGSTORE_DATA_DIR", dir.path().join("work"))
        .args(["bench", "--scenario", "cache-hitratio", "--out", out.to_str().unwrap()])
        .args(["--set", "keys=2000", "--set", "warmup_ops=20000", "--set", "measure_ops=20000", "--set", "ratios=0.3"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("distribution,ratio,policy,hit_ratio"));
    assert_eq!(lines.count(), 6);
    let o = Command::new(BIN).args(["bench", "--scenario", "nope", "--out", "/dev/null"]).output().unwrap();
    assert!(!o.status.success());
}
