use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use logstore::bench::{self, Scenario};
use logstore::config::{KvConfig, ServerConfig, DATA_DIR_ENV};
use logstore::Server;
use logstore_core::Lsn;

#[derive(Parser)]
#[command(name = "logstore", version, about = "Log-as-database key-value store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry (`key=value`); may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        node_id: Option<u32>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Send one command to a server.
    Cli {
        #[arg(long)]
        addr: String,
        /// Read view LSN for follower reads (0 = none).
        #[arg(long, default_value_t = 0)]
        read_view: u64,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        /// GET k | PUT k v | DEL k | RANGE a b n | BATCHGET file | STATS | PROMOTE partition
        #[arg(required = true, num_args = 1.., allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Run a benchmark scenario and write its CSV report.
    Bench {
        /// write-scaling | cache-hitratio | freshness | recovery | batchget-crossover
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Cli {
            addr,
            read_view,
            timeout_ms,
            command,
        } => {
            let mut out = std::io::stdout().lock();
            match logstore::cli::run(&addr, &command, Lsn(read_view), Duration::from_millis(timeout_ms), &mut out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Serve {
            config,
            overrides,
            node_id,
            listen,
            data_dir,
        } => report(serve(config, overrides, node_id, listen, data_dir)),
        Command::Bench {
            scenario,
            config,
            overrides,
            out,
        } => report(run_bench(&scenario, config, overrides, out)),
    }
}

fn report(r: anyhow::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn serve(
    config: PathBuf,
    overrides: Vec<String>,
    node_id: Option<u32>,
    listen: Option<String>,
    data_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut kv = KvConfig::load(&config)?;
    kv.apply_overrides(overrides.iter().map(String::as_str))?;
    if let Some(n) = node_id {
        kv.set("node_id", &n.to_string());
    }
    if let Some(l) = listen {
        kv.set("listen", &l);
    }
    if let Some(d) = data_dir {
        if std::env::var_os(DATA_DIR_ENV).is_some() {
            tracing::warn!("{DATA_DIR_ENV} is set and takes precedence over --data-dir");
        }
        kv.set("data_dir", &d.to_string_lossy());
    }
    let cfg = ServerConfig::from_kv(&kv).context("invalid configuration")?;
    let (tx, rx) = crossbeam_channel::bounded(1);
    ctrlc::set_handler(move || {
        let _ = tx.try_send(());
    })
    .context("installing signal handler")?;
    let mut server = Server::start(cfg).context("startup failed")?;
    println!("listening on {}", server.local_addr());
    let _ = rx.recv();
    tracing::info!("shutting down");
    server.shutdown();
    Ok(())
}

fn run_bench(scenario: &str, config: Option<PathBuf>, overrides: Vec<String>, out: PathBuf) -> anyhow::Result<()> {
    let scenario: Scenario = scenario.parse()?;
    let mut kv = match config {
        Some(path) => KvConfig::load(&path)?,
        None => KvConfig::default(),
    };
    kv.apply_overrides(overrides.iter().map(String::as_str))?;
    let configured = match std::env::var_os(DATA_DIR_ENV) {
        Some(d) => Some(PathBuf::from(d)),
        None => kv.get::<PathBuf>("data_dir")?,
    };
    let scratch = std::env::temp_dir().join(format!("logstore-bench-{}", std::process::id()));
    let work_dir = configured.clone().unwrap_or_else(|| scratch.clone());
    let started = std::time::Instant::now();
    let result = bench::run(scenario, &kv, &work_dir);
    if configured.is_none() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    let table = result?;
    let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    table.write_csv(file)?;
    println!(
        "{scenario:?}: {} rows -> {} ({:.1}s)",
        table.rows.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
