//! Content-based routing daemon.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use tierbus::broker::{BrokerMode, BrokerServer, MetricsSnapshot, QueueConfig};
use tierbus::config::Config;
use tierbus::crypto::CodeIdentity;
use tierbus::sys::term_flag;

#[derive(Parser, Debug)]
#[command(name = "broker", about = "privacy-tiered content-based routing daemon")]
struct Args {
    /// Platform config file (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen address (0 port picks one; the bound address is printed).
    #[arg(long)]
    listen: Option<String>,
    /// secure | regular
    #[arg(long)]
    mode: Option<BrokerMode>,
    /// Ingress queue capacity in publications.
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    subscriber_buffer: Option<usize>,
    /// Fixed per-message overhead hook (ns) in secure mode.
    #[arg(long)]
    overhead_ns: Option<u64>,
    /// Refuse to start in secure mode unless the executable hashes to
    /// this code identity (hex).
    #[arg(long)]
    expected_code_id: Option<String>,
    /// Append a metrics CSV row here every second (and on shutdown).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Print the executable's code identity and exit.
    #[arg(long)]
    print_code_id: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();

    if args.print_code_id {
        println!("{}", tierbus::sys::self_code_identity()?);
        return Ok(());
    }

    let cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let listen = args.listen.unwrap_or(cfg.broker.listen.clone());
    let mode = match args.mode {
        Some(m) => m,
        None => cfg.broker.mode.parse().map_err(anyhow::Error::msg)?,
    };
    let queue = QueueConfig {
        capacity: args.capacity.unwrap_or(cfg.broker.capacity),
        mode,
        subscriber_buffer: args.subscriber_buffer.unwrap_or(cfg.broker.subscriber_buffer),
        overhead_ns: args.overhead_ns.unwrap_or(cfg.broker.overhead_ns),
    };
    let expected = match &args.expected_code_id {
        Some(hex) => Some(
            CodeIdentity::from_hex(hex)
                .context("--expected-code-id must be 64 hex characters")?,
        ),
        None => None,
    };

    let mut server = BrokerServer::start_with_identity(&listen, queue, expected)?;
    println!("READY {}", server.local_addr());

    let mut metrics_file = match &args.metrics_out {
        Some(path) => {
            let mut f = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            writeln!(f, "{}", MetricsSnapshot::csv_header())?;
            Some(f)
        }
        None => None,
    };

    let stop = term_flag();
    let mut last_dump = std::time::Instant::now();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
        if let Some(f) = metrics_file.as_mut() {
            if last_dump.elapsed() >= Duration::from_secs(1) {
                last_dump = std::time::Instant::now();
                writeln!(f, "{}", server.broker().metrics().to_csv_row())?;
            }
        }
    }
    // final snapshot on the way out
    if let Some(f) = metrics_file.as_mut() {
        writeln!(f, "{}", server.broker().metrics().to_csv_row())?;
        f.flush()?;
    }
    server.shutdown();
    Ok(())
}
