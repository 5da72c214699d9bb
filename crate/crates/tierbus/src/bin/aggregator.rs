//! Attested aggregation service daemon.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use tierbus::aggregator::{AggregatorService, AggregatorServiceConfig};
use tierbus::attestation::{load_verifying_key, PlatformKey};
use tierbus::config::Config;
use tierbus::crypto::CodeIdentity;
use tierbus::sys::term_flag;

#[derive(Parser, Debug)]
#[command(name = "aggregator", about = "windowed aggregation service")]
struct Args {
    /// Platform config file (TOML) for window/grace/regions.
    #[arg(long)]
    config: Option<PathBuf>,
    /// This service's platform and publisher identity.
    #[arg(long)]
    aggregator_id: u64,
    /// Raw publisher to subscribe to.
    #[arg(long)]
    publisher: u64,
    #[arg(long)]
    broker: String,
    #[arg(long)]
    attestor: String,
    /// Attestor certificate key (64 hex chars or key file path).
    #[arg(long)]
    attestor_cert: String,
    /// The raw publisher's authorization endpoint.
    #[arg(long)]
    producer_auth: String,
    #[arg(long)]
    platform_key: PathBuf,
    #[arg(long)]
    code_id: Option<String>,
    #[arg(long, default_value = "127.0.0.1:0")]
    auth_listen: String,
    #[arg(long)]
    window_ms: Option<u64>,
    #[arg(long)]
    grace_ms: Option<u64>,
    /// CSV audit log of every emitted record.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let platform = PlatformKey::load(&args.platform_key)
        .with_context(|| format!("loading {}", args.platform_key.display()))?;
    let code = match &args.code_id {
        Some(hex) => CodeIdentity::from_hex(hex).context("--code-id must be 64 hex chars")?,
        None => tierbus::sys::self_code_identity()?,
    };

    let service = AggregatorService::start(AggregatorServiceConfig {
        aggregator_id: args.aggregator_id,
        raw_publisher_id: args.publisher,
        broker_addr: args.broker.clone(),
        attestor_addr: args.attestor.clone(),
        producer_auth_addr: args.producer_auth.clone(),
        platform,
        code,
        attestor_cert_vk: load_verifying_key(&args.attestor_cert)?,
        window_ms: args.window_ms.unwrap_or(cfg.aggregator.window_ms),
        grace_ms: args.grace_ms.unwrap_or(cfg.aggregator.grace_ms),
        regions: cfg.aggregator.region_map(),
        auth_listen: Some(args.auth_listen.clone()),
        audit_log: args.audit_log.clone(),
    })
    .map_err(|e| anyhow::anyhow!("aggregator startup: {e}"))?;

    match service.auth_addr {
        Some(addr) => println!("READY {addr}"),
        None => println!("READY -"),
    }

    let stop = term_flag();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    service
        .stop()
        .map_err(|e| anyhow::anyhow!("aggregator shutdown: {e}"))?;
    Ok(())
}
