//! Consumer endpoint: subscribe at the authorized tiers and write
//! decoded records as CSV.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use tierbus::attestation::PlatformKey;
use tierbus::clients::{Consumer, ConsumerConfig, CONSUMER_CSV_HEADER};
use tierbus::crypto::CodeIdentity;
use tierbus::envelope::{LevelSet, PrivacyLevel};
use tierbus::sys::term_flag;

#[derive(Parser, Debug)]
#[command(name = "consumer", about = "tiered stream consumer")]
struct Args {
    #[arg(long)]
    subscriber_id: u64,
    /// Comma-separated: high,moderate,low
    #[arg(long)]
    levels: String,
    /// The publisher whose stream to subscribe to.
    #[arg(long)]
    publisher: u64,
    /// Topic filter; "*" matches everything from the publisher.
    #[arg(long, default_value = "*")]
    topic: String,
    #[arg(long)]
    broker: String,
    /// Omit to run unattested (Low/plaintext only).
    #[arg(long)]
    attestor: Option<String>,
    /// The publisher's authorization endpoint.
    #[arg(long)]
    producer_auth: String,
    /// Platform attestation key file (required with --attestor).
    #[arg(long)]
    platform_key: Option<PathBuf>,
    /// Claimed code identity (hex); defaults to this executable's hash.
    #[arg(long)]
    code_id: Option<String>,
    /// Write decoded records here (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit after this many records.
    #[arg(long)]
    count: Option<u64>,
    /// Exit after this long with no traffic (seconds).
    #[arg(long, default_value_t = 30)]
    idle_timeout_s: u64,
}

fn parse_levels(s: &str) -> anyhow::Result<LevelSet> {
    let mut set = LevelSet::EMPTY;
    for part in s.split(',') {
        let level: PrivacyLevel = part.parse().map_err(anyhow::Error::msg)?;
        set.insert(level);
    }
    Ok(set)
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let levels = parse_levels(&args.levels)?;
    let platform = match &args.platform_key {
        Some(path) => {
            Some(PlatformKey::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let code = match &args.code_id {
        Some(hex) => Some(CodeIdentity::from_hex(hex).context("--code-id must be 64 hex chars")?),
        None if args.attestor.is_some() => Some(tierbus::sys::self_code_identity()?),
        None => None,
    };

    let mut consumer = Consumer::connect(&ConsumerConfig {
        subscriber_id: args.subscriber_id,
        broker_addr: args.broker.clone(),
        attestor_addr: args.attestor.clone(),
        platform,
        code,
        producer_auth_addr: Some(args.producer_auth.clone()),
        publisher_id: args.publisher,
        topic_filter: args.topic.clone(),
        levels,
    })
    .map_err(|e| anyhow::anyhow!("consumer startup: {e}"))?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "{CONSUMER_CSV_HEADER}")?;
    println!("READY -");

    let stop = term_flag();
    let mut received = 0u64;
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        if let Some(limit) = args.count {
            if received >= limit {
                break;
            }
        }
        match consumer.recv(Duration::from_secs(args.idle_timeout_s)) {
            Ok(Some(record)) => {
                writeln!(out, "{}", record.csv_row())?;
                received += 1;
            }
            Ok(None) => break, // idle timeout
            Err(tierbus::clients::ClientError::Closed) => break,
            Err(e) => return Err(anyhow::anyhow!("receive: {e}")),
        }
    }
    out.flush()?;
    eprintln!(
        "DONE received={received} decode_failures={} order_violations={}",
        consumer.decode_failures(),
        consumer.order_violations()
    );
    Ok(())
}
