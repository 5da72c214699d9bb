//! Producer process: meter simulator, trusted collector, and (by
//! default) an in-process untrusted gateway relaying to the broker.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use tierbus::attestation::{load_verifying_key, PlatformKey};
use tierbus::clients::{Dispatcher, MeterConfig, Producer, ProducerConfig, RetryPolicy, ValueModel};
use tierbus::crypto::CodeIdentity;
use tierbus::sys::term_flag;

#[derive(Parser, Debug)]
#[command(name = "producer", about = "meter + collector + gateway pipeline")]
struct Args {
    #[arg(long)]
    meter_id: u64,
    /// Publications per second (fractional allowed).
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Ignore the rate and publish as fast as the pipe accepts.
    #[arg(long)]
    blast: bool,
    /// constant:<mw> or walk:<seed>,<step>
    #[arg(long, default_value = "walk:1,500")]
    value_model: String,
    #[arg(long)]
    broker: String,
    #[arg(long)]
    attestor: String,
    /// Attestor certificate key (64 hex chars or key file path).
    #[arg(long)]
    attestor_cert: String,
    /// Platform attestation key file.
    #[arg(long)]
    platform_key: PathBuf,
    /// Claimed code identity (hex); defaults to this executable's hash.
    #[arg(long)]
    code_id: Option<String>,
    /// Deployment label recorded in output; behavior is identical.
    #[arg(long, default_value = "regular")]
    mode: String,
    /// Publish this many measurements, then exit (otherwise run forever).
    #[arg(long)]
    count: Option<u64>,
    /// Rotate the data key every N publications (0 = never).
    #[arg(long, default_value_t = 0)]
    rotate_every: u64,
    /// Authorization endpoint listen address.
    #[arg(long, default_value = "127.0.0.1:0")]
    auth_listen: String,
    /// Connect straight to the broker instead of through a gateway.
    #[arg(long)]
    direct: bool,
    /// CSV of send timestamps for latency joins.
    #[arg(long)]
    send_log: Option<PathBuf>,
    /// Hold publishing until this many subscriptions were authorized.
    #[arg(long, default_value_t = 0)]
    wait_subs: u64,
}

fn parse_value_model(s: &str) -> anyhow::Result<ValueModel> {
    if let Some(v) = s.strip_prefix("constant:") {
        return Ok(ValueModel::Constant(v.parse()?));
    }
    if let Some(rest) = s.strip_prefix("walk:") {
        let (seed, step) = rest
            .split_once(',')
            .context("walk model is walk:<seed>,<step>")?;
        return Ok(ValueModel::RandomWalk {
            seed: seed.parse()?,
            step: step.parse()?,
        });
    }
    anyhow::bail!("unknown value model {s:?}");
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let platform = PlatformKey::load(&args.platform_key)
        .with_context(|| format!("loading {}", args.platform_key.display()))?;
    let code = match &args.code_id {
        Some(hex) => CodeIdentity::from_hex(hex).context("--code-id must be 64 hex chars")?,
        None => tierbus::sys::self_code_identity()?,
    };
    let attestor_cert_vk = load_verifying_key(&args.attestor_cert)?;

    // gateway: untrusted relay between the collector and the bus
    let (uplink_addr, via_dispatcher, mut dispatcher) = if args.direct {
        (args.broker.clone(), false, None)
    } else {
        let handle = Dispatcher {
            broker_addr: args.broker.clone(),
            byte_log: None,
            retry: RetryPolicy::default(),
        }
        .start()?;
        (handle.local_addr().to_string(), true, Some(handle))
    };

    let producer = Producer::start(ProducerConfig {
        meter: MeterConfig {
            meter_id: args.meter_id,
            rate_hz: args.rate,
            value_model: parse_value_model(&args.value_model)?,
        },
        uplink_addr,
        via_dispatcher,
        attestor_addr: args.attestor.clone(),
        platform,
        code,
        attestor_cert_vk,
        rotate_every: args.rotate_every,
        auth_listen: Some(args.auth_listen.clone()),
        count: args.count,
        paced: !args.blast,
        send_log: args.send_log.clone(),
        wait_for_subscribers: args.wait_subs,
    })
    .map_err(|e| anyhow::anyhow!("producer startup: {e}"))?;

    if let Some(addr) = producer.auth_addr {
        println!("READY {addr}");
    } else {
        println!("READY -");
    }

    let stop = term_flag();
    if args.count.is_some() {
        let published = producer
            .wait_done()
            .map_err(|e| anyhow::anyhow!("publish loop: {e}"))?;
        println!("DONE {published} mode={}", args.mode);
    } else {
        while !stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(100));
        }
        producer.stop();
        println!("DONE {} mode={}", producer.published(), args.mode);
    }
    if let Some(d) = dispatcher.as_mut() {
        d.shutdown();
    }
    Ok(())
}
