//! Attestation daemon: verifies quotes against a policy allowlist and
//! hands wrapped data keys to verified parties.

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Parser;

use tierbus::attestation::{load_verifying_key, Attestor, AttestorServer, Policy, PlatformKey};
use tierbus::config::Config;
use tierbus::sys::term_flag;

#[derive(Parser, Debug)]
#[command(name = "attestor", about = "attestation verification daemon")]
struct Args {
    /// Platform config file (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen address, e.g. 127.0.0.1:7575 (0 port picks one).
    #[arg(long)]
    listen: Option<String>,
    /// Policy file: JSON map of role name to allowed code digests.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Platform verification key: 64 hex chars or a key file path.
    #[arg(long)]
    platform_pub: Option<String>,
    #[arg(long)]
    max_quote_age_ms: Option<u64>,
    /// Generate a fresh platform keypair file at this path and exit.
    #[arg(long)]
    gen_platform_key: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();

    if let Some(path) = args.gen_platform_key {
        let key = PlatformKey::generate();
        key.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("PLATFORMPUB {}", hex::encode(key.verifying_key().as_bytes()));
        return Ok(());
    }

    let cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let listen = args.listen.unwrap_or(cfg.attestor.listen);
    let max_age = args.max_quote_age_ms.unwrap_or(cfg.attestor.max_quote_age_ms);

    let Some(platform_pub) = args.platform_pub else {
        bail!("--platform-pub is required (or use --gen-platform-key)");
    };
    let platform_vk = load_verifying_key(&platform_pub).context("loading platform key")?;

    let policy = match &args.policy {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Policy::from_json(&text, max_age).map_err(anyhow::Error::msg)?
        }
        None => Policy::new(max_age),
    };

    let server = AttestorServer::start(&listen, Attestor::new(policy, platform_vk))?;
    println!("CERTKEY {}", hex::encode(server.cert_verifier().as_bytes()));
    println!("READY {}", server.local_addr());

    let stop = term_flag();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    Ok(())
}
