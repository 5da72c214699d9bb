//! Producer orchestration: meter simulator feeding the collector, key
//! registration with the attestor, and the authorization endpoint where
//! candidate subscribers are vetted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;

use super::{ClientError, MeterConfig, MeterSim, Mdc, UplinkConn};
use crate::attestation::{AttestClient, AttestationCert, EnclaveIdentity, PlatformKey, Role};
use crate::crypto::{CodeIdentity, DataKey};
use crate::envelope::{
    read_frame, write_frame, EncryptionMode, LevelSet, PrivacyLevel, Publication, Topic,
    TopicFilter, TOPIC_AUTH,
};
use crate::sys::{unix_micros, unix_millis};

pub const AUTH_REQ: u8 = 0x01;
pub const AUTH_RESP: u8 = 0x02;

#[derive(Debug, Clone)]
pub struct ProducerConfig {
    pub meter: MeterConfig,
    /// Uplink address: the dispatcher when `via_dispatcher`, otherwise
    /// the broker itself.
    pub uplink_addr: String,
    pub via_dispatcher: bool,
    pub attestor_addr: String,
    pub platform: PlatformKey,
    pub code: CodeIdentity,
    pub attestor_cert_vk: VerifyingKey,
    /// Rotate the data key every this many publications; 0 disables.
    pub rotate_every: u64,
    pub auth_listen: Option<String>,
    /// Stop after publishing this many measurements; `None` runs until
    /// stopped.
    pub count: Option<u64>,
    /// Follow the meter's rate schedule (open loop). When false, publish
    /// as fast as the pipe accepts.
    pub paced: bool,
    /// CSV of send timestamps (`meter_id,seq,send_us`) for latency joins.
    pub send_log: Option<PathBuf>,
    /// Hold publishing until this many subscriptions were granted through
    /// the authorization endpoint, so bounded runs lose nothing to
    /// startup races.
    pub wait_for_subscribers: u64,
}

/// Publisher-side policy for subscription requests: anything above Low
/// needs a valid attestation certificate covering the requested levels
/// and naming the requesting subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthDecision {
    Granted,
    Denied(String),
}

pub fn decide_authorization(
    subscriber_id: u64,
    levels: LevelSet,
    cert: Option<&AttestationCert>,
    cert_issuer: &VerifyingKey,
    now_ms: u64,
) -> AuthDecision {
    if levels.is_empty() {
        return AuthDecision::Denied("empty level set".to_string());
    }
    if levels.at_most_low() {
        // public data: register without attestation
        return AuthDecision::Granted;
    }
    let Some(cert) = cert else {
        return AuthDecision::Denied("attestation required above Low".to_string());
    };
    if !cert.verify(cert_issuer, now_ms) {
        return AuthDecision::Denied("attestation certificate invalid or expired".to_string());
    }
    if cert.platform_id != subscriber_id {
        return AuthDecision::Denied("certificate names a different platform".to_string());
    }
    if !levels.is_subset_of(&cert.granted) {
        return AuthDecision::Denied("requested levels exceed attested grant".to_string());
    }
    AuthDecision::Granted
}

fn auth_frame(sender_id: u64, payload: Vec<u8>) -> Publication {
    Publication::new(
        Topic::new(TOPIC_AUTH).expect("constant topic fits"),
        PrivacyLevel::Low,
        EncryptionMode::Plaintext,
        sender_id,
        0,
        payload,
    )
    .expect("auth frames are well-formed")
}

pub(super) fn encode_auth_req(
    subscriber_id: u64,
    filter: &TopicFilter,
    levels: LevelSet,
    cert: Option<&AttestationCert>,
) -> Vec<u8> {
    let filter_bytes = filter.as_wire_str().as_bytes();
    let cert_bytes = cert.map(|c| c.encode()).unwrap_or_default();
    let mut out = Vec::with_capacity(1 + 8 + 1 + filter_bytes.len() + 1 + 2 + cert_bytes.len());
    out.push(AUTH_REQ);
    out.extend_from_slice(&subscriber_id.to_le_bytes());
    out.push(filter_bytes.len() as u8);
    out.extend_from_slice(filter_bytes);
    out.push(levels.bits());
    out.extend_from_slice(&(cert_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(&cert_bytes);
    out
}

fn encode_auth_resp(decision: &AuthDecision) -> Vec<u8> {
    let (ok, reason) = match decision {
        AuthDecision::Granted => (1u8, ""),
        AuthDecision::Denied(r) => (0u8, r.as_str()),
    };
    let mut out = Vec::with_capacity(1 + 1 + 2 + reason.len());
    out.push(AUTH_RESP);
    out.push(ok);
    out.extend_from_slice(&(reason.len() as u16).to_le_bytes());
    out.extend_from_slice(reason.as_bytes());
    out
}

fn parse_auth_resp(payload: &[u8]) -> Option<AuthDecision> {
    if payload.len() < 4 || payload[0] != AUTH_RESP {
        return None;
    }
    let ok = payload[1] != 0;
    let len = u16::from_le_bytes(payload[2..4].try_into().ok()?) as usize;
    if payload.len() != 4 + len {
        return None;
    }
    if ok {
        Some(AuthDecision::Granted)
    } else {
        Some(AuthDecision::Denied(
            String::from_utf8_lossy(&payload[4..]).to_string(),
        ))
    }
}

/// Connect with bounded retries; lets processes come up in any order.
pub fn connect_retry(addr: &str, attempts: u32, delay: Duration) -> std::io::Result<TcpStream> {
    let mut last_err = None;
    for _ in 0..attempts.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                last_err = Some(e);
                std::thread::sleep(delay);
            }
        }
    }
    Err(last_err.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::Other, "no attempts")))
}

/// Ask a publisher to authorize a subscription on the caller's behalf.
/// On grant, the publisher signs and submits it to the broker itself.
pub fn request_authorization(
    auth_addr: &str,
    subscriber_id: u64,
    filter: &TopicFilter,
    levels: LevelSet,
    cert: Option<&AttestationCert>,
) -> Result<(), ClientError> {
    let stream = connect_retry(auth_addr, 50, Duration::from_millis(100))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    write_frame(
        &mut writer,
        &auth_frame(subscriber_id, encode_auth_req(subscriber_id, filter, levels, cert)),
    )?;
    writer.flush()?;
    let reply = read_frame(&mut reader)?;
    match parse_auth_resp(reply.payload()) {
        Some(AuthDecision::Granted) => Ok(()),
        Some(AuthDecision::Denied(reason)) => Err(ClientError::AuthorizationDenied(reason)),
        None => Err(ClientError::Timeout("well-formed auth response")),
    }
}

pub struct ProducerHandle {
    pub publisher_id: u64,
    pub auth_addr: Option<SocketAddr>,
    published: Arc<AtomicU64>,
    rotations: Arc<AtomicU64>,
    granted: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    publish_thread: Mutex<Option<JoinHandle<Result<u64, ClientError>>>>,
    auth_thread: Mutex<Option<JoinHandle<()>>>,
}

impl ProducerHandle {
    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    pub fn rotations(&self) -> u64 {
        self.rotations.load(Ordering::Relaxed)
    }

    /// Subscriptions granted and submitted via the auth endpoint.
    pub fn granted_subscriptions(&self) -> u64 {
        self.granted.load(Ordering::Relaxed)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    /// Wait for a count-bounded run to finish; returns the publish count.
    pub fn wait_done(&self) -> Result<u64, ClientError> {
        let handle = self
            .publish_thread
            .lock()
            .unwrap()
            .take()
            .ok_or(ClientError::Closed)?;
        handle.join().map_err(|_| ClientError::Closed)?
    }
}

impl Drop for ProducerHandle {
    fn drop(&mut self) {
        self.stop();
        if let Some(t) = self.publish_thread.lock().unwrap().take() {
            let _ = t.join();
        }
        if let Some(t) = self.auth_thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

pub struct Producer;

impl Producer {
    /// Bring the whole producer side up: attest, deposit the data key,
    /// register on the bus, start the authorization endpoint, then
    /// publish per the meter schedule.
    pub fn start(cfg: ProducerConfig) -> Result<ProducerHandle, ClientError> {
        let publisher_id = cfg.meter.meter_id;
        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        let signing_key = SigningKey::from_bytes(&seed);
        let mut mdc = Mdc::new(publisher_id, DataKey::generate(0), signing_key);

        // attest as producer and deposit the data key for issuance
        let mut attest = AttestClient::connect(&cfg.attestor_addr, publisher_id)?;
        let outcome = attest.attest(
            &cfg.platform,
            EnclaveIdentity {
                code: cfg.code,
                platform_id: publisher_id,
                role: Role::Producer,
            },
            &[],
        )?;
        if let Err(reason) = outcome {
            return Err(ClientError::AttestationRejected(reason));
        }
        if !attest.register_data_key(publisher_id, mdc.data_key())? {
            return Err(ClientError::Timeout("data key registration"));
        }

        let uplink = Arc::new(if cfg.via_dispatcher {
            UplinkConn::connect_via_dispatcher(&cfg.uplink_addr, publisher_id)?
        } else {
            UplinkConn::connect_direct(&cfg.uplink_addr, publisher_id)?
        });
        uplink.register_publisher(publisher_id, &mdc.verifying_key())?;

        let stop = Arc::new(AtomicBool::new(false));
        let published = Arc::new(AtomicU64::new(0));
        let rotations = Arc::new(AtomicU64::new(0));
        let granted = Arc::new(AtomicU64::new(0));

        // authorization endpoint: vet candidates, sign, submit
        let (auth_addr, auth_thread) = match &cfg.auth_listen {
            Some(listen) => {
                let listener = TcpListener::bind(listen.as_str())?;
                let addr = listener.local_addr()?;
                listener.set_nonblocking(true)?;
                let thread = spawn_auth_server(
                    listener,
                    AuthServerCtx {
                        signer: mdc.subscription_signer(),
                        cert_issuer: cfg.attestor_cert_vk,
                        uplink: Arc::clone(&uplink),
                        stop: Arc::clone(&stop),
                        granted: Arc::clone(&granted),
                    },
                )?;
                (Some(addr), Some(thread))
            }
            None => (None, None),
        };

        let publish_stop = Arc::clone(&stop);
        let publish_count = Arc::clone(&published);
        let publish_rotations = Arc::clone(&rotations);
        let publish_granted = Arc::clone(&granted);
        let publish_thread = std::thread::Builder::new()
            .name("producer-publish".into())
            .spawn(move || {
                publish_loop(
                    cfg,
                    &mut mdc,
                    attest,
                    uplink,
                    publish_stop,
                    publish_count,
                    publish_rotations,
                    publish_granted,
                )
            })
            .expect("spawn publish thread");

        Ok(ProducerHandle {
            publisher_id,
            auth_addr,
            published,
            rotations,
            granted,
            stop,
            publish_thread: Mutex::new(Some(publish_thread)),
            auth_thread: Mutex::new(auth_thread),
        })
    }
}

pub type SubscriptionSigner =
    Box<dyn Fn(u64, TopicFilter, LevelSet) -> crate::envelope::Subscription + Send>;

struct AuthServerCtx {
    signer: SubscriptionSigner,
    cert_issuer: VerifyingKey,
    uplink: Arc<UplinkConn>,
    stop: Arc<AtomicBool>,
    granted: Arc<AtomicU64>,
}

fn spawn_auth_server(listener: TcpListener, ctx: AuthServerCtx) -> std::io::Result<JoinHandle<()>> {
    std::thread::Builder::new()
        .name("publisher-auth".into())
        .spawn(move || {
            while !ctx.stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = serve_auth_conn(stream, &ctx);
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(20));
                    }
                    Err(_) => break,
                }
            }
        })
}

/// Authorization endpoint reusable by any publisher (the aggregator runs
/// one for its own subscribers).
pub fn spawn_publisher_auth_server(
    listener: TcpListener,
    signer: SubscriptionSigner,
    cert_issuer: VerifyingKey,
    uplink: Arc<UplinkConn>,
    stop: Arc<AtomicBool>,
) -> std::io::Result<JoinHandle<()>> {
    spawn_auth_server(
        listener,
        AuthServerCtx {
            signer,
            cert_issuer,
            uplink,
            stop,
            granted: Arc::new(AtomicU64::new(0)),
        },
    )
}

fn serve_auth_conn(stream: TcpStream, ctx: &AuthServerCtx) -> Result<(), ClientError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let frame = read_frame(&mut reader)?;
    if frame.header().topic().as_str() != TOPIC_AUTH {
        return Ok(());
    }
    let payload = frame.payload();
    let decision = match parse_auth_req(payload) {
        None => AuthDecision::Denied("malformed request".to_string()),
        Some((subscriber_id, filter, levels, cert)) => {
            let decision = decide_authorization(
                subscriber_id,
                levels,
                cert.as_ref(),
                &ctx.cert_issuer,
                unix_millis(),
            );
            if decision == AuthDecision::Granted {
                let sub = (ctx.signer)(subscriber_id, filter, levels);
                match ctx.uplink.submit_subscription(&sub) {
                    Ok(()) => {
                        ctx.granted.fetch_add(1, Ordering::Relaxed);
                        AuthDecision::Granted
                    }
                    Err(e) => AuthDecision::Denied(format!("broker refused: {e}")),
                }
            } else {
                decision
            }
        }
    };
    write_frame(
        &mut writer,
        &auth_frame(frame.header().publisher_id(), encode_auth_resp(&decision)),
    )?;
    writer.flush()?;
    Ok(())
}

fn parse_auth_req(payload: &[u8]) -> Option<(u64, TopicFilter, LevelSet, Option<AttestationCert>)> {
    if payload.len() < 1 + 8 + 1 || payload[0] != AUTH_REQ {
        return None;
    }
    let subscriber_id = u64::from_le_bytes(payload[1..9].try_into().ok()?);
    let filter_len = payload[9] as usize;
    let mut pos = 10;
    let filter_bytes = payload.get(pos..pos + filter_len)?;
    pos += filter_len;
    let filter = TopicFilter::parse(std::str::from_utf8(filter_bytes).ok()?).ok()?;
    let levels = LevelSet::from_bits(*payload.get(pos)?).ok()?;
    pos += 1;
    let cert_len = u16::from_le_bytes(payload.get(pos..pos + 2)?.try_into().ok()?) as usize;
    pos += 2;
    let cert_bytes = payload.get(pos..pos + cert_len)?;
    if pos + cert_len != payload.len() {
        return None;
    }
    let cert = if cert_len == 0 {
        None
    } else {
        Some(AttestationCert::decode(cert_bytes).ok()?)
    };
    Some((subscriber_id, filter, levels, cert))
}

#[allow(clippy::too_many_arguments)]
fn publish_loop(
    cfg: ProducerConfig,
    mdc: &mut Mdc,
    mut attest: AttestClient,
    uplink: Arc<UplinkConn>,
    stop: Arc<AtomicBool>,
    published: Arc<AtomicU64>,
    rotations: Arc<AtomicU64>,
    granted: Arc<AtomicU64>,
) -> Result<u64, ClientError> {
    // hold until the expected audience is wired up
    while granted.load(Ordering::Relaxed) < cfg.wait_for_subscribers {
        if stop.load(Ordering::Relaxed) {
            return Ok(0);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    let mut meter = MeterSim::new(cfg.meter.clone())?;
    let mut send_log = match &cfg.send_log {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            writeln!(f, "meter_id,seq,send_us")?;
            Some(f)
        }
        None => None,
    };
    if !cfg.paced {
        uplink.set_autoflush(false);
    }
    let period = cfg.meter.period();
    let start = Instant::now();
    let mut sent = 0u64;
    while !stop.load(Ordering::Relaxed) {
        if let Some(limit) = cfg.count {
            if sent >= limit {
                break;
            }
        }
        if cfg.paced {
            let target = start + period.mul_f64(sent as f64);
            if let Some(wait) = target.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            // behind schedule: send immediately and catch up
        }
        let m = meter.tick(unix_millis());
        let p = mdc.process(&m)?;
        if let Some(log) = send_log.as_mut() {
            writeln!(log, "{},{},{}", m.meter_id, m.seq, unix_micros())?;
        }
        uplink.publish(&p)?;
        sent += 1;
        published.store(sent, Ordering::Relaxed);
        if !cfg.paced && sent % 256 == 0 {
            uplink.flush()?;
        }
        if cfg.rotate_every > 0 && sent % cfg.rotate_every == 0 {
            let dk = mdc.rotate_key().clone();
            if !attest.register_data_key(mdc.publisher_id(), &dk)? {
                return Err(ClientError::Timeout("rotated key registration"));
            }
            rotations.fetch_add(1, Ordering::Relaxed);
        }
    }
    uplink.flush()?;
    if let Some(mut log) = send_log {
        log.flush()?;
    }
    Ok(sent)
}
