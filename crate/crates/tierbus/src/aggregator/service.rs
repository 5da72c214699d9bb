//! Attested aggregation service: subscribes to the raw High stream,
//! folds windows, and republishes at the lower tiers under its own
//! publisher identity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;

use super::{audit_csv_row, republish, AggregatorCore, AUDIT_CSV_HEADER};
use crate::attestation::{AttestClient, EnclaveIdentity, PlatformKey, Role};
use crate::clients::{ClientError, Consumer, ConsumerConfig, DecodedRecord, UplinkConn};
use crate::crypto::{CodeIdentity, DataKey};
use crate::envelope::{LevelSet, PrivacyLevel, Subscription, TopicFilter, TOPIC_METER};
use crate::sys::unix_millis;

#[derive(Clone)]
pub struct AggregatorServiceConfig {
    /// Platform and publisher identity of the aggregator itself.
    pub aggregator_id: u64,
    /// The raw stream it consumes.
    pub raw_publisher_id: u64,
    pub broker_addr: String,
    pub attestor_addr: String,
    /// The raw publisher's authorization endpoint.
    pub producer_auth_addr: String,
    pub platform: PlatformKey,
    pub code: CodeIdentity,
    pub attestor_cert_vk: VerifyingKey,
    pub window_ms: u64,
    pub grace_ms: u64,
    pub regions: HashMap<u64, u64>,
    /// Authorization endpoint for this aggregator's own subscribers.
    pub auth_listen: Option<String>,
    /// CSV audit log of every emitted record, for oracle checks.
    pub audit_log: Option<PathBuf>,
}

pub struct AggregatorService {
    pub auth_addr: Option<SocketAddr>,
    pub publisher_id: u64,
    stop: Arc<AtomicBool>,
    ingested: Arc<AtomicU64>,
    emitted: Arc<AtomicU64>,
    main_thread: Mutex<Option<JoinHandle<Result<(), ClientError>>>>,
}

impl AggregatorService {
    pub fn ingested(&self) -> u64 {
        self.ingested.load(Ordering::Relaxed)
    }

    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::Relaxed)
    }

    pub fn stop(&self) -> Result<(), ClientError> {
        self.stop.store(true, Ordering::Relaxed);
        match self.main_thread.lock().unwrap().take() {
            Some(t) => t.join().map_err(|_| ClientError::Closed)?,
            None => Ok(()),
        }
    }

    /// Attest, fetch the raw key, register as publisher, subscribe to the
    /// raw stream, then run ingest/close/republish until stopped.
    pub fn start(cfg: AggregatorServiceConfig) -> Result<AggregatorService, ClientError> {
        // attest as aggregator; the raw key may not be deposited yet, the
        // consumer refreshes on demand
        let mut attest = AttestClient::connect(&cfg.attestor_addr, cfg.aggregator_id)?;
        let outcome = attest.attest(
            &cfg.platform,
            EnclaveIdentity {
                code: cfg.code,
                platform_id: cfg.aggregator_id,
                role: Role::Aggregator,
            },
            &[cfg.raw_publisher_id],
        )?;
        let attestation = match outcome {
            Ok(a) => a,
            Err(reason) => return Err(ClientError::AttestationRejected(reason)),
        };

        // own output key, deposited for this aggregator's consumers
        let own_key = DataKey::generate(0);
        if !attest.register_data_key(cfg.aggregator_id, &own_key)? {
            return Err(ClientError::Timeout("aggregate key registration"));
        }

        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        let signing_key = SigningKey::from_bytes(&seed);

        // publisher side: direct broker connection
        let uplink = Arc::new(UplinkConn::connect_direct(&cfg.broker_addr, cfg.aggregator_id)?);
        uplink.register_publisher(cfg.aggregator_id, &signing_key.verifying_key())?;

        // consumer side: request authorization with our certificate, then
        // attach to the broker
        let mut consumer = Consumer::connect(&ConsumerConfig {
            subscriber_id: cfg.aggregator_id,
            broker_addr: cfg.broker_addr.clone(),
            attestor_addr: None, // already attested above
            platform: None,
            code: None,
            producer_auth_addr: None,
            publisher_id: cfg.raw_publisher_id,
            topic_filter: TOPIC_METER.to_string(),
            levels: LevelSet::of(&[PrivacyLevel::High]),
        })?;
        for (publisher, dk) in &attestation.keys {
            consumer.add_key(*publisher, dk.clone());
        }
        crate::clients::request_authorization(
            &cfg.producer_auth_addr,
            cfg.aggregator_id,
            &TopicFilter::parse(TOPIC_METER)?,
            LevelSet::of(&[PrivacyLevel::High]),
            Some(&attestation.certificate),
        )?;

        let stop = Arc::new(AtomicBool::new(false));
        let ingested = Arc::new(AtomicU64::new(0));
        let emitted = Arc::new(AtomicU64::new(0));

        // its own subscribers authorize here
        let auth_addr = match &cfg.auth_listen {
            Some(listen) => {
                let listener = TcpListener::bind(listen.as_str())?;
                let addr = listener.local_addr()?;
                listener.set_nonblocking(true)?;
                crate::clients::spawn_publisher_auth_server(
                    listener,
                    subscription_signer(signing_key, cfg.aggregator_id),
                    cfg.attestor_cert_vk,
                    Arc::clone(&uplink),
                    Arc::clone(&stop),
                )?;
                Some(addr)
            }
            None => None,
        };

        let mut audit = match &cfg.audit_log {
            Some(path) => {
                let mut f = BufWriter::new(File::create(path)?);
                writeln!(f, "{AUDIT_CSV_HEADER}")?;
                Some(f)
            }
            None => None,
        };

        let core = AggregatorCore::new(cfg.window_ms, cfg.grace_ms, cfg.regions.clone())
            .map_err(|e| ClientError::Config(e.to_string()))?;

        let loop_stop = Arc::clone(&stop);
        let loop_ingested = Arc::clone(&ingested);
        let loop_emitted = Arc::clone(&emitted);
        let aggregator_id = cfg.aggregator_id;
        let main_thread = std::thread::Builder::new()
            .name("aggregator-main".into())
            .spawn(move || -> Result<(), ClientError> {
                let mut core = core;
                let mut attest = attest;
                let mut consumer = consumer;
                let mut seq = 0u64;
                loop {
                    let stopping = loop_stop.load(Ordering::Relaxed);
                    match consumer.recv(Duration::from_millis(50))? {
                        Some(received) => {
                            if let DecodedRecord::Measurement(m) = received.record {
                                core.ingest(&m);
                                loop_ingested.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        None => {
                            // idle: maybe the raw key rotated before we had it
                            if let Ok(Some(dk)) = attest.refresh_key(cfg.raw_publisher_id) {
                                consumer.add_key(cfg.raw_publisher_id, dk);
                            }
                        }
                    }
                    let due = if stopping {
                        // drain every open window on the way out
                        core.open_windows()
                            .into_iter()
                            .flat_map(|start| core.close_window_at(start))
                            .collect()
                    } else {
                        core.close_due(unix_millis())
                    };
                    for record in due {
                        let publication = republish(&record, aggregator_id, &own_key, seq)
                            .map_err(|e| ClientError::Config(e.to_string()))?;
                        seq += 1;
                        uplink.publish(&publication)?;
                        loop_emitted.fetch_add(1, Ordering::Relaxed);
                        if let Some(f) = audit.as_mut() {
                            writeln!(f, "{}", audit_csv_row(&record))?;
                        }
                    }
                    if stopping {
                        uplink.flush()?;
                        if let Some(mut f) = audit.take() {
                            f.flush()?;
                        }
                        return Ok(());
                    }
                }
            })
            .expect("spawn aggregator main thread");

        Ok(AggregatorService {
            auth_addr,
            publisher_id: cfg.aggregator_id,
            stop,
            ingested,
            emitted,
            main_thread: Mutex::new(Some(main_thread)),
        })
    }
}

fn subscription_signer(
    key: SigningKey,
    publisher_id: u64,
) -> Box<dyn Fn(u64, TopicFilter, LevelSet) -> Subscription + Send> {
    Box::new(move |subscriber_id, filter, levels| {
        let msg = Subscription::signing_bytes(subscriber_id, publisher_id, &filter, levels);
        Subscription {
            subscriber_id,
            publisher_id,
            topic_filter: filter,
            levels,
            authorization: key.sign(&msg).to_bytes(),
        }
    })
}
