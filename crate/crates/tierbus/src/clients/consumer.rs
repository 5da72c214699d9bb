//! Consumer endpoint: attest (when subscribing above Low), obtain the
//! publisher's authorization, then receive and decode the stream.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use super::producer::request_authorization;
use super::ClientError;
use crate::aggregator::AggregateRecord;
use crate::attestation::{
    AttestClient, AttestationCert, EnclaveIdentity, PlatformKey, Role,
};
use crate::broker::{ctl_frame, encode_hello, parse_ack};
use crate::crypto::{open_message, CodeIdentity, DataKey};
use crate::envelope::{
    write_frame, EncryptionMode, FrameReader, LevelSet, Measurement, PrivacyLevel, Topic,
    TopicFilter, TOPIC_CTL, RECORD_TAG_AGGREGATE, RECORD_TAG_MEASUREMENT,
};
use crate::sys::unix_micros;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodedRecord {
    Measurement(Measurement),
    Aggregate(AggregateRecord),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedRecord {
    pub topic: Topic,
    pub privacy: PrivacyLevel,
    pub enc: EncryptionMode,
    pub publisher_id: u64,
    pub key_epoch: u32,
    pub record: DecodedRecord,
    pub recv_us: u64,
}

pub const CONSUMER_CSV_HEADER: &str = "recv_ts_us,meter_id,ts_ms,value_mw,seq,latency_us";

impl ReceivedRecord {
    /// One row per decoded record. Aggregates reuse the measurement
    /// columns: id is the scope id, ts the window start, value the mean,
    /// seq the count.
    pub fn csv_row(&self) -> String {
        match &self.record {
            DecodedRecord::Measurement(m) => format!(
                "{},{},{},{},{},{}",
                self.recv_us,
                m.meter_id,
                m.timestamp_ms,
                m.value_mw,
                m.seq,
                self.recv_us.saturating_sub(m.timestamp_ms * 1000),
            ),
            DecodedRecord::Aggregate(a) => {
                let id = match a.scope {
                    crate::aggregator::Scope::PerMeter(id) => id,
                    crate::aggregator::Scope::Regional(id) => id,
                };
                format!(
                    "{},{},{},{},{},{}",
                    self.recv_us,
                    id,
                    a.window.start_ms,
                    a.mean_mw,
                    a.count,
                    self.recv_us.saturating_sub(a.window.end_ms() * 1000),
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsumerConfig {
    pub subscriber_id: u64,
    pub broker_addr: String,
    /// `None` runs unattested: only Plaintext payloads will decode.
    pub attestor_addr: Option<String>,
    pub platform: Option<PlatformKey>,
    pub code: Option<CodeIdentity>,
    /// Publisher authorization endpoint; `None` when some other party
    /// already submitted the subscription.
    pub producer_auth_addr: Option<String>,
    pub publisher_id: u64,
    pub topic_filter: String,
    pub levels: LevelSet,
}

/// Receiving endpoint. Tracks data keys per (publisher, epoch), counts
/// decode failures instead of dying on them, and checks per-publisher
/// ordering.
pub struct Consumer {
    reader: FrameReader<TcpStream>,
    keys: HashMap<(u64, u32), DataKey>,
    attest: Option<AttestClient>,
    certificate: Option<AttestationCert>,
    decode_failures: u64,
    order_violations: u64,
    last_seq: HashMap<u64, u64>,
}

impl std::fmt::Debug for Consumer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Consumer")
            .field("keys", &self.keys.len())
            .field("decode_failures", &self.decode_failures)
            .field("order_violations", &self.order_violations)
            .finish()
    }
}

impl Consumer {
    pub fn connect(cfg: &ConsumerConfig) -> Result<Consumer, ClientError> {
        let mut keys = HashMap::new();
        let mut attest = None;
        let mut certificate = None;

        if let Some(attestor_addr) = &cfg.attestor_addr {
            let platform = cfg
                .platform
                .as_ref()
                .ok_or_else(|| ClientError::Config("attestor set but no platform key".into()))?;
            let code = cfg
                .code
                .ok_or_else(|| ClientError::Config("attestor set but no code identity".into()))?;
            let mut client = AttestClient::connect(attestor_addr, cfg.subscriber_id)?;
            let outcome = client.attest(
                platform,
                EnclaveIdentity {
                    code,
                    platform_id: cfg.subscriber_id,
                    role: Role::Consumer,
                },
                &[cfg.publisher_id],
            )?;
            match outcome {
                Ok(attestation) => {
                    for (publisher, dk) in attestation.keys {
                        keys.insert((publisher, dk.key_id()), dk);
                    }
                    certificate = Some(attestation.certificate);
                    attest = Some(client);
                }
                Err(reason) => {
                    // an unattested party may still take the Low path
                    if !cfg.levels.at_most_low() {
                        return Err(ClientError::AttestationRejected(reason));
                    }
                }
            }
        } else if cfg.producer_auth_addr.is_some() && !cfg.levels.at_most_low() {
            // the publisher would deny this anyway; fail before asking
            return Err(ClientError::Config(
                "requesting levels above Low requires an attestor".into(),
            ));
        }

        // attach the delivery channel before any subscription can be
        // stored, otherwise publications routed in between are lost
        let stream = {
            let mut attempt = 0;
            loop {
                match crate::sys::bounded_connect(&cfg.broker_addr, crate::sys::DATA_SOCKET_BUF) {
                    Ok(s) => break s,
                    Err(e) if attempt < 50 => {
                        let _ = e;
                        attempt += 1;
                        std::thread::sleep(Duration::from_millis(100));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        stream.set_read_timeout(Some(Duration::from_millis(100)))?;
        let mut reader = FrameReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        write_frame(
            &mut writer,
            &ctl_frame(cfg.subscriber_id, encode_hello(cfg.subscriber_id)),
        )?;
        writer.flush()?;
        // the hello ack is the first ctl frame back
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            match reader.poll_frame() {
                Ok(Some(f)) if f.header().topic().as_str() == TOPIC_CTL => {
                    let ack = parse_ack(f.payload()).ok_or(ClientError::Timeout("hello ack"))?;
                    if !ack.ok {
                        return Err(ClientError::BrokerRefused(ack.code));
                    }
                    break;
                }
                Ok(_) => {
                    if Instant::now() > deadline {
                        return Err(ClientError::Timeout("hello ack"));
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }

        if let Some(auth_addr) = &cfg.producer_auth_addr {
            let filter = TopicFilter::parse(&cfg.topic_filter)?;
            request_authorization(
                auth_addr,
                cfg.subscriber_id,
                &filter,
                cfg.levels,
                certificate.as_ref(),
            )?;
        }

        Ok(Consumer {
            reader,
            keys,
            attest,
            certificate,
            decode_failures: 0,
            order_violations: 0,
            last_seq: HashMap::new(),
        })
    }

    pub fn certificate(&self) -> Option<&AttestationCert> {
        self.certificate.as_ref()
    }

    pub fn decode_failures(&self) -> u64 {
        self.decode_failures
    }

    pub fn order_violations(&self) -> u64 {
        self.order_violations
    }

    /// Inject a data key directly (test wiring).
    pub fn add_key(&mut self, publisher_id: u64, dk: DataKey) {
        self.keys.insert((publisher_id, dk.key_id()), dk);
    }

    /// Next decodable record, or `None` when `timeout` elapses first.
    /// Undecodable publications (missing key, tamper, unknown tag) are
    /// counted and skipped; after a missing-epoch failure the consumer
    /// asks the attestor for a re-wrap so later messages decode.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<ReceivedRecord>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let frame = match self.reader.poll_frame() {
                Ok(Some(f)) => f,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    continue;
                }
                Err(crate::envelope::EnvelopeError::Io(e))
                    if e.kind() == std::io::ErrorKind::UnexpectedEof =>
                {
                    return Err(ClientError::Closed);
                }
                Err(e) => return Err(e.into()),
            };
            let recv_us = unix_micros();
            let header = frame.header();
            if header.topic().as_str() == TOPIC_CTL {
                continue; // stray acks
            }
            let publisher_id = header.publisher_id();
            let key_epoch = header.key_epoch();
            let body = match header.enc() {
                EncryptionMode::Plaintext => frame.payload().to_vec(),
                EncryptionMode::CounterMode => {
                    let key = match self.keys.get(&(publisher_id, key_epoch)) {
                        Some(k) => k,
                        None => {
                            // stale epoch: count the miss, then re-wrap for
                            // the messages that follow
                            self.decode_failures += 1;
                            self.try_refresh(publisher_id);
                            continue;
                        }
                    };
                    match open_message(key, publisher_id, frame.payload()) {
                        Ok(b) => b,
                        Err(_) => {
                            self.decode_failures += 1;
                            continue;
                        }
                    }
                }
            };
            let record = match body.first() {
                Some(&RECORD_TAG_MEASUREMENT) => match Measurement::decode(&body) {
                    Ok(m) => DecodedRecord::Measurement(m),
                    Err(_) => {
                        self.decode_failures += 1;
                        continue;
                    }
                },
                Some(&RECORD_TAG_AGGREGATE) => match AggregateRecord::decode(&body) {
                    Ok(a) => DecodedRecord::Aggregate(a),
                    Err(_) => {
                        self.decode_failures += 1;
                        continue;
                    }
                },
                _ => {
                    self.decode_failures += 1;
                    continue;
                }
            };
            if let DecodedRecord::Measurement(m) = &record {
                if let Some(prev) = self.last_seq.insert(m.meter_id, m.seq) {
                    if m.seq <= prev {
                        self.order_violations += 1;
                    }
                }
            }
            return Ok(Some(ReceivedRecord {
                topic: header.topic().clone(),
                privacy: header.privacy(),
                enc: header.enc(),
                publisher_id,
                key_epoch,
                record,
                recv_us,
            }));
        }
    }

    fn try_refresh(&mut self, publisher_id: u64) {
        if let Some(client) = self.attest.as_mut() {
            if let Ok(Some(dk)) = client.refresh_key(publisher_id) {
                self.keys.insert((publisher_id, dk.key_id()), dk);
            }
        }
    }
}
