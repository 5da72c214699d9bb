//! End-to-end pipeline tests over real TCP on loopback:
//! attestor + broker + dispatcher + producer + aggregator + consumers.

use std::collections::HashMap;
use std::time::Duration;

use tierbus::aggregator::{AggregatorService, AggregatorServiceConfig, Scope};
use tierbus::attestation::{Attestor, AttestorServer, PlatformKey, Policy, Role};
use tierbus::broker::{BrokerMode, BrokerServer, QueueConfig};
use tierbus::clients::{
    ByteLog, ClientError, Consumer, ConsumerConfig, DecodedRecord, Dispatcher, MeterConfig,
    Producer, ProducerConfig, RetryPolicy, ValueModel,
};
use tierbus::crypto::{code_hash, CodeIdentity};
use tierbus::envelope::{EncryptionMode, LevelSet, PrivacyLevel};

struct Rig {
    platform: PlatformKey,
    attestor: AttestorServer,
    broker: BrokerServer,
    producer_code: CodeIdentity,
    aggregator_code: CodeIdentity,
    consumer_code: CodeIdentity,
}

fn rig(queue: QueueConfig) -> Rig {
    let platform = PlatformKey::generate();
    let producer_code = code_hash(b"rig producer");
    let aggregator_code = code_hash(b"rig aggregator");
    let consumer_code = code_hash(b"rig consumer");
    let mut policy = Policy::new(30_000);
    policy.allow(Role::Producer, producer_code);
    policy.allow(Role::Aggregator, aggregator_code);
    policy.allow(Role::Consumer, consumer_code);
    let attestor =
        AttestorServer::start("127.0.0.1:0", Attestor::new(policy, platform.verifying_key()))
            .unwrap();
    let broker = BrokerServer::start("127.0.0.1:0", queue).unwrap();
    Rig {
        platform,
        attestor,
        broker,
        producer_code,
        aggregator_code,
        consumer_code,
    }
}

impl Rig {
    fn producer_cfg(&self, meter_id: u64, count: u64, uplink_addr: String) -> ProducerConfig {
        ProducerConfig {
            meter: MeterConfig {
                meter_id,
                rate_hz: 1.0, // unused when not paced
                value_model: ValueModel::RandomWalk {
                    seed: meter_id,
                    step: 500,
                },
            },
            uplink_addr,
            via_dispatcher: true,
            attestor_addr: self.attestor.local_addr().to_string(),
            platform: self.platform.clone(),
            code: self.producer_code,
            attestor_cert_vk: self.attestor.cert_verifier(),
            rotate_every: 0,
            auth_listen: Some("127.0.0.1:0".to_string()),
            count: Some(count),
            paced: false,
            send_log: None,
            wait_for_subscribers: 1,
        }
    }

    fn consumer_cfg(
        &self,
        subscriber_id: u64,
        publisher_id: u64,
        auth_addr: &str,
        topic: &str,
        levels: LevelSet,
    ) -> ConsumerConfig {
        ConsumerConfig {
            subscriber_id,
            broker_addr: self.broker.local_addr().to_string(),
            attestor_addr: Some(self.attestor.local_addr().to_string()),
            platform: Some(self.platform.clone()),
            code: Some(self.consumer_code),
            producer_auth_addr: Some(auth_addr.to_string()),
            publisher_id,
            topic_filter: topic.to_string(),
            levels,
        }
    }
}

fn start_dispatcher(rig: &Rig, log: Option<ByteLog>) -> tierbus::clients::DispatcherHandle {
    Dispatcher {
        broker_addr: rig.broker.local_addr().to_string(),
        byte_log: log,
        retry: RetryPolicy::default(),
    }
    .start()
    .unwrap()
}

#[test]
fn attested_consumer_receives_full_ordered_stream() {
    let rig = rig(QueueConfig::default());
    let dispatcher = start_dispatcher(&rig, None);

    let total = 2_000u64;
    let producer = Producer::start(rig.producer_cfg(7, total, dispatcher.local_addr().to_string()))
        .unwrap();
    let auth_addr = producer.auth_addr.unwrap().to_string();

    let mut consumer = Consumer::connect(&rig.consumer_cfg(
        100,
        7,
        &auth_addr,
        "*",
        LevelSet::of(&[PrivacyLevel::High]),
    ))
    .unwrap();

    let mut got = Vec::new();
    while got.len() < total as usize {
        match consumer.recv(Duration::from_secs(10)).unwrap() {
            Some(r) => got.push(r),
            None => panic!("stream stalled after {} records", got.len()),
        }
    }
    assert_eq!(producer.wait_done().unwrap(), total);
    assert_eq!(got.len(), total as usize);
    assert_eq!(consumer.decode_failures(), 0);
    assert_eq!(consumer.order_violations(), 0);
    for (i, r) in got.iter().enumerate() {
        assert_eq!(r.privacy, PrivacyLevel::High);
        assert_eq!(r.enc, EncryptionMode::CounterMode);
        match &r.record {
            DecodedRecord::Measurement(m) => assert_eq!(m.seq, i as u64),
            other => panic!("unexpected record {other:?}"),
        }
    }
}

#[test]
fn unattested_consumer_denied_above_low() {
    let rig = rig(QueueConfig::default());
    let dispatcher = start_dispatcher(&rig, None);
    let producer = Producer::start(rig.producer_cfg(8, 10, dispatcher.local_addr().to_string()))
        .unwrap();
    let auth_addr = producer.auth_addr.unwrap().to_string();

    // no attestor: cannot request High
    let err = Consumer::connect(&ConsumerConfig {
        subscriber_id: 200,
        broker_addr: rig.broker.local_addr().to_string(),
        attestor_addr: None,
        platform: None,
        code: None,
        producer_auth_addr: Some(auth_addr.clone()),
        publisher_id: 8,
        topic_filter: "*".to_string(),
        levels: LevelSet::of(&[PrivacyLevel::High]),
    })
    .unwrap_err();
    assert!(matches!(err, ClientError::Config(_)));

    // attestation rejected (unknown code): High denied, Low path works
    let unknown_code = code_hash(b"not in policy");
    let err = Consumer::connect(&ConsumerConfig {
        subscriber_id: 201,
        broker_addr: rig.broker.local_addr().to_string(),
        attestor_addr: Some(rig.attestor.local_addr().to_string()),
        platform: Some(rig.platform.clone()),
        code: Some(unknown_code),
        producer_auth_addr: Some(auth_addr.clone()),
        publisher_id: 8,
        topic_filter: "*".to_string(),
        levels: LevelSet::of(&[PrivacyLevel::High]),
    })
    .unwrap_err();
    assert!(matches!(err, ClientError::AttestationRejected(_)));

    // same unattested party at Low is accepted by the publisher
    let consumer = Consumer::connect(&ConsumerConfig {
        subscriber_id: 202,
        broker_addr: rig.broker.local_addr().to_string(),
        attestor_addr: Some(rig.attestor.local_addr().to_string()),
        platform: Some(rig.platform.clone()),
        code: Some(unknown_code),
        producer_auth_addr: Some(auth_addr),
        publisher_id: 8,
        topic_filter: "*".to_string(),
        levels: LevelSet::of(&[PrivacyLevel::Low]),
    });
    assert!(consumer.is_ok());
    producer.stop();
}

#[test]
fn key_rotation_stale_epoch_recovers_via_rewrap() {
    let rig = rig(QueueConfig::default());
    let dispatcher = start_dispatcher(&rig, None);

    let total = 500u64;
    let mut cfg = rig.producer_cfg(9, total, dispatcher.local_addr().to_string());
    cfg.rotate_every = 100;
    // pace the stream so the consumer tracks each epoch; the attestor
    // re-wraps only the current key
    cfg.paced = true;
    cfg.meter.rate_hz = 2000.0;
    let producer = Producer::start(cfg).unwrap();
    let auth_addr = producer.auth_addr.unwrap().to_string();

    let mut consumer = Consumer::connect(&rig.consumer_cfg(
        300,
        9,
        &auth_addr,
        "*",
        LevelSet::of(&[PrivacyLevel::High]),
    ))
    .unwrap();

    let mut received = 0u64;
    loop {
        match consumer.recv(Duration::from_secs(5)).unwrap() {
            Some(_) => received += 1,
            None => break,
        }
        if received + consumer.decode_failures() >= total {
            break;
        }
    }
    assert_eq!(producer.wait_done().unwrap(), total);
    // each rotation costs at least the first new-epoch publication; after
    // the re-wrap the stream decodes again
    assert!(
        (4..=40).contains(&consumer.decode_failures()),
        "failures {}",
        consumer.decode_failures()
    );
    assert_eq!(received + consumer.decode_failures(), total);
    assert_eq!(consumer.order_violations(), 0);
}

#[test]
fn aggregation_tiers_end_to_end() {
    let rig = rig(QueueConfig::default());
    let dispatcher = start_dispatcher(&rig, None);

    let total = 600u64;
    let mut cfg = rig.producer_cfg(11, total, dispatcher.local_addr().to_string());
    // aggregator + one direct High consumer
    cfg.wait_for_subscribers = 2;
    let producer = Producer::start(cfg).unwrap();
    let auth_addr = producer.auth_addr.unwrap().to_string();

    let aggregator = AggregatorService::start(AggregatorServiceConfig {
        aggregator_id: 900,
        raw_publisher_id: 11,
        broker_addr: rig.broker.local_addr().to_string(),
        attestor_addr: rig.attestor.local_addr().to_string(),
        producer_auth_addr: auth_addr.clone(),
        platform: rig.platform.clone(),
        code: rig.aggregator_code,
        attestor_cert_vk: rig.attestor.cert_verifier(),
        window_ms: 200,
        grace_ms: 100,
        regions: HashMap::from([(11, 5)]),
        auth_listen: Some("127.0.0.1:0".to_string()),
        audit_log: None,
    })
    .unwrap();
    let agg_auth = aggregator.auth_addr.unwrap().to_string();

    // utility consumer: Moderate per-meter aggregates (encrypted)
    let mut utility = Consumer::connect(&rig.consumer_cfg(
        400,
        900,
        &agg_auth,
        "agg.meter",
        LevelSet::of(&[PrivacyLevel::Moderate]),
    ))
    .unwrap();

    // public consumer: unattested, Low regional aggregates (plaintext)
    let mut public = Consumer::connect(&ConsumerConfig {
        subscriber_id: 401,
        broker_addr: rig.broker.local_addr().to_string(),
        attestor_addr: None,
        platform: None,
        code: None,
        producer_auth_addr: Some(agg_auth),
        publisher_id: 900,
        topic_filter: "agg.region".to_string(),
        levels: LevelSet::of(&[PrivacyLevel::Low]),
    })
    .unwrap();

    // direct High consumer unblocks the producer's second slot
    let mut direct = Consumer::connect(&rig.consumer_cfg(
        402,
        11,
        &auth_addr,
        "meter",
        LevelSet::of(&[PrivacyLevel::High]),
    ))
    .unwrap();

    assert_eq!(producer.wait_done().unwrap(), total);
    // drain the direct stream to confirm raw data flowed
    let mut direct_count = 0u64;
    while let Some(_r) = direct.recv(Duration::from_millis(800)).unwrap() {
        direct_count += 1;
        if direct_count == total {
            break;
        }
    }
    assert_eq!(direct_count, total);

    // wait for the aggregator to ingest and close windows
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while aggregator.ingested() < total && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(50));
    }
    assert_eq!(aggregator.ingested(), total);
    aggregator.stop().unwrap();

    let mut utility_records = Vec::new();
    while let Some(r) = utility.recv(Duration::from_millis(500)).unwrap() {
        assert_eq!(r.privacy, PrivacyLevel::Moderate);
        assert_eq!(r.enc, EncryptionMode::CounterMode);
        match r.record {
            DecodedRecord::Aggregate(a) => {
                assert!(matches!(a.scope, Scope::PerMeter(11)));
                utility_records.push(a);
            }
            other => panic!("unexpected record {other:?}"),
        }
    }
    assert!(!utility_records.is_empty());

    let mut public_records = Vec::new();
    while let Some(r) = public.recv(Duration::from_millis(500)).unwrap() {
        assert_eq!(r.privacy, PrivacyLevel::Low);
        assert_eq!(r.enc, EncryptionMode::Plaintext);
        match r.record {
            DecodedRecord::Aggregate(a) => {
                assert!(matches!(a.scope, Scope::Regional(5)));
                public_records.push(a);
            }
            other => panic!("unexpected record {other:?}"),
        }
    }
    assert!(!public_records.is_empty());
    assert_eq!(public.decode_failures(), 0);

    // conservation across tiers: total count in per-meter records equals
    // total count in regional records, and both cover every measurement
    let meter_count: u64 = utility_records.iter().map(|r| r.count).sum();
    let regional_count: u64 = public_records.iter().map(|r| r.count).sum();
    assert_eq!(meter_count, total);
    assert_eq!(regional_count, total);
    let meter_sum: u128 = utility_records.iter().map(|r| r.sum_mw).sum();
    let regional_sum: u128 = public_records.iter().map(|r| r.sum_mw).sum();
    assert_eq!(meter_sum, regional_sum);
}

#[test]
fn dispatcher_log_never_contains_plaintext_records() {
    let rig = rig(QueueConfig::default());
    let log = ByteLog::new();
    let dispatcher = start_dispatcher(&rig, Some(log.clone()));

    let total = 1_000u64;
    let producer = Producer::start(rig.producer_cfg(13, total, dispatcher.local_addr().to_string()))
        .unwrap();
    let auth_addr = producer.auth_addr.unwrap().to_string();
    let mut consumer = Consumer::connect(&rig.consumer_cfg(
        500,
        13,
        &auth_addr,
        "*",
        LevelSet::of(&[PrivacyLevel::High]),
    ))
    .unwrap();

    let mut plaintexts = Vec::new();
    let mut received = 0;
    while received < total {
        match consumer.recv(Duration::from_secs(10)).unwrap() {
            Some(r) => {
                if let DecodedRecord::Measurement(m) = r.record {
                    plaintexts.push(m.encode());
                    received += 1;
                }
            }
            None => panic!("stalled at {received}"),
        }
    }
    producer.wait_done().unwrap();

    let bytes = log.snapshot();
    assert!(!bytes.is_empty());
    for (i, p) in plaintexts.iter().enumerate() {
        assert!(
            memchr::memmem::find(&bytes, p).is_none(),
            "plaintext record {i} leaked into the gateway log"
        );
    }
}
