//! Content-based routing engine with publisher-gated subscriptions and
//! bounded queues.
//!
//! Structure mirrors the routing service it stands in for: many
//! connection threads feed one bounded ingress queue; a single routing
//! thread runs the match step; per-subscriber bounded queues decouple
//! slow receivers. Back-pressure is flow control by blocking the
//! producer-side enqueue (and, at the server, by not reading the
//! socket), never by dropping.

mod server;

pub use server::{
    ctl_frame, encode_hello, encode_metrics_req, encode_register, encode_subscribe, parse_ack,
    parse_metrics_resp, BrokerServer, CtlAck, ACK_BAD_AUTHORIZATION, ACK_DUPLICATE, ACK_OK,
    ACK_PROTOCOL, ACK_UNKNOWN_PUBLISHER,
};

use std::collections::{BTreeSet, HashMap};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envelope::{
    encode_publication, match_header, MessageHeader, Publication, Subscription, RESERVED_TOPICS,
};
use crate::sys;

#[derive(Error, Debug)]
pub enum BrokerError {
    #[error("publisher {0} already registered")]
    DuplicatePublisher(u64),
    #[error("publisher {0} not registered")]
    UnknownPublisher(u64),
    #[error("subscription authorization does not verify")]
    BadAuthorization,
    #[error("topic {0:?} is reserved for control traffic")]
    ReservedTopic(String),
    #[error("broker is stopped")]
    Stopped,
}

/// SecureSim routes each message through the attested-identity code path
/// (an extra digest over the header plus a configurable overhead hook);
/// Regular skips it. Delivered sets are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerMode {
    SecureSim,
    Regular,
}

impl FromStr for BrokerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "secure" | "securesim" | "sgx" => Ok(BrokerMode::SecureSim),
            "regular" => Ok(BrokerMode::Regular),
            other => Err(format!("unknown broker mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    /// Ingress queue capacity in publications.
    pub capacity: usize,
    pub mode: BrokerMode,
    /// Per-subscriber outbound buffer; overflowing it disconnects that
    /// subscriber so the shared queue never stalls on one receiver.
    pub subscriber_buffer: usize,
    /// Fixed per-message overhead hook (busy-wait, nanoseconds) applied
    /// in SecureSim mode; used by saturation experiments.
    pub overhead_ns: u64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            capacity: 65_536,
            mode: BrokerMode::Regular,
            subscriber_buffer: 8_192,
            overhead_ns: 0,
        }
    }
}

/// Point-in-time copy of the broker counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub ts_us: u64,
    pub published: u64,
    pub delivered: u64,
    pub rejected: u64,
    pub subscriber_drops: u64,
    pub queue_depth: usize,
    pub lat_p50_us: u64,
    pub lat_p99_us: u64,
    pub cpu_ms: u64,
}

impl MetricsSnapshot {
    pub fn csv_header() -> &'static str {
        "ts_us,published,delivered,rejected,queue_depth,lat_p50_us,lat_p99_us,cpu_ms"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.ts_us,
            self.published,
            self.delivered,
            self.rejected,
            self.queue_depth,
            self.lat_p50_us,
            self.lat_p99_us,
            self.cpu_ms
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<MetricsSnapshot> {
        let mut f = row.trim().split(',');
        let snap = MetricsSnapshot {
            ts_us: f.next()?.parse().ok()?,
            published: f.next()?.parse().ok()?,
            delivered: f.next()?.parse().ok()?,
            rejected: f.next()?.parse().ok()?,
            queue_depth: f.next()?.parse().ok()?,
            lat_p50_us: f.next()?.parse().ok()?,
            lat_p99_us: f.next()?.parse().ok()?,
            cpu_ms: f.next()?.parse().ok()?,
            subscriber_drops: 0,
        };
        if f.next().is_some() {
            return None;
        }
        Some(snap)
    }
}

/// Log2-bucketed latency histogram; lock-free recording, approximate
/// percentiles (bucket upper bounds) for the monitoring CSV.
struct LatencyHistogram {
    buckets: [AtomicU64; 40],
    total: AtomicU64,
}

impl LatencyHistogram {
    fn new() -> LatencyHistogram {
        LatencyHistogram {
            buckets: std::array::from_fn(|_| AtomicU64::new(0)),
            total: AtomicU64::new(0),
        }
    }

    fn bucket_index(us: u64) -> usize {
        ((64 - us.max(1).leading_zeros()) as usize).min(39)
    }

    fn record(&self, us: u64) {
        self.buckets[Self::bucket_index(us)].fetch_add(1, Ordering::Relaxed);
        self.total.fetch_add(1, Ordering::Relaxed);
    }

    fn percentile(&self, q: f64) -> u64 {
        let total = self.total.load(Ordering::Relaxed);
        if total == 0 {
            return 0;
        }
        let target = ((total as f64) * q).ceil() as u64;
        let mut cumulative = 0u64;
        for (idx, b) in self.buckets.iter().enumerate() {
            cumulative += b.load(Ordering::Relaxed);
            if cumulative >= target {
                return 1u64 << idx;
            }
        }
        1u64 << 39
    }
}

struct Metrics {
    published: AtomicU64,
    delivered: AtomicU64,
    rejected: AtomicU64,
    subscriber_drops: AtomicU64,
    latency: LatencyHistogram,
}

impl Metrics {
    fn new() -> Metrics {
        Metrics {
            published: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            subscriber_drops: AtomicU64::new(0),
            latency: LatencyHistogram::new(),
        }
    }
}

struct PublisherEntry {
    key: VerifyingKey,
    subs: Vec<Subscription>,
}

/// Publisher registrations and their authorized subscriptions. Every
/// stored subscription's signature verified against the publisher key at
/// insert time.
#[derive(Default)]
pub struct RoutingTable {
    by_publisher: HashMap<u64, PublisherEntry>,
}

impl RoutingTable {
    pub fn register(&mut self, publisher_id: u64, key: VerifyingKey) -> Result<(), BrokerError> {
        if self.by_publisher.contains_key(&publisher_id) {
            return Err(BrokerError::DuplicatePublisher(publisher_id));
        }
        self.by_publisher.insert(
            publisher_id,
            PublisherEntry {
                key,
                subs: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, publisher_id: u64) -> bool {
        self.by_publisher.contains_key(&publisher_id)
    }

    /// Store a subscription iff its authorization verifies under the
    /// publisher's registered key. Resubmission is idempotent.
    pub fn insert(&mut self, sub: Subscription) -> Result<(), BrokerError> {
        let entry = self
            .by_publisher
            .get_mut(&sub.publisher_id)
            .ok_or(BrokerError::UnknownPublisher(sub.publisher_id))?;
        let msg = Subscription::signing_bytes(
            sub.subscriber_id,
            sub.publisher_id,
            &sub.topic_filter,
            sub.levels,
        );
        entry
            .key
            .verify(&msg, &Signature::from_bytes(&sub.authorization))
            .map_err(|_| BrokerError::BadAuthorization)?;
        let key = sub.dedup_key();
        if !entry.subs.iter().any(|s| s.dedup_key() == key) {
            entry.subs.push(sub);
        }
        Ok(())
    }

    /// Subscribers whose stored subscription matches the header. Indexed
    /// by publisher; the linear-scan oracle over
    /// [`all_subscriptions`](Self::all_subscriptions) must agree.
    pub fn route(&self, header: &MessageHeader) -> Vec<u64> {
        let mut out = BTreeSet::new();
        if let Some(entry) = self.by_publisher.get(&header.publisher_id()) {
            for sub in &entry.subs {
                if match_header(header, sub) {
                    out.insert(sub.subscriber_id);
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn all_subscriptions(&self) -> Vec<Subscription> {
        self.by_publisher
            .values()
            .flat_map(|e| e.subs.iter().cloned())
            .collect()
    }

    pub fn subscription_count(&self) -> usize {
        self.by_publisher.values().map(|e| e.subs.len()).sum()
    }
}

/// A routed message headed for one subscriber: the frame is encoded once
/// and shared across the fan-out.
#[derive(Clone)]
pub struct Delivery {
    pub frame: Arc<Vec<u8>>,
    pub enqueued: Instant,
}

struct IngressItem {
    publication: Publication,
    enqueued: Instant,
}

struct Shared {
    cfg: QueueConfig,
    table: RwLock<RoutingTable>,
    metrics: Metrics,
    subscribers: Mutex<HashMap<u64, Sender<Delivery>>>,
    stop: AtomicBool,
    queue_len: AtomicUsize,
    start: Instant,
}

/// Handle to a running broker engine. Cheap to clone; [`Broker::stop`]
/// shuts the routing thread down.
#[derive(Clone)]
pub struct Broker {
    shared: Arc<Shared>,
    ingress: Sender<IngressItem>,
    routing_thread: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl Broker {
    pub fn start(cfg: QueueConfig) -> Broker {
        let (tx, rx) = bounded::<IngressItem>(cfg.capacity);
        let shared = Arc::new(Shared {
            cfg,
            table: RwLock::new(RoutingTable::default()),
            metrics: Metrics::new(),
            subscribers: Mutex::new(HashMap::new()),
            stop: AtomicBool::new(false),
            queue_len: AtomicUsize::new(0),
            start: Instant::now(),
        });
        let loop_shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("broker-routing".into())
            .spawn(move || routing_loop(loop_shared, rx))
            .expect("spawn routing thread");
        Broker {
            shared,
            ingress: tx,
            routing_thread: Arc::new(Mutex::new(Some(handle))),
        }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.shared.cfg
    }

    pub fn register_publisher(&self, publisher_id: u64, key: VerifyingKey) -> Result<(), BrokerError> {
        self.shared.table.write().unwrap().register(publisher_id, key)
    }

    pub fn submit_subscription(&self, sub: Subscription) -> Result<(), BrokerError> {
        self.shared.table.write().unwrap().insert(sub)
    }

    /// Attach a delivery queue for a subscriber id. Reattaching replaces
    /// the previous queue (the old writer drains and exits).
    pub fn attach_subscriber(&self, subscriber_id: u64) -> Receiver<Delivery> {
        let (tx, rx) = bounded(self.shared.cfg.subscriber_buffer);
        self.shared
            .subscribers
            .lock()
            .unwrap()
            .insert(subscriber_id, tx);
        rx
    }

    pub fn detach_subscriber(&self, subscriber_id: u64) {
        self.shared.subscribers.lock().unwrap().remove(&subscriber_id);
    }

    /// Enqueue a publication. Blocks while the ingress queue is at
    /// capacity — the ack is delayed, the message is never dropped.
    pub fn publish(&self, publication: Publication) -> Result<(), BrokerError> {
        let header = publication.header();
        if RESERVED_TOPICS.contains(&header.topic().as_str()) {
            self.shared.metrics.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(BrokerError::ReservedTopic(header.topic().as_str().to_string()));
        }
        if !self
            .shared
            .table
            .read()
            .unwrap()
            .is_registered(header.publisher_id())
        {
            self.shared.metrics.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(BrokerError::UnknownPublisher(header.publisher_id()));
        }
        let mut item = IngressItem {
            publication,
            enqueued: Instant::now(),
        };
        loop {
            if self.shared.stop.load(Ordering::Relaxed) {
                return Err(BrokerError::Stopped);
            }
            match self.ingress.send_timeout(item, Duration::from_millis(100)) {
                Ok(()) => break,
                Err(crossbeam_channel::SendTimeoutError::Timeout(back)) => item = back,
                Err(crossbeam_channel::SendTimeoutError::Disconnected(_)) => {
                    return Err(BrokerError::Stopped)
                }
            }
        }
        self.shared.queue_len.fetch_add(1, Ordering::Relaxed);
        self.shared.metrics.published.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Pure routing query against the current table.
    pub fn route(&self, header: &MessageHeader) -> Vec<u64> {
        self.shared.table.read().unwrap().route(header)
    }

    /// Routing-table dump (for audits and the oracle-equivalence checks).
    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.shared.table.read().unwrap().all_subscriptions()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let m = &self.shared.metrics;
        MetricsSnapshot {
            ts_us: self.shared.start.elapsed().as_micros() as u64,
            published: m.published.load(Ordering::Relaxed),
            delivered: m.delivered.load(Ordering::Relaxed),
            rejected: m.rejected.load(Ordering::Relaxed),
            subscriber_drops: m.subscriber_drops.load(Ordering::Relaxed),
            queue_depth: self.shared.queue_len.load(Ordering::Relaxed),
            lat_p50_us: m.latency.percentile(0.50),
            lat_p99_us: m.latency.percentile(0.99),
            cpu_ms: sys::self_cpu_ms().unwrap_or(0),
        }
    }

    /// Count a frame refused before it reached the engine (e.g. a
    /// connection publishing under an identity it never registered).
    pub fn count_rejected(&self) {
        self.shared.metrics.rejected.fetch_add(1, Ordering::Relaxed);
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.load(Ordering::Relaxed)
    }

    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.routing_thread.lock().unwrap().take() {
            let _ = handle.join();
        }
    }
}

fn spin_for(ns: u64) {
    if ns == 0 {
        return;
    }
    let t0 = Instant::now();
    while (t0.elapsed().as_nanos() as u64) < ns {
        std::hint::spin_loop();
    }
}

fn routing_loop(shared: Arc<Shared>, rx: Receiver<IngressItem>) {
    loop {
        let item = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(item) => item,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                if shared.stop.load(Ordering::Relaxed) {
                    return;
                }
                continue;
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
        };
        shared.queue_len.fetch_sub(1, Ordering::Relaxed);
        let header = item.publication.header();
        if shared.cfg.mode == BrokerMode::SecureSim {
            // attested-path cost model: digest the routable header, then
            // the configured fixed overhead
            let _ = Sha256::digest(header.encode());
            spin_for(shared.cfg.overhead_ns);
        }
        let targets = shared.table.read().unwrap().route(header);
        if !targets.is_empty() {
            let frame = Arc::new(encode_publication(&item.publication));
            let mut dropped: Vec<u64> = Vec::new();
            {
                let subscribers = shared.subscribers.lock().unwrap();
                for t in &targets {
                    let Some(tx) = subscribers.get(t) else {
                        continue;
                    };
                    let delivery = Delivery {
                        frame: Arc::clone(&frame),
                        enqueued: item.enqueued,
                    };
                    match tx.try_send(delivery) {
                        Ok(()) => {
                            shared.metrics.delivered.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(TrySendError::Full(_)) => {
                            // bounded-buffer policy: a subscriber that
                            // cannot keep up is cut loose, others proceed
                            shared
                                .metrics
                                .subscriber_drops
                                .fetch_add(1, Ordering::Relaxed);
                            dropped.push(*t);
                        }
                        Err(TrySendError::Disconnected(_)) => {
                            dropped.push(*t);
                        }
                    }
                }
            }
            if !dropped.is_empty() {
                let mut subscribers = shared.subscribers.lock().unwrap();
                for t in dropped {
                    subscribers.remove(&t);
                }
            }
        }
        shared
            .metrics
            .latency
            .record(item.enqueued.elapsed().as_micros() as u64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{
        decode_publication, EncryptionMode, LevelSet, PrivacyLevel, Topic, TopicFilter,
    };
    use ed25519_dalek::{Signer, SigningKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signing_key(seed: u8) -> SigningKey {
        SigningKey::from_bytes(&[seed; 32])
    }

    fn signed_sub(
        key: &SigningKey,
        subscriber_id: u64,
        publisher_id: u64,
        filter: &str,
        levels: LevelSet,
    ) -> Subscription {
        let topic_filter = TopicFilter::parse(filter).unwrap();
        let msg = Subscription::signing_bytes(subscriber_id, publisher_id, &topic_filter, levels);
        Subscription {
            subscriber_id,
            publisher_id,
            topic_filter,
            levels,
            authorization: key.sign(&msg).to_bytes(),
        }
    }

    fn data_pub(publisher_id: u64, topic: &str, privacy: PrivacyLevel, payload: Vec<u8>) -> Publication {
        Publication::new(
            Topic::new(topic).unwrap(),
            privacy,
            EncryptionMode::CounterMode,
            publisher_id,
            0,
            payload,
        )
        .unwrap()
    }

    fn small_broker() -> Broker {
        Broker::start(QueueConfig {
            capacity: 64,
            mode: BrokerMode::Regular,
            subscriber_buffer: 256,
            overhead_ns: 0,
        })
    }

    #[test]
    fn register_duplicate_rejected() {
        let b = small_broker();
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        assert!(matches!(
            b.register_publisher(7, key.verifying_key()),
            Err(BrokerError::DuplicatePublisher(7))
        ));
        b.stop();
    }

    #[test]
    fn publish_unregistered_rejected_and_counted() {
        let b = small_broker();
        let err = b.publish(data_pub(9, "meter", PrivacyLevel::High, vec![]));
        assert!(matches!(err, Err(BrokerError::UnknownPublisher(9))));
        assert_eq!(b.metrics().rejected, 1);
        assert_eq!(b.metrics().published, 0);
        b.stop();
    }

    #[test]
    fn reserved_topics_rejected_for_data() {
        let b = small_broker();
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        let p = Publication::new(
            Topic::new("ctl").unwrap(),
            PrivacyLevel::Low,
            EncryptionMode::Plaintext,
            7,
            0,
            vec![],
        )
        .unwrap();
        assert!(matches!(b.publish(p), Err(BrokerError::ReservedTopic(_))));
        b.stop();
    }

    #[test]
    fn subscription_requires_publisher_signature() {
        let b = small_broker();
        let good = signing_key(1);
        let evil = signing_key(2);
        b.register_publisher(7, good.verifying_key()).unwrap();

        let sub = signed_sub(&good, 1, 7, "*", LevelSet::all());
        b.submit_subscription(sub.clone()).unwrap();
        assert_eq!(b.subscriptions().len(), 1);

        // idempotent resubmission
        b.submit_subscription(sub).unwrap();
        assert_eq!(b.subscriptions().len(), 1);

        let forged = signed_sub(&evil, 1, 7, "*", LevelSet::all());
        assert!(matches!(
            b.submit_subscription(forged),
            Err(BrokerError::BadAuthorization)
        ));
        let unknown = signed_sub(&good, 1, 8, "*", LevelSet::all());
        assert!(matches!(
            b.submit_subscription(unknown),
            Err(BrokerError::UnknownPublisher(8))
        ));
        b.stop();
    }

    #[test]
    fn route_empty_table_is_empty() {
        let b = small_broker();
        let p = data_pub(7, "meter", PrivacyLevel::High, vec![]);
        assert!(b.route(p.header()).is_empty());
        b.stop();
    }

    #[test]
    fn route_respects_levels() {
        let b = small_broker();
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(
            &key,
            1,
            7,
            "*",
            LevelSet::of(&[PrivacyLevel::Moderate, PrivacyLevel::Low]),
        ))
        .unwrap();
        let high = data_pub(7, "meter", PrivacyLevel::High, vec![]);
        assert!(b.route(high.header()).is_empty());
        let moderate = data_pub(7, "meter", PrivacyLevel::Moderate, vec![]);
        assert_eq!(b.route(moderate.header()), vec![1]);
        b.stop();
    }

    #[test]
    fn route_agrees_with_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b = small_broker();
        let keys: Vec<SigningKey> = (0..4).map(|i| signing_key(i as u8 + 10)).collect();
        for (i, k) in keys.iter().enumerate() {
            b.register_publisher(i as u64, k.verifying_key()).unwrap();
        }
        let topics = ["meter", "agg.meter", "agg.region"];
        for _ in 0..300 {
            let publisher = rng.gen_range(0..4u64);
            let filter = if rng.gen_bool(0.4) {
                "*".to_string()
            } else {
                topics[rng.gen_range(0..3)].to_string()
            };
            let sub = signed_sub(
                &keys[publisher as usize],
                rng.gen_range(0..50),
                publisher,
                &filter,
                LevelSet::from_bits(rng.gen_range(0..8)).unwrap(),
            );
            b.submit_subscription(sub).unwrap();
        }
        let all = b.subscriptions();
        for _ in 0..1000 {
            let header = MessageHeader::new(
                Topic::new(topics[rng.gen_range(0..3)]).unwrap(),
                PrivacyLevel::ALL[rng.gen_range(0..3)],
                EncryptionMode::CounterMode,
                rng.gen_range(0..5),
                0,
                0,
            )
            .unwrap();
            let mut oracle: Vec<u64> = all
                .iter()
                .filter(|s| match_header(&header, s))
                .map(|s| s.subscriber_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            oracle.sort_unstable();
            assert_eq!(b.route(&header), oracle);
        }
        b.stop();
    }

    #[test]
    fn publish_delivers_to_matching_subscriber_only() {
        let b = small_broker();
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(&key, 1, 7, "meter", LevelSet::all()))
            .unwrap();
        let rx1 = b.attach_subscriber(1);
        let rx2 = b.attach_subscriber(2);

        let p = data_pub(7, "meter", PrivacyLevel::High, vec![1, 2, 3]);
        b.publish(p.clone()).unwrap();
        let got = rx1.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(decode_publication(&got.frame).unwrap(), p);
        assert!(rx2.try_recv().is_err());

        // no matching subscription: counted published, zero deliveries
        let other = data_pub(7, "other", PrivacyLevel::High, vec![]);
        b.publish(other).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let m = b.metrics();
        assert_eq!(m.published, 2);
        assert_eq!(m.delivered, 1);
        b.stop();
    }

    #[test]
    fn burst_beyond_capacity_backpressures_without_loss() {
        let capacity = 32;
        let b = Broker::start(QueueConfig {
            capacity,
            mode: BrokerMode::SecureSim,
            subscriber_buffer: 10_000,
            overhead_ns: 20_000, // slow the drain so the queue actually fills
        });
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(&key, 1, 7, "*", LevelSet::all()))
            .unwrap();
        let rx = b.attach_subscriber(1);

        let total = capacity + 200;
        let publisher = {
            let b = b.clone();
            std::thread::spawn(move || {
                for i in 0..total {
                    b.publish(data_pub(7, "meter", PrivacyLevel::High, vec![i as u8]))
                        .unwrap();
                }
            })
        };
        let mut max_depth = 0usize;
        let mut received = 0usize;
        while received < total {
            max_depth = max_depth.max(b.metrics().queue_depth);
            if rx.recv_timeout(Duration::from_secs(5)).is_ok() {
                received += 1;
            } else {
                panic!("stalled after {received} deliveries");
            }
        }
        publisher.join().unwrap();
        assert!(max_depth <= capacity, "depth {max_depth} > capacity {capacity}");
        let m = b.metrics();
        assert_eq!(m.published, total as u64);
        assert_eq!(m.delivered, total as u64);
        b.stop();
    }

    #[test]
    fn per_publisher_fifo_preserved_across_interleaving() {
        let b = Broker::start(QueueConfig {
            capacity: 64,
            mode: BrokerMode::Regular,
            subscriber_buffer: 8192, // hold both publishers' full output
            overhead_ns: 0,
        });
        let key_a = signing_key(1);
        let key_b = signing_key(2);
        b.register_publisher(1, key_a.verifying_key()).unwrap();
        b.register_publisher(2, key_b.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(&key_a, 9, 1, "*", LevelSet::all()))
            .unwrap();
        b.submit_subscription(signed_sub(&key_b, 9, 2, "*", LevelSet::all()))
            .unwrap();
        let rx = b.attach_subscriber(9);

        let n = 2000u32;
        let spawn_pub = |publisher: u64| {
            let b = b.clone();
            std::thread::spawn(move || {
                for i in 0..n {
                    let payload = i.to_le_bytes().to_vec();
                    b.publish(data_pub(publisher, "meter", PrivacyLevel::High, payload))
                        .unwrap();
                }
            })
        };
        let ta = spawn_pub(1);
        let tb = spawn_pub(2);
        let mut next = [0u32; 3];
        for _ in 0..(2 * n) {
            let d = rx.recv_timeout(Duration::from_secs(5)).unwrap();
            let p = decode_publication(&d.frame).unwrap();
            let publisher = p.header().publisher_id() as usize;
            let i = u32::from_le_bytes(p.payload().try_into().unwrap());
            assert_eq!(i, next[publisher], "publisher {publisher} out of order");
            next[publisher] += 1;
        }
        ta.join().unwrap();
        tb.join().unwrap();
        b.stop();
    }

    #[test]
    fn slow_subscriber_disconnected_others_unaffected() {
        let b = Broker::start(QueueConfig {
            capacity: 1024,
            mode: BrokerMode::Regular,
            subscriber_buffer: 8, // tiny buffer so the stalled one overflows
            overhead_ns: 0,
        });
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(&key, 1, 7, "*", LevelSet::all()))
            .unwrap();
        b.submit_subscription(signed_sub(&key, 2, 7, "*", LevelSet::all()))
            .unwrap();
        let rx_live = b.attach_subscriber(1);
        let _rx_stalled = b.attach_subscriber(2); // never drained

        let total = 200;
        for i in 0..total {
            b.publish(data_pub(7, "meter", PrivacyLevel::High, vec![i as u8]))
                .unwrap();
            // keep the live subscriber drained
            while let Ok(_d) = rx_live.try_recv() {}
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        let mut drained = 0;
        while Instant::now() < deadline {
            match rx_live.recv_timeout(Duration::from_millis(50)) {
                Ok(_) => drained += 1,
                Err(_) => {
                    if b.metrics().queue_depth == 0 {
                        break;
                    }
                }
            }
        }
        let _ = drained;
        let m = b.metrics();
        assert!(m.subscriber_drops >= 1, "stalled subscriber never dropped");
        assert_eq!(m.published, total as u64);
        b.stop();
    }

    #[test]
    fn metrics_counters_monotone_and_reconciled() {
        let b = small_broker();
        let key = signing_key(1);
        b.register_publisher(7, key.verifying_key()).unwrap();
        b.submit_subscription(signed_sub(&key, 1, 7, "*", LevelSet::all()))
            .unwrap();
        let rx = b.attach_subscriber(1);
        let mut prev = b.metrics();
        for i in 0..50 {
            b.publish(data_pub(7, "meter", PrivacyLevel::High, vec![i])).unwrap();
            rx.recv_timeout(Duration::from_secs(2)).unwrap();
            let now = b.metrics();
            assert!(now.published >= prev.published);
            assert!(now.delivered >= prev.delivered);
            assert!(now.rejected >= prev.rejected);
            assert!(now.queue_depth <= b.config().capacity);
            prev = now;
        }
        assert_eq!(prev.published, 50);
        assert_eq!(prev.delivered, 50);
        b.stop();
    }

    #[test]
    fn secure_and_regular_deliver_identical_sets() {
        let run = |mode: BrokerMode| -> Vec<Vec<u8>> {
            let b = Broker::start(QueueConfig {
                capacity: 64,
                mode,
                subscriber_buffer: 4096,
                overhead_ns: 0,
            });
            let key = signing_key(1);
            b.register_publisher(7, key.verifying_key()).unwrap();
            b.submit_subscription(signed_sub(
                &key,
                1,
                7,
                "meter",
                LevelSet::of(&[PrivacyLevel::High]),
            ))
            .unwrap();
            let rx = b.attach_subscriber(1);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut sent = 0;
            for i in 0..500u32 {
                let privacy = PrivacyLevel::ALL[rng.gen_range(0..3)];
                let topic = if rng.gen_bool(0.5) { "meter" } else { "other" };
                let p = data_pub(7, topic, privacy, i.to_le_bytes().to_vec());
                if privacy == PrivacyLevel::High && topic == "meter" {
                    sent += 1;
                }
                b.publish(p).unwrap();
            }
            let mut got = Vec::new();
            for _ in 0..sent {
                let d = rx.recv_timeout(Duration::from_secs(5)).unwrap();
                got.push(decode_publication(&d.frame).unwrap().payload().to_vec());
            }
            b.stop();
            got
        };
        assert_eq!(run(BrokerMode::Regular), run(BrokerMode::SecureSim));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let snap = MetricsSnapshot {
            ts_us: 1,
            published: 2,
            delivered: 3,
            rejected: 4,
            subscriber_drops: 0,
            queue_depth: 5,
            lat_p50_us: 6,
            lat_p99_us: 7,
            cpu_ms: 8,
        };
        let row = snap.to_csv_row();
        let back = MetricsSnapshot::parse_csv_row(&row).unwrap();
        assert_eq!(back, snap);
        assert!(MetricsSnapshot::parse_csv_row("1,2,3").is_none());
    }

    #[test]
    fn histogram_percentiles_are_ordered() {
        let h = LatencyHistogram::new();
        for us in [1u64, 2, 4, 100, 1000, 10_000, 100_000] {
            for _ in 0..10 {
                h.record(us);
            }
        }
        assert!(h.percentile(0.5) <= h.percentile(0.9));
        assert!(h.percentile(0.9) <= h.percentile(0.99));
    }
}
