//! TCP front-end for the broker engine.
//!
//! Control traffic (register, subscribe, hello, metrics) rides in frames
//! on the reserved "ctl" topic; everything else on a registered
//! publisher's connection is a data publication. Back-pressure reaches
//! producers naturally: when the ingress queue is full the connection
//! thread blocks in `publish` and stops reading its socket, so the
//! sender's TCP window fills.

use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use ed25519_dalek::VerifyingKey;

use super::{Broker, BrokerMode, MetricsSnapshot, QueueConfig};
use crate::crypto::CodeIdentity;
use crate::envelope::{
    write_frame, EncryptionMode, PrivacyLevel, Publication, Subscription, Topic, TOPIC_CTL,
};

pub const CTL_REGISTER: u8 = 0x01;
pub const CTL_SUBSCRIBE: u8 = 0x02;
pub const CTL_HELLO: u8 = 0x03;
pub const CTL_METRICS: u8 = 0x04;
pub const CTL_ACK: u8 = 0x10;
pub const CTL_METRICS_RESP: u8 = 0x11;

pub const ACK_OK: u8 = 0;
pub const ACK_DUPLICATE: u8 = 1;
pub const ACK_UNKNOWN_PUBLISHER: u8 = 2;
pub const ACK_BAD_AUTHORIZATION: u8 = 3;
pub const ACK_PROTOCOL: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtlAck {
    pub ok: bool,
    pub code: u8,
}

pub fn ctl_frame(sender_id: u64, payload: Vec<u8>) -> Publication {
    Publication::new(
        Topic::new(TOPIC_CTL).expect("constant topic fits"),
        PrivacyLevel::Low,
        EncryptionMode::Plaintext,
        sender_id,
        0,
        payload,
    )
    .expect("ctl frames are well-formed")
}

pub fn encode_register(publisher_id: u64, key: &VerifyingKey) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 8 + 32);
    out.push(CTL_REGISTER);
    out.extend_from_slice(&publisher_id.to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out
}

pub fn encode_subscribe(sub: &Subscription) -> Vec<u8> {
    let mut out = vec![CTL_SUBSCRIBE];
    out.extend_from_slice(&sub.encode());
    out
}

pub fn encode_hello(subscriber_id: u64) -> Vec<u8> {
    let mut out = vec![CTL_HELLO];
    out.extend_from_slice(&subscriber_id.to_le_bytes());
    out
}

pub fn encode_metrics_req() -> Vec<u8> {
    vec![CTL_METRICS]
}

fn encode_ack(code: u8) -> Vec<u8> {
    vec![CTL_ACK, u8::from(code == ACK_OK), code]
}

pub fn parse_ack(payload: &[u8]) -> Option<CtlAck> {
    if payload.len() == 3 && payload[0] == CTL_ACK {
        Some(CtlAck {
            ok: payload[1] != 0,
            code: payload[2],
        })
    } else {
        None
    }
}

pub fn parse_metrics_resp(payload: &[u8]) -> Option<MetricsSnapshot> {
    if payload.first() != Some(&CTL_METRICS_RESP) {
        return None;
    }
    MetricsSnapshot::parse_csv_row(std::str::from_utf8(&payload[1..]).ok()?)
}

/// TCP adapter over the broker engine.
pub struct BrokerServer {
    addr: SocketAddr,
    broker: Broker,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(listen: &str, cfg: QueueConfig) -> std::io::Result<BrokerServer> {
        BrokerServer::start_with_identity(listen, cfg, None)
    }

    /// In SecureSim mode the routing process checks its own code identity
    /// at startup; a configured expectation that does not match refuses
    /// to serve.
    pub fn start_with_identity(
        listen: &str,
        cfg: QueueConfig,
        expected_code: Option<CodeIdentity>,
    ) -> std::io::Result<BrokerServer> {
        if cfg.mode == BrokerMode::SecureSim {
            let own = crate::sys::self_code_identity()?;
            if let Some(expected) = expected_code {
                if own != expected {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::PermissionDenied,
                        format!("code identity {own} does not match expected {expected}"),
                    ));
                }
            }
        }
        let listener = crate::sys::bounded_listener(listen, crate::sys::DATA_SOCKET_BUF)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let broker = Broker::start(cfg);
        let stop = Arc::new(AtomicBool::new(false));

        let accept_stop = Arc::clone(&stop);
        let accept_broker = broker.clone();
        let accept_thread = std::thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || {
                while !accept_stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let broker = accept_broker.clone();
                            let stop = Arc::clone(&accept_stop);
                            std::thread::Builder::new()
                                .name("broker-conn".into())
                                .spawn(move || {
                                    let _ = serve_connection(stream, broker, stop);
                                })
                                .expect("spawn connection thread");
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(25));
                        }
                        Err(_) => break,
                    }
                }
            })?;

        Ok(BrokerServer {
            addr,
            broker,
            stop,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        self.broker.stop();
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(
    stream: TcpStream,
    broker: Broker,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut reader = crate::envelope::FrameReader::new(stream.try_clone()?);
    let writer = Arc::new(Mutex::new(BufWriter::new(stream)));
    let mut conn_publisher: Option<u64> = None;
    let mut attached_subscriber: Option<u64> = None;

    let result = loop {
        if stop.load(Ordering::Relaxed) {
            break Ok(());
        }
        let frame = match reader.poll_frame() {
            Ok(Some(f)) => f,
            Ok(None) => continue, // timed out before a full frame
            // disconnect, or malformed frame: connection-level error
            Err(_) => break Ok(()),
        };

        if frame.header().topic().as_str() == TOPIC_CTL {
            let sender = frame.header().publisher_id();
            let reply = handle_ctl(
                &broker,
                frame.payload(),
                &mut conn_publisher,
                &mut attached_subscriber,
                &writer,
                &stop,
            );
            let mut w = writer.lock().unwrap();
            write_frame(&mut *w, &ctl_frame(sender, reply))?;
            w.flush()?;
            continue;
        }

        // data publication: the connection must be bound to this publisher
        if conn_publisher == Some(frame.header().publisher_id()) {
            match broker.publish(frame) {
                Ok(()) => {}
                Err(super::BrokerError::Stopped) => break Ok(()),
                Err(_) => {} // counted by the engine
            }
        } else {
            broker.count_rejected();
        }
    };

    if let Some(id) = attached_subscriber {
        broker.detach_subscriber(id);
    }
    result
}

fn handle_ctl(
    broker: &Broker,
    payload: &[u8],
    conn_publisher: &mut Option<u64>,
    attached_subscriber: &mut Option<u64>,
    writer: &Arc<Mutex<BufWriter<TcpStream>>>,
    stop: &Arc<AtomicBool>,
) -> Vec<u8> {
    match payload.first() {
        Some(&CTL_REGISTER) if payload.len() == 1 + 8 + 32 => {
            let publisher_id = u64::from_le_bytes(payload[1..9].try_into().unwrap());
            let key_bytes: [u8; 32] = payload[9..41].try_into().unwrap();
            let Ok(key) = VerifyingKey::from_bytes(&key_bytes) else {
                return encode_ack(ACK_PROTOCOL);
            };
            match broker.register_publisher(publisher_id, key) {
                Ok(()) => {
                    *conn_publisher = Some(publisher_id);
                    encode_ack(ACK_OK)
                }
                Err(super::BrokerError::DuplicatePublisher(_)) => encode_ack(ACK_DUPLICATE),
                Err(_) => encode_ack(ACK_PROTOCOL),
            }
        }
        Some(&CTL_SUBSCRIBE) => match Subscription::decode(&payload[1..]) {
            Ok(sub) => match broker.submit_subscription(sub) {
                Ok(()) => encode_ack(ACK_OK),
                Err(super::BrokerError::UnknownPublisher(_)) => {
                    encode_ack(ACK_UNKNOWN_PUBLISHER)
                }
                Err(super::BrokerError::BadAuthorization) => encode_ack(ACK_BAD_AUTHORIZATION),
                Err(_) => encode_ack(ACK_PROTOCOL),
            },
            Err(_) => encode_ack(ACK_PROTOCOL),
        },
        Some(&CTL_HELLO) if payload.len() == 9 => {
            let subscriber_id = u64::from_le_bytes(payload[1..9].try_into().unwrap());
            let rx = broker.attach_subscriber(subscriber_id);
            *attached_subscriber = Some(subscriber_id);
            let writer = Arc::clone(writer);
            let stop = Arc::clone(stop);
            std::thread::Builder::new()
                .name("broker-subscriber-writer".into())
                .spawn(move || subscriber_writer_loop(rx, writer, stop))
                .expect("spawn subscriber writer");
            encode_ack(ACK_OK)
        }
        Some(&CTL_METRICS) => {
            let mut out = vec![CTL_METRICS_RESP];
            out.extend_from_slice(broker.metrics().to_csv_row().as_bytes());
            out
        }
        _ => encode_ack(ACK_PROTOCOL),
    }
}

fn subscriber_writer_loop(
    rx: crossbeam_channel::Receiver<super::Delivery>,
    writer: Arc<Mutex<BufWriter<TcpStream>>>,
    stop: Arc<AtomicBool>,
) {
    loop {
        match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(first) => {
                let mut w = writer.lock().unwrap();
                if w.write_all(&first.frame).is_err() {
                    return;
                }
                // batch whatever is already queued before flushing
                while let Ok(next) = rx.try_recv() {
                    if w.write_all(&next.frame).is_err() {
                        return;
                    }
                }
                if w.flush().is_err() {
                    return;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                if stop.load(Ordering::Relaxed) {
                    return;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{decode_publication, read_frame, LevelSet, TopicFilter};
    use ed25519_dalek::{Signer, SigningKey};
    use std::io::BufReader;

    struct TestConn {
        reader: BufReader<TcpStream>,
        writer: BufWriter<TcpStream>,
    }

    impl TestConn {
        fn connect(addr: SocketAddr) -> TestConn {
            let stream = TcpStream::connect(addr).unwrap();
            stream.set_nodelay(true).unwrap();
            TestConn {
                reader: BufReader::new(stream.try_clone().unwrap()),
                writer: BufWriter::new(stream),
            }
        }

        fn send(&mut self, p: &Publication) {
            write_frame(&mut self.writer, p).unwrap();
            self.writer.flush().unwrap();
        }

        fn recv(&mut self) -> Publication {
            read_frame(&mut self.reader).unwrap()
        }

        fn expect_ack_ok(&mut self) {
            let f = self.recv();
            let ack = parse_ack(f.payload()).expect("ack frame");
            assert!(ack.ok, "ack code {}", ack.code);
        }
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

    #[test]
    fn tcp_register_subscribe_publish_deliver() {
        let mut server = BrokerServer::start("127.0.0.1:0", QueueConfig::default()).unwrap();
        let addr = server.local_addr();
        let key = SigningKey::from_bytes(&[7u8; 32]);

        let mut subscriber = TestConn::connect(addr);
        subscriber.send(&ctl_frame(1, encode_hello(1)));
        subscriber.expect_ack_ok();

        let mut publisher = TestConn::connect(addr);
        publisher.send(&ctl_frame(7, encode_register(7, &key.verifying_key())));
        publisher.expect_ack_ok();
        publisher.send(&ctl_frame(
            7,
            encode_subscribe(&signed_sub(&key, 1, 7, "*", LevelSet::all())),
        ));
        publisher.expect_ack_ok();

        let p = Publication::new(
            Topic::new("meter").unwrap(),
            PrivacyLevel::High,
            EncryptionMode::CounterMode,
            7,
            0,
            vec![1, 2, 3],
        )
        .unwrap();
        publisher.send(&p);
        let delivered = subscriber.recv();
        assert_eq!(delivered, p);

        // metrics over the wire
        let mut probe = TestConn::connect(addr);
        probe.send(&ctl_frame(0, encode_metrics_req()));
        let resp = probe.recv();
        let snap = parse_metrics_resp(resp.payload()).unwrap();
        assert_eq!(snap.published, 1);
        assert_eq!(snap.delivered, 1);
        server.shutdown();
    }

    #[test]
    fn tcp_duplicate_register_and_spoofed_publish() {
        let mut server = BrokerServer::start("127.0.0.1:0", QueueConfig::default()).unwrap();
        let addr = server.local_addr();
        let key = SigningKey::from_bytes(&[8u8; 32]);

        let mut a = TestConn::connect(addr);
        a.send(&ctl_frame(7, encode_register(7, &key.verifying_key())));
        a.expect_ack_ok();

        let mut b = TestConn::connect(addr);
        b.send(&ctl_frame(7, encode_register(7, &key.verifying_key())));
        let ack = parse_ack(b.recv().payload()).unwrap();
        assert!(!ack.ok);
        assert_eq!(ack.code, ACK_DUPLICATE);

        // b never registered on its connection; its data frame is rejected
        let spoof = Publication::new(
            Topic::new("meter").unwrap(),
            PrivacyLevel::High,
            EncryptionMode::CounterMode,
            7,
            0,
            vec![],
        )
        .unwrap();
        b.send(&spoof);
        b.send(&ctl_frame(0, encode_metrics_req()));
        let snap = parse_metrics_resp(b.recv().payload()).unwrap();
        assert_eq!(snap.rejected, 1);
        assert_eq!(snap.published, 0);
        server.shutdown();
    }

    #[test]
    fn frame_round_trip_through_wire_helpers() {
        let sub = signed_sub(
            &SigningKey::from_bytes(&[9u8; 32]),
            1,
            2,
            "agg.meter",
            LevelSet::of(&[crate::envelope::PrivacyLevel::Moderate]),
        );
        let payload = encode_subscribe(&sub);
        assert_eq!(payload[0], CTL_SUBSCRIBE);
        let back = Subscription::decode(&payload[1..]).unwrap();
        assert_eq!(back, sub);
        let f = ctl_frame(5, payload);
        let enc = crate::envelope::encode_publication(&f);
        assert_eq!(decode_publication(&enc).unwrap(), f);
    }
}
