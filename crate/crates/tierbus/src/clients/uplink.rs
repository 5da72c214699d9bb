//! Publisher-side bus connection: register, authorize subscriptions,
//! publish. Connects either straight to the broker (raw frames) or
//! through a dispatcher (length-prefixed chunks upstream, raw frames
//! back).

use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver};
use ed25519_dalek::VerifyingKey;

use super::ClientError;
use crate::broker::{encode_metrics_req, encode_register, encode_subscribe, parse_ack, parse_metrics_resp, MetricsSnapshot};
use crate::broker::ctl_frame;
use crate::envelope::{encode_publication, Publication, Subscription, TOPIC_CTL};

#[derive(Clone, Copy, PartialEq, Eq)]
enum UplinkMode {
    Direct,
    ViaDispatcher,
}

pub struct UplinkConn {
    mode: UplinkMode,
    writer: Mutex<BufWriter<TcpStream>>,
    replies: Receiver<Vec<u8>>,
    // serializes control ops so replies pair with requests
    ctl_lock: Mutex<()>,
    stop: Arc<AtomicBool>,
    autoflush: AtomicBool,
    sender_id: u64,
}

const ACK_TIMEOUT: Duration = Duration::from_secs(10);

impl UplinkConn {
    pub fn connect_direct(addr: &str, sender_id: u64) -> Result<UplinkConn, ClientError> {
        UplinkConn::connect(addr, sender_id, UplinkMode::Direct)
    }

    pub fn connect_via_dispatcher(addr: &str, sender_id: u64) -> Result<UplinkConn, ClientError> {
        UplinkConn::connect(addr, sender_id, UplinkMode::ViaDispatcher)
    }

    fn connect(addr: &str, sender_id: u64, mode: UplinkMode) -> Result<UplinkConn, ClientError> {
        let stream = crate::sys::bounded_connect(addr, crate::sys::DATA_SOCKET_BUF)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = unbounded();
        let reader_stream = stream.try_clone()?;
        reader_stream.set_read_timeout(Some(Duration::from_millis(200)))?;
        let reader_stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("uplink-reader".into())
            .spawn(move || {
                let mut reader = crate::envelope::FrameReader::new(reader_stream);
                loop {
                    if reader_stop.load(Ordering::Relaxed) {
                        return;
                    }
                    match reader.poll_frame() {
                        Ok(Some(frame)) => {
                            if frame.header().topic().as_str() == TOPIC_CTL
                                && tx.send(frame.into_payload()).is_err()
                            {
                                return;
                            }
                        }
                        Ok(None) => {} // timed out before a full frame
                        Err(_) => return,
                    }
                }
            })
            .expect("spawn uplink reader");
        Ok(UplinkConn {
            mode,
            writer: Mutex::new(BufWriter::with_capacity(1 << 16, stream)),
            replies: rx,
            ctl_lock: Mutex::new(()),
            stop,
            autoflush: AtomicBool::new(true),
            sender_id,
        })
    }

    /// With autoflush off the caller batches frames and flushes
    /// explicitly; the 64 KiB buffer still self-flushes under load.
    pub fn set_autoflush(&self, on: bool) {
        self.autoflush.store(on, Ordering::Relaxed);
    }

    fn write_frame_bytes(&self, bytes: &[u8]) -> Result<(), ClientError> {
        let mut w = self.writer.lock().unwrap();
        if self.mode == UplinkMode::ViaDispatcher {
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        }
        w.write_all(bytes)?;
        if self.autoflush.load(Ordering::Relaxed) {
            w.flush()?;
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<(), ClientError> {
        self.writer.lock().unwrap().flush()?;
        Ok(())
    }

    fn ctl_round_trip(&self, payload: Vec<u8>) -> Result<Vec<u8>, ClientError> {
        let _guard = self.ctl_lock.lock().unwrap();
        // drop stale replies from a previous failed exchange
        while self.replies.try_recv().is_ok() {}
        self.write_frame_bytes(&encode_publication(&ctl_frame(self.sender_id, payload)))?;
        self.flush()?;
        self.replies
            .recv_timeout(ACK_TIMEOUT)
            .map_err(|_| ClientError::Timeout("broker control ack"))
    }

    fn expect_ok(&self, payload: Vec<u8>) -> Result<(), ClientError> {
        let reply = self.ctl_round_trip(payload)?;
        let ack = parse_ack(&reply).ok_or(ClientError::Timeout("well-formed ack"))?;
        if ack.ok {
            Ok(())
        } else {
            Err(ClientError::BrokerRefused(ack.code))
        }
    }

    pub fn register_publisher(&self, publisher_id: u64, key: &VerifyingKey) -> Result<(), ClientError> {
        self.expect_ok(encode_register(publisher_id, key))
    }

    pub fn submit_subscription(&self, sub: &Subscription) -> Result<(), ClientError> {
        self.expect_ok(encode_subscribe(sub))
    }

    pub fn metrics(&self) -> Result<MetricsSnapshot, ClientError> {
        let reply = self.ctl_round_trip(encode_metrics_req())?;
        parse_metrics_resp(&reply).ok_or(ClientError::Timeout("well-formed metrics reply"))
    }

    /// Fire-and-forget data publication; back-pressure surfaces as a
    /// blocking write.
    pub fn publish(&self, p: &Publication) -> Result<(), ClientError> {
        self.write_frame_bytes(&encode_publication(p))
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.flush();
    }
}

impl Drop for UplinkConn {
    fn drop(&mut self) {
        self.shutdown();
    }
}
