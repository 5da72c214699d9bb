//! The untrusted gateway between the collector and the bus.
//!
//! The dispatcher never parses, decrypts, or holds keys — this module
//! deliberately has no dependency on any key type. It accepts one
//! upstream (collector) connection at a time, relays length-prefixed
//! chunks verbatim to the broker connection, and relays broker bytes
//! back upstream. Back-pressure propagates by blocking: when the broker
//! write stalls, the dispatcher stops reading the collector socket.

use std::io::{BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// Shared byte tap for confidentiality audits: everything the dispatcher
/// sees, both directions, in arrival order per direction.
#[derive(Clone, Default)]
pub struct ByteLog {
    bytes: Arc<Mutex<Vec<u8>>>,
}

impl ByteLog {
    pub fn new() -> ByteLog {
        ByteLog::default()
    }

    pub fn append(&self, chunk: &[u8]) {
        self.bytes.lock().unwrap().extend_from_slice(chunk);
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.bytes.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.bytes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            base_delay: Duration::from_millis(50),
        }
    }
}

pub struct Dispatcher {
    pub broker_addr: String,
    pub byte_log: Option<ByteLog>,
    pub retry: RetryPolicy,
}

pub struct DispatcherHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    forwarded: Arc<AtomicU64>,
    connect_failures: Arc<AtomicU64>,
}

impl DispatcherHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Chunks relayed upstream-to-broker so far.
    pub fn forwarded(&self) -> u64 {
        self.forwarded.load(Ordering::Relaxed)
    }

    /// Broker connection attempts that exhausted their retries.
    pub fn connect_failures(&self) -> u64 {
        self.connect_failures.load(Ordering::Relaxed)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DispatcherHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Dispatcher {
    pub fn start(self) -> std::io::Result<DispatcherHandle> {
        let listener = crate::sys::bounded_listener("127.0.0.1:0", crate::sys::DATA_SOCKET_BUF)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let forwarded = Arc::new(AtomicU64::new(0));
        let connect_failures = Arc::new(AtomicU64::new(0));

        let accept_stop = Arc::clone(&stop);
        let accept_forwarded = Arc::clone(&forwarded);
        let accept_failures = Arc::clone(&connect_failures);
        let accept_thread = std::thread::Builder::new()
            .name("dispatcher-accept".into())
            .spawn(move || {
                while !accept_stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((upstream, _)) => {
                            match connect_with_retry(&self.broker_addr, &self.retry) {
                                Some(broker) => relay_session(
                                    upstream,
                                    broker,
                                    self.byte_log.clone(),
                                    Arc::clone(&accept_forwarded),
                                    Arc::clone(&accept_stop),
                                ),
                                None => {
                                    // broker unreachable after retries:
                                    // surface the error upstream by closing
                                    accept_failures.fetch_add(1, Ordering::Relaxed);
                                    drop(upstream);
                                }
                            }
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20));
                        }
                        Err(_) => break,
                    }
                }
            })?;

        Ok(DispatcherHandle {
            addr,
            stop,
            accept_thread: Some(accept_thread),
            forwarded,
            connect_failures,
        })
    }
}

fn connect_with_retry(addr: &str, retry: &RetryPolicy) -> Option<TcpStream> {
    for attempt in 0..retry.attempts {
        match crate::sys::bounded_connect(addr, crate::sys::DATA_SOCKET_BUF) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Some(s);
            }
            Err(_) => std::thread::sleep(retry.base_delay * 2u32.saturating_pow(attempt)),
        }
    }
    None
}

/// Run both relay directions; returns when either side closes. Serves
/// one upstream at a time, matching the one-collector-per-gateway
/// deployment.
fn relay_session(
    upstream: TcpStream,
    broker: TcpStream,
    byte_log: Option<ByteLog>,
    forwarded: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) {
    let _ = upstream.set_nodelay(true);
    let _ = upstream.set_read_timeout(Some(Duration::from_millis(200)));
    let _ = broker.set_read_timeout(Some(Duration::from_millis(200)));

    let down_log = byte_log.clone();
    let down_stop = Arc::clone(&stop);
    let downstream_thread = {
        let broker = match broker.try_clone() {
            Ok(b) => b,
            Err(_) => return,
        };
        let upstream = match upstream.try_clone() {
            Ok(u) => u,
            Err(_) => return,
        };
        std::thread::Builder::new()
            .name("dispatcher-down".into())
            .spawn(move || relay_raw(broker, upstream, down_log, down_stop))
            .expect("spawn downstream relay")
    };

    relay_chunks(upstream, broker, byte_log, forwarded, stop);
    let _ = downstream_thread.join();
}

/// Upstream direction: length-prefixed chunks in, verbatim bytes out.
/// A read timeout mid-chunk keeps the partial bytes; nothing is lost or
/// reframed.
fn relay_chunks(
    mut upstream: TcpStream,
    broker: TcpStream,
    byte_log: Option<ByteLog>,
    forwarded: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) {
    let mut writer = BufWriter::with_capacity(1 << 16, broker);
    let mut pending: Vec<u8> = Vec::with_capacity(1 << 16);
    let mut consumed = 0usize;
    let mut buf = [0u8; 1 << 14];
    loop {
        if stop.load(Ordering::Relaxed) {
            return;
        }
        match upstream.read(&mut buf) {
            Ok(0) => {
                let _ = writer.flush();
                return;
            }
            Ok(n) => pending.extend_from_slice(&buf[..n]),
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if writer.flush().is_err() {
                    return;
                }
                continue;
            }
            Err(_) => {
                let _ = writer.flush();
                return;
            }
        }
        // emit every complete chunk currently buffered
        loop {
            let avail = &pending[consumed..];
            if avail.len() < 4 {
                break;
            }
            let len = u32::from_le_bytes(avail[..4].try_into().unwrap()) as usize;
            if avail.len() < 4 + len {
                break;
            }
            let body = &avail[4..4 + len];
            if let Some(log) = &byte_log {
                log.append(body);
            }
            if writer.write_all(body).is_err() {
                return;
            }
            forwarded.fetch_add(1, Ordering::Relaxed);
            consumed += 4 + len;
        }
        if consumed >= (1 << 16) {
            pending.drain(..consumed);
            consumed = 0;
        }
        // nothing more buffered right now: push what we have
        if consumed == pending.len() && writer.flush().is_err() {
            return;
        }
    }
}

/// Downstream direction: raw byte copy.
fn relay_raw(
    mut from: TcpStream,
    mut to: TcpStream,
    byte_log: Option<ByteLog>,
    stop: Arc<AtomicBool>,
) {
    let mut buf = [0u8; 1 << 14];
    loop {
        if stop.load(Ordering::Relaxed) {
            return;
        }
        match from.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => {
                if let Some(log) = &byte_log {
                    log.append(&buf[..n]);
                }
                if to.write_all(&buf[..n]).is_err() {
                    return;
                }
            }
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                continue;
            }
            Err(_) => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn write_chunk(w: &mut impl Write, bytes: &[u8]) {
        w.write_all(&(bytes.len() as u32).to_le_bytes()).unwrap();
        w.write_all(bytes).unwrap();
        w.flush().unwrap();
    }

    #[test]
    fn bytes_in_equal_bytes_out() {
        // fake broker: echoes nothing, just captures
        let broker_listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let broker_addr = broker_listener.local_addr().unwrap();
        let capture = std::thread::spawn(move || {
            let (mut s, _) = broker_listener.accept().unwrap();
            let mut got = Vec::new();
            let mut buf = [0u8; 4096];
            s.set_read_timeout(Some(Duration::from_millis(300))).unwrap();
            loop {
                match s.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => got.extend_from_slice(&buf[..n]),
                    Err(_) => break,
                }
            }
            got
        });

        let log = ByteLog::new();
        let mut handle = Dispatcher {
            broker_addr: broker_addr.to_string(),
            byte_log: Some(log.clone()),
            retry: RetryPolicy::default(),
        }
        .start()
        .unwrap();

        let mut upstream = TcpStream::connect(handle.local_addr()).unwrap();
        let chunks: Vec<Vec<u8>> = (0..50u8).map(|i| vec![i; (i as usize % 7) + 1]).collect();
        for c in &chunks {
            write_chunk(&mut upstream, c);
        }
        drop(upstream);

        let got = capture.join().unwrap();
        let expected: Vec<u8> = chunks.concat();
        assert_eq!(got, expected);
        assert_eq!(log.snapshot(), expected);
        assert_eq!(handle.forwarded(), 50);
        handle.shutdown();
    }

    #[test]
    fn downstream_bytes_relayed_back() {
        let broker_listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let broker_addr = broker_listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut s, _) = broker_listener.accept().unwrap();
            s.write_all(b"downstream-data").unwrap();
            s.flush().unwrap();
            std::thread::sleep(Duration::from_millis(500));
        });

        let mut handle = Dispatcher {
            broker_addr: broker_addr.to_string(),
            byte_log: None,
            retry: RetryPolicy::default(),
        }
        .start()
        .unwrap();

        let mut upstream = TcpStream::connect(handle.local_addr()).unwrap();
        let mut got = vec![0u8; 15];
        upstream.read_exact(&mut got).unwrap();
        assert_eq!(&got, b"downstream-data");
        handle.shutdown();
    }

    #[test]
    fn broker_down_reported_after_retries() {
        // no listener on this port
        let dead = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let mut handle = Dispatcher {
            broker_addr: dead.to_string(),
            byte_log: None,
            retry: RetryPolicy {
                attempts: 2,
                base_delay: Duration::from_millis(5),
            },
        }
        .start()
        .unwrap();

        let mut upstream = TcpStream::connect(handle.local_addr()).unwrap();
        upstream
            .set_read_timeout(Some(Duration::from_secs(5)))
            .unwrap();
        // upstream learns about the failure as a closed connection
        let mut buf = [0u8; 1];
        assert_eq!(upstream.read(&mut buf).unwrap(), 0);
        assert_eq!(handle.connect_failures(), 1);
        handle.shutdown();
    }
}
