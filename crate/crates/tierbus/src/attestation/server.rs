//! TCP front-end for the Attestor and the matching client handshake.
//!
//! Messages ride in envelope frames on the reserved "attest" topic; the
//! payload carries a one-byte op followed by fixed little-endian fields.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use rand::rngs::OsRng;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use super::{
    establish_session, generate_quote, AttestationCert, AttestationError, Attestor,
    EnclaveIdentity, PlatformKey, Quote, RejectReason, SessionTranscript, CERT_WIRE_LEN,
    QUOTE_WIRE_LEN,
};
use crate::crypto::{unwrap_key, DataKey, KeyBundle, SessionKey};
use crate::envelope::{
    read_frame, write_frame, EncryptionMode, LevelSet, PrivacyLevel, Publication, Topic,
    TOPIC_ATTEST,
};
use crate::sys::unix_millis;

const OP_CHALLENGE_REQ: u8 = 0x01;
const OP_CHALLENGE_RESP: u8 = 0x02;
const OP_QUOTE_SUBMIT: u8 = 0x03;
const OP_ATTEST_RESP: u8 = 0x04;
const OP_KEY_REGISTER: u8 = 0x05;
const OP_KEY_REGISTER_ACK: u8 = 0x06;
const OP_KEY_REFRESH_REQ: u8 = 0x07;
const OP_KEY_REFRESH_RESP: u8 = 0x08;

#[derive(Debug)]
enum AttestMsg {
    ChallengeReq,
    ChallengeResp {
        nonce: [u8; 16],
    },
    QuoteSubmit {
        quote: Quote,
        client_pub: [u8; 32],
        want_keys: Vec<u64>,
    },
    AttestResp {
        verdict: Result<TrustedResp, RejectReason>,
    },
    KeyRegister {
        publisher_id: u64,
        bundle: KeyBundle,
    },
    KeyRegisterAck {
        ok: bool,
    },
    KeyRefreshReq {
        publisher_id: u64,
    },
    KeyRefreshResp {
        bundle: Option<KeyBundle>,
    },
}

#[derive(Debug)]
struct TrustedResp {
    responder_pub: [u8; 32],
    granted: LevelSet,
    certificate: AttestationCert,
    bundles: Vec<(u64, KeyBundle)>,
}

fn encode_msg(msg: &AttestMsg) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        AttestMsg::ChallengeReq => out.push(OP_CHALLENGE_REQ),
        AttestMsg::ChallengeResp { nonce } => {
            out.push(OP_CHALLENGE_RESP);
            out.extend_from_slice(nonce);
        }
        AttestMsg::QuoteSubmit {
            quote,
            client_pub,
            want_keys,
        } => {
            out.push(OP_QUOTE_SUBMIT);
            out.extend_from_slice(&quote.encode());
            out.extend_from_slice(client_pub);
            out.push(want_keys.len() as u8);
            for w in want_keys {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        AttestMsg::AttestResp { verdict } => {
            out.push(OP_ATTEST_RESP);
            match verdict {
                Err(reason) => out.push(reason.code()),
                Ok(t) => {
                    out.push(0);
                    out.extend_from_slice(&t.responder_pub);
                    out.push(t.granted.bits());
                    out.extend_from_slice(&t.certificate.encode());
                    out.push(t.bundles.len() as u8);
                    for (publisher, bundle) in &t.bundles {
                        out.extend_from_slice(&publisher.to_le_bytes());
                        let b = bundle.encode();
                        out.extend_from_slice(&(b.len() as u16).to_le_bytes());
                        out.extend_from_slice(&b);
                    }
                }
            }
        }
        AttestMsg::KeyRegister {
            publisher_id,
            bundle,
        } => {
            out.push(OP_KEY_REGISTER);
            out.extend_from_slice(&publisher_id.to_le_bytes());
            let b = bundle.encode();
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(&b);
        }
        AttestMsg::KeyRegisterAck { ok } => {
            out.push(OP_KEY_REGISTER_ACK);
            out.push(*ok as u8);
        }
        AttestMsg::KeyRefreshReq { publisher_id } => {
            out.push(OP_KEY_REFRESH_REQ);
            out.extend_from_slice(&publisher_id.to_le_bytes());
        }
        AttestMsg::KeyRefreshResp { bundle } => {
            out.push(OP_KEY_REFRESH_RESP);
            match bundle {
                None => out.push(0),
                Some(b) => {
                    out.push(1);
                    let enc = b.encode();
                    out.extend_from_slice(&(enc.len() as u16).to_le_bytes());
                    out.extend_from_slice(&enc);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AttestationError> {
        if self.pos + n > self.buf.len() {
            return Err(AttestationError::Malformed);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, AttestationError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, AttestationError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AttestationError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bundle(&mut self) -> Result<KeyBundle, AttestationError> {
        let len = self.u16()? as usize;
        KeyBundle::decode(self.take(len)?).map_err(AttestationError::Crypto)
    }

    fn done(&self) -> Result<(), AttestationError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(AttestationError::Malformed)
        }
    }
}

fn decode_msg(payload: &[u8]) -> Result<AttestMsg, AttestationError> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let op = r.u8()?;
    let msg = match op {
        OP_CHALLENGE_REQ => AttestMsg::ChallengeReq,
        OP_CHALLENGE_RESP => AttestMsg::ChallengeResp {
            nonce: r.take(16)?.try_into().unwrap(),
        },
        OP_QUOTE_SUBMIT => {
            let quote = Quote::decode(r.take(QUOTE_WIRE_LEN)?)?;
            let client_pub: [u8; 32] = r.take(32)?.try_into().unwrap();
            let count = r.u8()? as usize;
            let mut want_keys = Vec::with_capacity(count);
            for _ in 0..count {
                want_keys.push(r.u64()?);
            }
            AttestMsg::QuoteSubmit {
                quote,
                client_pub,
                want_keys,
            }
        }
        OP_ATTEST_RESP => {
            let code = r.u8()?;
            if code == 0 {
                let responder_pub: [u8; 32] = r.take(32)?.try_into().unwrap();
                let granted =
                    LevelSet::from_bits(r.u8()?).map_err(|_| AttestationError::Malformed)?;
                let certificate = AttestationCert::decode(r.take(CERT_WIRE_LEN)?)?;
                let count = r.u8()? as usize;
                let mut bundles = Vec::with_capacity(count);
                for _ in 0..count {
                    let publisher = r.u64()?;
                    bundles.push((publisher, r.bundle()?));
                }
                AttestMsg::AttestResp {
                    verdict: Ok(TrustedResp {
                        responder_pub,
                        granted,
                        certificate,
                        bundles,
                    }),
                }
            } else {
                let reason =
                    RejectReason::from_code(code).ok_or(AttestationError::Malformed)?;
                AttestMsg::AttestResp {
                    verdict: Err(reason),
                }
            }
        }
        OP_KEY_REGISTER => AttestMsg::KeyRegister {
            publisher_id: r.u64()?,
            bundle: r.bundle()?,
        },
        OP_KEY_REGISTER_ACK => AttestMsg::KeyRegisterAck { ok: r.u8()? != 0 },
        OP_KEY_REFRESH_REQ => AttestMsg::KeyRefreshReq {
            publisher_id: r.u64()?,
        },
        OP_KEY_REFRESH_RESP => {
            let present = r.u8()? != 0;
            let bundle = if present { Some(r.bundle()?) } else { None };
            AttestMsg::KeyRefreshResp { bundle }
        }
        _ => return Err(AttestationError::Malformed),
    };
    r.done()?;
    Ok(msg)
}

fn attest_frame(platform_id: u64, payload: Vec<u8>) -> Publication {
    Publication::new(
        Topic::new(TOPIC_ATTEST).expect("constant topic fits"),
        PrivacyLevel::Low,
        EncryptionMode::Plaintext,
        platform_id,
        0,
        payload,
    )
    .expect("attest frames are well-formed")
}

/// TCP daemon wrapping an [`Attestor`]. One thread per connection;
/// the attestor state is the only shared piece.
pub struct AttestorServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    state: Arc<Mutex<Attestor>>,
    cert_vk: VerifyingKey,
}

impl AttestorServer {
    pub fn start(listen: &str, attestor: Attestor) -> std::io::Result<AttestorServer> {
        let cert_vk = attestor.cert_verifier();
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let state = Arc::new(Mutex::new(attestor));

        let accept_stop = Arc::clone(&stop);
        let accept_state = Arc::clone(&state);
        let accept_thread = std::thread::Builder::new()
            .name("attestor-accept".into())
            .spawn(move || {
                while !accept_stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let st = Arc::clone(&accept_state);
                            let conn_stop = Arc::clone(&accept_stop);
                            std::thread::Builder::new()
                                .name("attestor-conn".into())
                                .spawn(move || {
                                    let _ = serve_connection(stream, st, conn_stop);
                                })
                                .expect("spawn connection thread");
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20));
                        }
                        Err(_) => break,
                    }
                }
            })?;

        Ok(AttestorServer {
            addr,
            stop,
            accept_thread: Some(accept_thread),
            state,
            cert_vk,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn cert_verifier(&self) -> VerifyingKey {
        self.cert_vk
    }

    /// Shared attestor state, for wiring keys in tests and tooling.
    pub fn state(&self) -> Arc<Mutex<Attestor>> {
        Arc::clone(&self.state)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for AttestorServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(
    stream: TcpStream,
    state: Arc<Mutex<Attestor>>,
    stop: Arc<AtomicBool>,
) -> Result<(), AttestationError> {
    stream.set_read_timeout(Some(Duration::from_millis(250)))?;
    let mut reader = crate::envelope::FrameReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    // set after a trusted handshake; gates key registration and refresh
    let mut attested_platform: Option<u64> = None;

    loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        let frame = match reader.poll_frame() {
            Ok(Some(f)) => f,
            Ok(None) => continue, // timed out before a full frame
            Err(_) => return Ok(()), // disconnect or malformed stream
        };
        if frame.header().topic().as_str() != TOPIC_ATTEST {
            continue;
        }
        let platform_id = frame.header().publisher_id();
        let reply = match decode_msg(frame.payload()) {
            Err(_) => continue,
            Ok(AttestMsg::ChallengeReq) => {
                let nonce = state.lock().unwrap().issue_challenge(unix_millis());
                AttestMsg::ChallengeResp { nonce }
            }
            Ok(AttestMsg::QuoteSubmit {
                quote,
                client_pub,
                want_keys,
            }) => {
                let out = state.lock().unwrap().process_quote(
                    &quote,
                    &client_pub,
                    &want_keys,
                    unix_millis(),
                );
                match out.result.verdict {
                    super::Verdict::Trusted => {
                        attested_platform = Some(quote.identity.platform_id);
                        AttestMsg::AttestResp {
                            verdict: Ok(TrustedResp {
                                responder_pub: out.responder_pub.expect("trusted outcome"),
                                granted: out.result.granted_levels,
                                certificate: out.certificate.expect("trusted outcome"),
                                bundles: out.bundles,
                            }),
                        }
                    }
                    super::Verdict::Rejected(reason) => AttestMsg::AttestResp {
                        verdict: Err(reason),
                    },
                }
            }
            Ok(AttestMsg::KeyRegister {
                publisher_id,
                bundle,
            }) => {
                let ok = match attested_platform {
                    Some(p) => state
                        .lock()
                        .unwrap()
                        .register_data_key(p, publisher_id, &bundle)
                        .is_ok(),
                    None => false,
                };
                AttestMsg::KeyRegisterAck { ok }
            }
            Ok(AttestMsg::KeyRefreshReq { publisher_id }) => {
                let bundle = attested_platform.and_then(|p| {
                    state
                        .lock()
                        .unwrap()
                        .refresh_bundle(p, publisher_id)
                        .ok()
                });
                AttestMsg::KeyRefreshResp { bundle }
            }
            // client-to-server channel never carries responses
            Ok(_) => continue,
        };
        write_frame(&mut writer, &attest_frame(platform_id, encode_msg(&reply)))?;
        writer.flush()?;
    }
}

/// What a client walks away with after a trusted handshake.
#[derive(Debug)]
pub struct ClientAttestation {
    pub session: SessionKey,
    pub granted: LevelSet,
    pub certificate: AttestationCert,
    /// Unwrapped data keys per publisher id.
    pub keys: Vec<(u64, DataKey)>,
}

/// Client side of the attestation exchange. Keeps the connection (and
/// session) open so rotated keys can be re-fetched without a new
/// handshake.
pub struct AttestClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    platform_id: u64,
    session: Option<SessionKey>,
}

impl AttestClient {
    pub fn connect(addr: &str, platform_id: u64) -> std::io::Result<AttestClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(AttestClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            platform_id,
            session: None,
        })
    }

    fn round_trip(&mut self, msg: &AttestMsg) -> Result<AttestMsg, AttestationError> {
        write_frame(
            &mut self.writer,
            &attest_frame(self.platform_id, encode_msg(msg)),
        )?;
        self.writer.flush()?;
        let frame = read_frame(&mut self.reader)?;
        decode_msg(frame.payload())
    }

    /// Full handshake: challenge, quote bound to a fresh key-agreement
    /// value, session derivation, bundle unwrap.
    pub fn attest(
        &mut self,
        platform: &PlatformKey,
        identity: EnclaveIdentity,
        want_keys: &[u64],
    ) -> Result<Result<ClientAttestation, RejectReason>, AttestationError> {
        let nonce = match self.round_trip(&AttestMsg::ChallengeReq)? {
            AttestMsg::ChallengeResp { nonce } => nonce,
            _ => return Err(AttestationError::Malformed),
        };
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let quote = generate_quote(platform, identity, nonce, public.as_bytes());
        let resp = self.round_trip(&AttestMsg::QuoteSubmit {
            quote,
            client_pub: *public.as_bytes(),
            want_keys: want_keys.to_vec(),
        })?;
        let trusted = match resp {
            AttestMsg::AttestResp { verdict: Ok(t) } => t,
            AttestMsg::AttestResp {
                verdict: Err(reason),
            } => return Ok(Err(reason)),
            _ => return Err(AttestationError::Malformed),
        };
        let transcript = SessionTranscript {
            initiator_pub: public.as_bytes(),
            responder_pub: &trusted.responder_pub,
            nonce: &nonce,
        };
        let session = establish_session(&secret, &trusted.responder_pub, &transcript)?;
        let mut keys = Vec::with_capacity(trusted.bundles.len());
        for (publisher, bundle) in &trusted.bundles {
            keys.push((*publisher, unwrap_key(&session, bundle)?));
        }
        self.session = Some(session.clone());
        Ok(Ok(ClientAttestation {
            session,
            granted: trusted.granted,
            certificate: trusted.certificate,
            keys,
        }))
    }

    /// Deposit this publisher's data key with the attestor, wrapped under
    /// the session from a prior [`attest`](Self::attest) on this connection.
    pub fn register_data_key(
        &mut self,
        publisher_id: u64,
        dk: &DataKey,
    ) -> Result<bool, AttestationError> {
        let session = self
            .session
            .as_ref()
            .ok_or(AttestationError::UnknownSession(self.platform_id))?;
        let bundle = crate::crypto::wrap_key(session, dk);
        match self.round_trip(&AttestMsg::KeyRegister {
            publisher_id,
            bundle,
        })? {
            AttestMsg::KeyRegisterAck { ok } => Ok(ok),
            _ => Err(AttestationError::Malformed),
        }
    }

    /// Fetch the current epoch key for a publisher under the existing
    /// session; `Ok(None)` when the attestor has nothing for it yet.
    pub fn refresh_key(&mut self, publisher_id: u64) -> Result<Option<DataKey>, AttestationError> {
        let session = self
            .session
            .as_ref()
            .ok_or(AttestationError::UnknownSession(self.platform_id))?
            .clone();
        match self.round_trip(&AttestMsg::KeyRefreshReq { publisher_id })? {
            AttestMsg::KeyRefreshResp { bundle: None } => Ok(None),
            AttestMsg::KeyRefreshResp { bundle: Some(b) } => {
                Ok(Some(unwrap_key(&session, &b)?))
            }
            _ => Err(AttestationError::Malformed),
        }
    }
}
