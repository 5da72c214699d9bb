//! Simulated remote attestation.
//!
//! The hardware quoting infrastructure is replaced by an ordinary
//! asymmetric signing keypair (the "platform key") provisioned at setup,
//! and the external verification service by a local Attestor daemon that
//! checks quotes against an allowlist policy. The trust structure of the
//! real protocol is preserved: a party proves a code identity bound to a
//! freshness nonce and key-agreement material, and only a verified party
//! ends up holding the wrapped data key.

mod server;

pub use server::{AttestClient, AttestorServer, ClientAttestation};

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use crate::crypto::{unwrap_key, wrap_key, CodeIdentity, CryptoError, DataKey, KeyBundle, SessionKey};
use crate::envelope::{LevelSet, PrivacyLevel};

#[derive(Error, Debug)]
pub enum AttestationError {
    #[error("attestation result is not trusted")]
    NotTrusted,
    #[error("invalid key-agreement public value")]
    InvalidPublicValue,
    #[error("no established session for platform {0}")]
    UnknownSession(u64),
    #[error("no data key registered for publisher {0}")]
    UnknownPublisher(u64),
    #[error("malformed attestation message")]
    Malformed,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] crate::envelope::EnvelopeError),
}

/// Which part of the pipeline a party claims to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Producer,
    Aggregator,
    Consumer,
    Broker,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Producer, Role::Aggregator, Role::Consumer, Role::Broker];

    pub fn wire(self) -> u8 {
        match self {
            Role::Producer => 0,
            Role::Aggregator => 1,
            Role::Consumer => 2,
            Role::Broker => 3,
        }
    }

    pub fn from_wire(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Producer),
            1 => Some(Role::Aggregator),
            2 => Some(Role::Consumer),
            3 => Some(Role::Broker),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Producer => "producer",
            Role::Aggregator => "aggregator",
            Role::Consumer => "consumer",
            Role::Broker => "broker",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "producer" => Ok(Role::Producer),
            "aggregator" => Ok(Role::Aggregator),
            "consumer" => Ok(Role::Consumer),
            "broker" => Ok(Role::Broker),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// What a quote attests to: code digest, platform, claimed role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveIdentity {
    pub code: CodeIdentity,
    pub platform_id: u64,
    pub role: Role,
}

/// Signed attestation evidence. `report_data` binds the key-agreement
/// public value (its SHA-256) into the signed statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub identity: EnclaveIdentity,
    pub nonce: [u8; 16],
    pub report_data: [u8; 32],
    pub signature: [u8; 64],
}

const QUOTE_DOMAIN_TAG: &[u8] = b"tierbus.quote.v1";
pub const QUOTE_WIRE_LEN: usize = 32 + 8 + 1 + 16 + 32 + 64;

impl Quote {
    fn signing_bytes(identity: &EnclaveIdentity, nonce: &[u8; 16], report_data: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUOTE_DOMAIN_TAG.len() + QUOTE_WIRE_LEN - 64);
        out.extend_from_slice(QUOTE_DOMAIN_TAG);
        out.extend_from_slice(&identity.code.0);
        out.extend_from_slice(&identity.platform_id.to_le_bytes());
        out.push(identity.role.wire());
        out.extend_from_slice(nonce);
        out.extend_from_slice(report_data);
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(QUOTE_WIRE_LEN);
        out.extend_from_slice(&self.identity.code.0);
        out.extend_from_slice(&self.identity.platform_id.to_le_bytes());
        out.push(self.identity.role.wire());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.report_data);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Quote, AttestationError> {
        if bytes.len() != QUOTE_WIRE_LEN {
            return Err(AttestationError::Malformed);
        }
        let code = CodeIdentity(bytes[..32].try_into().unwrap());
        let platform_id = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let role = Role::from_wire(bytes[40]).ok_or(AttestationError::Malformed)?;
        Ok(Quote {
            identity: EnclaveIdentity {
                code,
                platform_id,
                role,
            },
            nonce: bytes[41..57].try_into().unwrap(),
            report_data: bytes[57..89].try_into().unwrap(),
            signature: bytes[89..].try_into().unwrap(),
        })
    }
}

/// Verification policy: per-role allowlist of code identities plus a
/// freshness bound on quotes. An empty allowlist admits nobody.
#[derive(Debug, Clone)]
pub struct Policy {
    allowlist: HashMap<Role, HashSet<CodeIdentity>>,
    pub max_quote_age_ms: u64,
}

impl Policy {
    pub fn new(max_quote_age_ms: u64) -> Policy {
        Policy {
            allowlist: HashMap::new(),
            max_quote_age_ms,
        }
    }

    pub fn allow(&mut self, role: Role, code: CodeIdentity) {
        self.allowlist.entry(role).or_default().insert(code);
    }

    pub fn is_allowed(&self, role: Role, code: &CodeIdentity) -> bool {
        self.allowlist
            .get(&role)
            .map(|s| s.contains(code))
            .unwrap_or(false)
    }

    /// Allowlisted somewhere, but under a different role.
    pub fn is_allowed_elsewhere(&self, role: Role, code: &CodeIdentity) -> bool {
        self.allowlist
            .iter()
            .any(|(r, set)| *r != role && set.contains(code))
    }

    /// Policy file format: JSON object mapping role name to an array of
    /// lowercase hex SHA-256 digests.
    pub fn from_json(text: &str, max_quote_age_ms: u64) -> Result<Policy, String> {
        let raw: HashMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| format!("policy parse: {e}"))?;
        let mut policy = Policy::new(max_quote_age_ms);
        for (role_name, digests) in raw {
            let role = Role::from_str(&role_name)?;
            for d in digests {
                let code = CodeIdentity::from_hex(&d)
                    .ok_or_else(|| format!("bad digest for {role_name}: {d:?}"))?;
                policy.allow(role, code);
            }
        }
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        let mut raw: HashMap<String, Vec<String>> = HashMap::new();
        for (role, set) in &self.allowlist {
            let mut digests: Vec<String> = set.iter().map(|c| c.to_hex()).collect();
            digests.sort();
            raw.insert(role.to_string(), digests);
        }
        serde_json::to_string_pretty(&raw).expect("policy serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    NonceMismatch,
    UnknownIdentity,
    WrongRole,
}

impl RejectReason {
    pub fn code(self) -> u8 {
        match self {
            RejectReason::BadSignature => 1,
            RejectReason::NonceMismatch => 2,
            RejectReason::UnknownIdentity => 3,
            RejectReason::WrongRole => 4,
        }
    }

    pub fn from_code(b: u8) -> Option<RejectReason> {
        match b {
            1 => Some(RejectReason::BadSignature),
            2 => Some(RejectReason::NonceMismatch),
            3 => Some(RejectReason::UnknownIdentity),
            4 => Some(RejectReason::WrongRole),
            _ => None,
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::BadSignature => "bad-signature",
            RejectReason::NonceMismatch => "nonce-mismatch",
            RejectReason::UnknownIdentity => "unknown-identity",
            RejectReason::WrongRole => "wrong-role",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Trusted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_trusted(&self) -> bool {
        matches!(self, Verdict::Trusted)
    }
}

/// Outcome of a verification, with the session key present iff trusted.
/// An unattested party is never granted anything above Low.
#[derive(Debug, Clone)]
pub struct AttestationResult {
    pub verdict: Verdict,
    pub session: Option<SessionKey>,
    pub granted_levels: LevelSet,
}

impl AttestationResult {
    pub fn rejected(reason: RejectReason) -> AttestationResult {
        AttestationResult {
            verdict: Verdict::Rejected(reason),
            session: None,
            granted_levels: LevelSet::of(&[PrivacyLevel::Low]),
        }
    }
}

/// Platform attestation signing key (the stand-in for the hardware
/// quoting key). One per simulated platform; tests share one.
#[derive(Clone)]
pub struct PlatformKey {
    signing: SigningKey,
}

impl std::fmt::Debug for PlatformKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PlatformKey(<redacted>)")
    }
}

impl PlatformKey {
    pub fn generate() -> PlatformKey {
        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        PlatformKey {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_seed(seed: [u8; 32]) -> PlatformKey {
        PlatformKey {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    /// Key file: seed hex on the first line, public key hex on the second.
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let text = format!(
            "{}\n{}\n",
            hex::encode(self.seed()),
            hex::encode(self.verifying_key().as_bytes())
        );
        std::fs::write(path, text)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<PlatformKey> {
        let text = std::fs::read_to_string(path)?;
        let seed_hex = text.lines().next().unwrap_or("").trim();
        let seed: [u8; 32] = hex::decode(seed_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "bad platform key file")
            })?;
        Ok(PlatformKey::from_seed(seed))
    }
}

/// Accepts a 64-hex-char verifying key inline, or a path to a file whose
/// last hex line is the public key (the [`PlatformKey::save`] layout).
pub fn load_verifying_key(spec: &str) -> std::io::Result<VerifyingKey> {
    let parse = |s: &str| -> Option<VerifyingKey> {
        let bytes: [u8; 32] = hex::decode(s.trim()).ok()?.try_into().ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    };
    if let Some(vk) = parse(spec) {
        return Ok(vk);
    }
    let text = std::fs::read_to_string(spec)?;
    text.lines()
        .rev()
        .find_map(|line| parse(line))
        .ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "no verifying key found")
        })
}

/// Produce signed attestation evidence binding `identity`, the challenge
/// nonce, and the digest of the key-agreement public value.
pub fn generate_quote(
    platform: &PlatformKey,
    identity: EnclaveIdentity,
    nonce: [u8; 16],
    key_agreement_public: &[u8; 32],
) -> Quote {
    let report_data: [u8; 32] = Sha256::digest(key_agreement_public).into();
    let msg = Quote::signing_bytes(&identity, &nonce, &report_data);
    let signature = platform.signing.sign(&msg).to_bytes();
    Quote {
        identity,
        nonce,
        report_data,
        signature,
    }
}

/// Pure quote check: signature under the platform key, nonce equality,
/// allowlist membership under the claimed role. Failures are reported in
/// the verdict, never by panic.
pub fn verify_quote(
    quote: &Quote,
    policy: &Policy,
    expected_nonce: &[u8; 16],
    platform_vk: &VerifyingKey,
) -> Verdict {
    let msg = Quote::signing_bytes(&quote.identity, &quote.nonce, &quote.report_data);
    let sig = Signature::from_bytes(&quote.signature);
    if platform_vk.verify(&msg, &sig).is_err() {
        return Verdict::Rejected(RejectReason::BadSignature);
    }
    if &quote.nonce != expected_nonce {
        return Verdict::Rejected(RejectReason::NonceMismatch);
    }
    if policy.is_allowed(quote.identity.role, &quote.identity.code) {
        Verdict::Trusted
    } else if policy.is_allowed_elsewhere(quote.identity.role, &quote.identity.code) {
        Verdict::Rejected(RejectReason::WrongRole)
    } else {
        Verdict::Rejected(RejectReason::UnknownIdentity)
    }
}

/// Transcript context folded into the session key so each side proves it
/// saw the same handshake.
pub struct SessionTranscript<'a> {
    pub initiator_pub: &'a [u8; 32],
    pub responder_pub: &'a [u8; 32],
    pub nonce: &'a [u8; 16],
}

/// Ephemeral Diffie-Hellman agreement; both sides derive the same 32-byte
/// key. Rejects non-contributory (low-order) public values.
pub fn establish_session(
    my_secret: &StaticSecret,
    their_public: &[u8; 32],
    transcript: &SessionTranscript<'_>,
) -> Result<SessionKey, AttestationError> {
    let shared = my_secret.diffie_hellman(&X25519Public::from(*their_public));
    if !shared.was_contributory() {
        return Err(AttestationError::InvalidPublicValue);
    }
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"tierbus.session.v1")
        .chain_update(shared.as_bytes())
        .chain_update(transcript.initiator_pub)
        .chain_update(transcript.responder_pub)
        .chain_update(transcript.nonce)
        .finalize()
        .into();
    Ok(SessionKey::from_bytes(key))
}

/// Hand the data key to a verified party: wrap it under the session
/// established by the handshake. Issuing against a rejected result is a
/// hard error.
pub fn issue_data_key(result: &AttestationResult, dk: &DataKey) -> Result<KeyBundle, AttestationError> {
    if !result.verdict.is_trusted() {
        return Err(AttestationError::NotTrusted);
    }
    let session = result.session.as_ref().ok_or(AttestationError::NotTrusted)?;
    Ok(wrap_key(session, dk))
}

/// Signed statement the Attestor hands a verified party, so publishers
/// can check attestation status without redoing the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationCert {
    pub platform_id: u64,
    pub code: CodeIdentity,
    pub granted: LevelSet,
    pub expires_ms: u64,
    pub signature: [u8; 64],
}

const CERT_DOMAIN_TAG: &[u8] = b"tierbus.cert.v1";
pub const CERT_WIRE_LEN: usize = 8 + 32 + 1 + 8 + 64;

impl AttestationCert {
    fn signing_bytes(platform_id: u64, code: &CodeIdentity, granted: LevelSet, expires_ms: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(CERT_DOMAIN_TAG.len() + CERT_WIRE_LEN - 64);
        out.extend_from_slice(CERT_DOMAIN_TAG);
        out.extend_from_slice(&platform_id.to_le_bytes());
        out.extend_from_slice(&code.0);
        out.push(granted.bits());
        out.extend_from_slice(&expires_ms.to_le_bytes());
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CERT_WIRE_LEN);
        out.extend_from_slice(&self.platform_id.to_le_bytes());
        out.extend_from_slice(&self.code.0);
        out.push(self.granted.bits());
        out.extend_from_slice(&self.expires_ms.to_le_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<AttestationCert, AttestationError> {
        if bytes.len() != CERT_WIRE_LEN {
            return Err(AttestationError::Malformed);
        }
        Ok(AttestationCert {
            platform_id: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            code: CodeIdentity(bytes[8..40].try_into().unwrap()),
            granted: LevelSet::from_bits(bytes[40]).map_err(|_| AttestationError::Malformed)?,
            expires_ms: u64::from_le_bytes(bytes[41..49].try_into().unwrap()),
            signature: bytes[49..].try_into().unwrap(),
        })
    }

    pub fn verify(&self, issuer: &VerifyingKey, now_ms: u64) -> bool {
        if now_ms > self.expires_ms {
            return false;
        }
        let msg = Self::signing_bytes(self.platform_id, &self.code, self.granted, self.expires_ms);
        issuer
            .verify(&msg, &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

/// Bounded single-use nonce store. Eviction is oldest-first; a nonce is
/// either pending (issued, unused) or burned.
struct NonceCache {
    map: HashMap<[u8; 16], u64>,
    order: VecDeque<[u8; 16]>,
    cap: usize,
}

impl NonceCache {
    fn new(cap: usize) -> NonceCache {
        NonceCache {
            map: HashMap::new(),
            order: VecDeque::new(),
            cap,
        }
    }

    fn insert(&mut self, nonce: [u8; 16], now_ms: u64) {
        if self.map.insert(nonce, now_ms).is_none() {
            self.order.push_back(nonce);
        }
        while self.map.len() > self.cap {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            } else {
                break;
            }
        }
    }

    fn remove(&mut self, nonce: &[u8; 16]) -> Option<u64> {
        self.map.remove(nonce)
    }

    fn contains(&self, nonce: &[u8; 16]) -> bool {
        self.map.contains_key(nonce)
    }
}

pub const DEFAULT_REPLAY_CACHE_CAP: usize = 1 << 16;
pub const DEFAULT_CERT_TTL_MS: u64 = 600_000;

/// Result of one complete handshake as seen by the Attestor.
#[derive(Debug)]
pub struct HandshakeOutcome {
    pub result: AttestationResult,
    /// Attestor-side key-agreement public value (present iff trusted).
    pub responder_pub: Option<[u8; 32]>,
    pub certificate: Option<AttestationCert>,
    /// Wrapped current-epoch keys for the requested publishers.
    pub bundles: Vec<(u64, KeyBundle)>,
}

/// The verification daemon's state machine: policy checks, nonce
/// lifecycle, session establishment, and data-key issuance. The network
/// front-end lives in [`AttestorServer`].
pub struct Attestor {
    policy: Policy,
    platform_vk: VerifyingKey,
    cert_key: SigningKey,
    cert_ttl_ms: u64,
    data_keys: HashMap<u64, DataKey>,
    sessions: HashMap<u64, SessionKey>,
    pending: NonceCache,
    burned: NonceCache,
}

impl Attestor {
    pub fn new(policy: Policy, platform_vk: VerifyingKey) -> Attestor {
        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        Attestor {
            policy,
            platform_vk,
            cert_key: SigningKey::from_bytes(&seed),
            cert_ttl_ms: DEFAULT_CERT_TTL_MS,
            data_keys: HashMap::new(),
            sessions: HashMap::new(),
            pending: NonceCache::new(DEFAULT_REPLAY_CACHE_CAP),
            burned: NonceCache::new(DEFAULT_REPLAY_CACHE_CAP),
        }
    }

    pub fn cert_verifier(&self) -> VerifyingKey {
        self.cert_key.verifying_key()
    }

    /// Issue a fresh challenge nonce; it is valid for one quote within
    /// the policy's freshness window.
    pub fn issue_challenge(&mut self, now_ms: u64) -> [u8; 16] {
        let mut nonce = [0u8; 16];
        OsRng.fill_bytes(&mut nonce);
        self.pending.insert(nonce, now_ms);
        nonce
    }

    /// Check-and-consume a quote against the policy. The nonce is burned
    /// whatever the outcome, so a replayed or expired quote can only be
    /// rejected.
    pub fn process_quote(
        &mut self,
        quote: &Quote,
        client_pub: &[u8; 32],
        want_keys: &[u64],
        now_ms: u64,
    ) -> HandshakeOutcome {
        let rejected = |reason| HandshakeOutcome {
            result: AttestationResult::rejected(reason),
            responder_pub: None,
            certificate: None,
            bundles: Vec::new(),
        };

        if self.burned.contains(&quote.nonce) {
            return rejected(RejectReason::NonceMismatch);
        }
        let issued_at = match self.pending.remove(&quote.nonce) {
            Some(t) => t,
            None => return rejected(RejectReason::NonceMismatch),
        };
        self.burned.insert(quote.nonce, now_ms);
        if now_ms.saturating_sub(issued_at) > self.policy.max_quote_age_ms {
            return rejected(RejectReason::NonceMismatch);
        }
        // the quote must bind the key-agreement value it arrived with
        let bound: [u8; 32] = Sha256::digest(client_pub).into();
        if bound != quote.report_data {
            return rejected(RejectReason::BadSignature);
        }
        let verdict = verify_quote(quote, &self.policy, &quote.nonce, &self.platform_vk);
        if let Verdict::Rejected(reason) = verdict {
            return rejected(reason);
        }

        let responder_secret = StaticSecret::random_from_rng(OsRng);
        let responder_pub = X25519Public::from(&responder_secret);
        let transcript = SessionTranscript {
            initiator_pub: client_pub,
            responder_pub: responder_pub.as_bytes(),
            nonce: &quote.nonce,
        };
        let session = match establish_session(&responder_secret, client_pub, &transcript) {
            Ok(s) => s,
            Err(_) => return rejected(RejectReason::BadSignature),
        };
        self.sessions
            .insert(quote.identity.platform_id, session.clone());

        let granted = LevelSet::all();
        let expires_ms = now_ms + self.cert_ttl_ms;
        let cert_msg = AttestationCert::signing_bytes(
            quote.identity.platform_id,
            &quote.identity.code,
            granted,
            expires_ms,
        );
        let certificate = AttestationCert {
            platform_id: quote.identity.platform_id,
            code: quote.identity.code,
            granted,
            expires_ms,
            signature: self.cert_key.sign(&cert_msg).to_bytes(),
        };

        let result = AttestationResult {
            verdict: Verdict::Trusted,
            session: Some(session),
            granted_levels: granted,
        };
        let bundles = want_keys
            .iter()
            .filter_map(|publisher| {
                self.data_keys.get(publisher).map(|dk| {
                    (*publisher, issue_data_key(&result, dk).expect("trusted result"))
                })
            })
            .collect();

        HandshakeOutcome {
            result,
            responder_pub: Some(*responder_pub.as_bytes()),
            certificate: Some(certificate),
            bundles,
        }
    }

    /// A producer (attested on this daemon) deposits the data key for its
    /// publisher id, wrapped under its own session key.
    pub fn register_data_key(
        &mut self,
        platform_id: u64,
        publisher_id: u64,
        bundle: &KeyBundle,
    ) -> Result<(), AttestationError> {
        let session = self
            .sessions
            .get(&platform_id)
            .ok_or(AttestationError::UnknownSession(platform_id))?;
        let dk = unwrap_key(session, bundle)?;
        self.data_keys.insert(publisher_id, dk);
        Ok(())
    }

    /// Direct key injection for in-process wiring and tests.
    pub fn set_data_key(&mut self, publisher_id: u64, dk: DataKey) {
        self.data_keys.insert(publisher_id, dk);
    }

    pub fn data_key_epoch(&self, publisher_id: u64) -> Option<u32> {
        self.data_keys.get(&publisher_id).map(|d| d.key_id())
    }

    /// Re-wrap the current epoch key under an existing session; no new
    /// attestation required.
    pub fn refresh_bundle(
        &mut self,
        platform_id: u64,
        publisher_id: u64,
    ) -> Result<KeyBundle, AttestationError> {
        let session = self
            .sessions
            .get(&platform_id)
            .ok_or(AttestationError::UnknownSession(platform_id))?;
        let dk = self
            .data_keys
            .get(&publisher_id)
            .ok_or(AttestationError::UnknownPublisher(publisher_id))?;
        Ok(wrap_key(session, dk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::code_hash;

    fn test_identity(role: Role, platform_id: u64) -> EnclaveIdentity {
        EnclaveIdentity {
            code: code_hash(b"trusted-artifact"),
            platform_id,
            role,
        }
    }

    fn policy_with(role: Role, code: CodeIdentity) -> Policy {
        let mut p = Policy::new(30_000);
        p.allow(role, code);
        p
    }

    #[test]
    fn honest_round_trip_is_trusted() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let nonce = [7u8; 16];
        let client_pub = [9u8; 32];
        let q = generate_quote(&platform, identity, nonce, &client_pub);
        assert_eq!(
            verify_quote(&q, &policy, &nonce, &platform.verifying_key()),
            Verdict::Trusted
        );
    }

    #[test]
    fn unknown_identity_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = Policy::new(30_000); // empty allowlist admits nobody
        let nonce = [7u8; 16];
        let q = generate_quote(&platform, identity, nonce, &[9u8; 32]);
        assert_eq!(
            verify_quote(&q, &policy, &nonce, &platform.verifying_key()),
            Verdict::Rejected(RejectReason::UnknownIdentity)
        );
    }

    #[test]
    fn wrong_role_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        // code is allowlisted, but only as a producer
        let policy = policy_with(Role::Producer, identity.code);
        let nonce = [7u8; 16];
        let q = generate_quote(&platform, identity, nonce, &[9u8; 32]);
        assert_eq!(
            verify_quote(&q, &policy, &nonce, &platform.verifying_key()),
            Verdict::Rejected(RejectReason::WrongRole)
        );
    }

    #[test]
    fn nonce_mismatch_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let q = generate_quote(&platform, identity, [7u8; 16], &[9u8; 32]);
        assert_eq!(
            verify_quote(&q, &policy, &[8u8; 16], &platform.verifying_key()),
            Verdict::Rejected(RejectReason::NonceMismatch)
        );
    }

    #[test]
    fn signature_bit_flips_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let nonce = [7u8; 16];
        let q = generate_quote(&platform, identity, nonce, &[9u8; 32]);
        for byte in 0..64 {
            let mut bad = q.clone();
            bad.signature[byte] ^= 1;
            assert_eq!(
                verify_quote(&bad, &policy, &nonce, &platform.verifying_key()),
                Verdict::Rejected(RejectReason::BadSignature),
                "byte {byte}"
            );
        }
    }

    #[test]
    fn session_agreement_both_sides_equal() {
        let a = StaticSecret::random_from_rng(OsRng);
        let b = StaticSecret::random_from_rng(OsRng);
        let a_pub = X25519Public::from(&a);
        let b_pub = X25519Public::from(&b);
        let nonce = [3u8; 16];
        let t = SessionTranscript {
            initiator_pub: a_pub.as_bytes(),
            responder_pub: b_pub.as_bytes(),
            nonce: &nonce,
        };
        let ka = establish_session(&a, b_pub.as_bytes(), &t).unwrap();
        let kb = establish_session(&b, a_pub.as_bytes(), &t).unwrap();
        assert_eq!(ka, kb);
    }

    #[test]
    fn independent_handshakes_yield_distinct_keys() {
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let a = StaticSecret::random_from_rng(OsRng);
            let b = StaticSecret::random_from_rng(OsRng);
            let a_pub = X25519Public::from(&a);
            let b_pub = X25519Public::from(&b);
            let nonce = [0u8; 16];
            let t = SessionTranscript {
                initiator_pub: a_pub.as_bytes(),
                responder_pub: b_pub.as_bytes(),
                nonce: &nonce,
            };
            let k = establish_session(&a, b_pub.as_bytes(), &t).unwrap();
            assert!(seen.insert(*k.as_bytes()));
        }
    }

    #[test]
    fn low_order_public_value_rejected() {
        let a = StaticSecret::random_from_rng(OsRng);
        let t = SessionTranscript {
            initiator_pub: &[0u8; 32],
            responder_pub: &[0u8; 32],
            nonce: &[0u8; 16],
        };
        assert!(matches!(
            establish_session(&a, &[0u8; 32], &t),
            Err(AttestationError::InvalidPublicValue)
        ));
    }

    #[test]
    fn issue_data_key_requires_trust() {
        let rejected = AttestationResult::rejected(RejectReason::UnknownIdentity);
        let dk = DataKey::generate(1);
        assert!(matches!(
            issue_data_key(&rejected, &dk),
            Err(AttestationError::NotTrusted)
        ));
        let trusted = AttestationResult {
            verdict: Verdict::Trusted,
            session: Some(SessionKey::from_bytes([5u8; 32])),
            granted_levels: LevelSet::all(),
        };
        let bundle = issue_data_key(&trusted, &dk).unwrap();
        assert_eq!(
            unwrap_key(&SessionKey::from_bytes([5u8; 32]), &bundle).unwrap(),
            dk
        );
    }

    #[test]
    fn bundle_for_session_a_unusable_by_session_b() {
        let dk = DataKey::generate(1);
        let a = SessionKey::from_bytes([1u8; 32]);
        let b = SessionKey::from_bytes([2u8; 32]);
        let bundle = wrap_key(&a, &dk);
        assert!(unwrap_key(&b, &bundle).is_err());
    }

    fn honest_handshake(attestor: &mut Attestor, platform: &PlatformKey, identity: EnclaveIdentity, now_ms: u64) -> HandshakeOutcome {
        let nonce = attestor.issue_challenge(now_ms);
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let q = generate_quote(platform, identity, nonce, public.as_bytes());
        attestor.process_quote(&q, public.as_bytes(), &[], now_ms)
    }

    #[test]
    fn attestor_replay_is_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let mut attestor = Attestor::new(policy, platform.verifying_key());

        let nonce = attestor.issue_challenge(1000);
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let q = generate_quote(&platform, identity, nonce, public.as_bytes());
        let first = attestor.process_quote(&q, public.as_bytes(), &[], 1000);
        assert!(first.result.verdict.is_trusted());
        let replay = attestor.process_quote(&q, public.as_bytes(), &[], 1001);
        assert_eq!(
            replay.result.verdict,
            Verdict::Rejected(RejectReason::NonceMismatch)
        );
    }

    #[test]
    fn attestor_expired_nonce_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let mut attestor = Attestor::new(policy, platform.verifying_key());

        let nonce = attestor.issue_challenge(1000);
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let q = generate_quote(&platform, identity, nonce, public.as_bytes());
        let out = attestor.process_quote(&q, public.as_bytes(), &[], 1000 + 30_001);
        assert_eq!(
            out.result.verdict,
            Verdict::Rejected(RejectReason::NonceMismatch)
        );
    }

    #[test]
    fn attestor_substituted_public_value_rejected() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let mut attestor = Attestor::new(policy, platform.verifying_key());

        let nonce = attestor.issue_challenge(1000);
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let q = generate_quote(&platform, identity, nonce, public.as_bytes());
        // a middleman swaps in its own key-agreement value
        let mitm = [0xAAu8; 32];
        let out = attestor.process_quote(&q, &mitm, &[], 1000);
        assert_eq!(
            out.result.verdict,
            Verdict::Rejected(RejectReason::BadSignature)
        );
    }

    #[test]
    fn attestor_full_key_possession_flow() {
        let platform = PlatformKey::from_seed([1u8; 32]);
        let identity = test_identity(Role::Consumer, 42);
        let policy = policy_with(Role::Consumer, identity.code);
        let mut attestor = Attestor::new(policy, platform.verifying_key());
        let dk = DataKey::generate(0);
        attestor.set_data_key(700, dk.clone());

        let nonce = attestor.issue_challenge(1000);
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = X25519Public::from(&secret);
        let q = generate_quote(&platform, identity, nonce, public.as_bytes());
        let out = attestor.process_quote(&q, public.as_bytes(), &[700, 999], 1000);
        assert!(out.result.verdict.is_trusted());
        // only the registered publisher's key is issued
        assert_eq!(out.bundles.len(), 1);
        let (publisher, bundle) = &out.bundles[0];
        assert_eq!(*publisher, 700);

        let responder_pub = out.responder_pub.unwrap();
        let t = SessionTranscript {
            initiator_pub: public.as_bytes(),
            responder_pub: &responder_pub,
            nonce: &nonce,
        };
        let session = establish_session(&secret, &responder_pub, &t).unwrap();
        assert_eq!(unwrap_key(&session, bundle).unwrap(), dk);

        let cert = out.certificate.unwrap();
        assert!(cert.verify(&attestor.cert_verifier(), 1000));
        assert!(!cert.verify(&attestor.cert_verifier(), cert.expires_ms + 1));

        // refresh path after rotation
        let rotated = dk.rotate();
        attestor.set_data_key(700, rotated.clone());
        let refreshed = attestor.refresh_bundle(42, 700).unwrap();
        assert_eq!(unwrap_key(&session, &refreshed).unwrap(), rotated);
    }

    #[test]
    fn key_possession_gate_matrix() {
        // {allowlisted, not} x {valid sig, tampered} x {fresh nonce, replayed}:
        // exactly the (yes, yes, yes) cell yields a usable data key
        let platform = PlatformKey::from_seed([1u8; 32]);
        let dk = DataKey::generate(0);
        for allowlisted in [true, false] {
            for valid_sig in [true, false] {
                for fresh in [true, false] {
                    let identity = test_identity(Role::Consumer, 42);
                    let mut policy = Policy::new(30_000);
                    if allowlisted {
                        policy.allow(Role::Consumer, identity.code);
                    }
                    let mut attestor = Attestor::new(policy, platform.verifying_key());
                    attestor.set_data_key(700, dk.clone());

                    let nonce = attestor.issue_challenge(0);
                    let secret = StaticSecret::random_from_rng(OsRng);
                    let public = X25519Public::from(&secret);
                    let mut q = generate_quote(&platform, identity, nonce, public.as_bytes());
                    if !valid_sig {
                        q.signature[0] ^= 1;
                    }
                    if !fresh {
                        // burn the nonce with an unrelated handshake first
                        let other_secret = StaticSecret::random_from_rng(OsRng);
                        let other_pub = X25519Public::from(&other_secret);
                        let other_quote =
                            generate_quote(&platform, identity, nonce, other_pub.as_bytes());
                        attestor.process_quote(&other_quote, other_pub.as_bytes(), &[], 0);
                    }
                    let out = attestor.process_quote(&q, public.as_bytes(), &[700], 0);
                    let got_key = out.result.verdict.is_trusted() && !out.bundles.is_empty();
                    assert_eq!(
                        got_key,
                        allowlisted && valid_sig && fresh,
                        "cell ({allowlisted},{valid_sig},{fresh})"
                    );
                }
            }
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let code = code_hash(b"x");
        let mut p = Policy::new(1000);
        p.allow(Role::Producer, code);
        p.allow(Role::Consumer, code);
        let json = p.to_json();
        let back = Policy::from_json(&json, 1000).unwrap();
        assert!(back.is_allowed(Role::Producer, &code));
        assert!(back.is_allowed(Role::Consumer, &code));
        assert!(!back.is_allowed(Role::Broker, &code));
        assert!(Policy::from_json("{\"producer\": [\"zz\"]}", 1).is_err());
        assert!(Policy::from_json("{\"pirate\": []}", 1).is_err());
    }

    #[test]
    fn quote_and_cert_encode_round_trip() {
        let platform = PlatformKey::from_seed([2u8; 32]);
        let q = generate_quote(
            &platform,
            test_identity(Role::Aggregator, 5),
            [1u8; 16],
            &[2u8; 32],
        );
        assert_eq!(Quote::decode(&q.encode()).unwrap(), q);
        assert!(Quote::decode(&q.encode()[1..]).is_err());

        let mut attestor = Attestor::new(Policy::new(1000), platform.verifying_key());
        let mut p = Policy::new(30_000);
        p.allow(Role::Aggregator, test_identity(Role::Aggregator, 5).code);
        attestor.policy = p;
        let out = honest_handshake(&mut attestor, &platform, test_identity(Role::Aggregator, 5), 50);
        let cert = out.certificate.unwrap();
        assert_eq!(AttestationCert::decode(&cert.encode()).unwrap(), cert);
    }

    #[test]
    fn nonce_cache_is_bounded() {
        let mut cache = NonceCache::new(4);
        for i in 0u8..10 {
            let mut n = [0u8; 16];
            n[0] = i;
            cache.insert(n, i as u64);
        }
        assert!(cache.map.len() <= 4);
        let mut oldest = [0u8; 16];
        oldest[0] = 0;
        assert!(!cache.contains(&oldest));
        let mut newest = [0u8; 16];
        newest[0] = 9;
        assert!(cache.contains(&newest));
    }
}
