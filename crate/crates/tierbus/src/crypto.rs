//! Payload protection and key hand-off primitives.
//!
//! Payloads are sealed with AES-256 in counter mode, exactly as the
//! platform's data plane expects: length-preserving, no built-in
//! integrity (tampering surfaces when the record decoder rejects the
//! plaintext). Key wrapping for attestation hand-off, by contrast, is
//! authenticated encryption: a corrupted or mis-keyed bundle must fail
//! loudly, not decrypt to garbage.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes256;
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

type Aes256Ctr = ctr::Ctr128BE<Aes256>;
type HmacSha256 = Hmac<Sha256>;

#[derive(Error, Debug, PartialEq, Eq)]
pub enum CryptoError {
    #[error("bundle authentication failed")]
    AuthFailure,
    #[error("malformed key bundle")]
    MalformedBundle,
    #[error("sealed message shorter than its sequence prefix")]
    MalformedSealedMessage,
}

/// Symmetric data key for one epoch. `key_id` increments on rotation.
#[derive(Clone, PartialEq, Eq)]
pub struct DataKey {
    key_id: u32,
    secret: [u8; 32],
}

impl DataKey {
    pub fn generate(key_id: u32) -> DataKey {
        let mut secret = [0u8; 32];
        OsRng.fill_bytes(&mut secret);
        DataKey { key_id, secret }
    }

    pub fn from_parts(key_id: u32, secret: [u8; 32]) -> DataKey {
        DataKey { key_id, secret }
    }

    /// Next epoch: fresh secret, incremented id.
    pub fn rotate(&self) -> DataKey {
        DataKey::generate(self.key_id + 1)
    }

    pub fn key_id(&self) -> u32 {
        self.key_id
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }
}

impl std::fmt::Debug for DataKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DataKey(epoch={}, secret=<redacted>)", self.key_id)
    }
}

/// Per-message initialization vector for counter mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Iv(pub [u8; 16]);

/// Symmetric key established by a completed attestation exchange.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; 32]);

impl SessionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> SessionKey {
        SessionKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKey(<redacted>)")
    }
}

/// SHA-256 digest identifying a code artifact.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeIdentity(pub [u8; 32]);

impl CodeIdentity {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<CodeIdentity> {
        let bytes = hex::decode(s.trim()).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(CodeIdentity(arr))
    }
}

impl std::fmt::Debug for CodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CodeIdentity({})", self.to_hex())
    }
}

impl std::fmt::Display for CodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// A data key encrypted-and-authenticated under a session key. The epoch
/// travels in the clear so consumers can index bundles by header field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBundle {
    pub key_id: u32,
    pub wrapped: Vec<u8>,
}

// wrapped = iv(16) || ciphertext(32) || hmac tag(32)
const BUNDLE_IV_LEN: usize = 16;
const BUNDLE_CT_LEN: usize = 32;
const BUNDLE_TAG_LEN: usize = 32;
pub const BUNDLE_WRAPPED_LEN: usize = BUNDLE_IV_LEN + BUNDLE_CT_LEN + BUNDLE_TAG_LEN;

impl KeyBundle {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.wrapped.len());
        out.extend_from_slice(&self.key_id.to_le_bytes());
        out.extend_from_slice(&self.wrapped);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<KeyBundle, CryptoError> {
        if bytes.len() != 4 + BUNDLE_WRAPPED_LEN {
            return Err(CryptoError::MalformedBundle);
        }
        Ok(KeyBundle {
            key_id: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            wrapped: bytes[4..].to_vec(),
        })
    }
}

/// Counter-mode seal. Ciphertext has the same length as the plaintext;
/// [`open_payload`] with the same key and IV inverts it.
pub fn seal_payload(key: &DataKey, iv: &Iv, plaintext: &[u8]) -> Vec<u8> {
    let mut buf = plaintext.to_vec();
    let mut cipher = Aes256Ctr::new(&key.secret.into(), &iv.0.into());
    cipher.apply_keystream(&mut buf);
    buf
}

/// Counter mode is its own inverse.
pub fn open_payload(key: &DataKey, iv: &Iv, ciphertext: &[u8]) -> Vec<u8> {
    seal_payload(key, iv, ciphertext)
}

/// Deterministic per-message IV: publisher_id (8B LE) || key_epoch (4B LE)
/// || low 32 bits of seq (4B LE). Injective per (key, publisher) while
/// seq stays below 2^32; key rotation resets the exposure window long
/// before that.
pub fn derive_iv(publisher_id: u64, key_epoch: u32, seq: u64) -> Iv {
    let mut iv = [0u8; 16];
    iv[..8].copy_from_slice(&publisher_id.to_le_bytes());
    iv[8..12].copy_from_slice(&key_epoch.to_le_bytes());
    iv[12..16].copy_from_slice(&((seq & 0xFFFF_FFFF) as u32).to_le_bytes());
    Iv(iv)
}

/// Seal a record for publication. The low 32 bits of `seq` ride in front
/// of the ciphertext so a receiver can rebuild the IV without tracking
/// the publisher's counter.
pub fn seal_message(key: &DataKey, publisher_id: u64, seq: u64, plaintext: &[u8]) -> Vec<u8> {
    let iv = derive_iv(publisher_id, key.key_id, seq);
    let seq_low = (seq & 0xFFFF_FFFF) as u32;
    let mut out = Vec::with_capacity(4 + plaintext.len());
    out.extend_from_slice(&seq_low.to_le_bytes());
    out.extend_from_slice(&seal_payload(key, &iv, plaintext));
    out
}

/// Inverse of [`seal_message`] given the header's publisher id.
pub fn open_message(key: &DataKey, publisher_id: u64, payload: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if payload.len() < 4 {
        return Err(CryptoError::MalformedSealedMessage);
    }
    let seq_low = u32::from_le_bytes(payload[..4].try_into().unwrap());
    let iv = derive_iv(publisher_id, key.key_id, seq_low as u64);
    Ok(open_payload(key, &iv, &payload[4..]))
}

fn wrap_subkeys(sk: &SessionKey) -> ([u8; 32], [u8; 32]) {
    let enc: [u8; 32] = Sha256::new()
        .chain_update(b"tierbus.wrap.enc")
        .chain_update(sk.as_bytes())
        .finalize()
        .into();
    let mac: [u8; 32] = Sha256::new()
        .chain_update(b"tierbus.wrap.mac")
        .chain_update(sk.as_bytes())
        .finalize()
        .into();
    (enc, mac)
}

/// Authenticated wrap of a data key under a session key
/// (encrypt-then-MAC; the tag covers epoch, IV, and ciphertext).
pub fn wrap_key(sk: &SessionKey, dk: &DataKey) -> KeyBundle {
    let (enc_key, mac_key) = wrap_subkeys(sk);
    let mut iv = [0u8; BUNDLE_IV_LEN];
    OsRng.fill_bytes(&mut iv);
    let mut ct = dk.secret;
    let mut cipher = Aes256Ctr::new(&enc_key.into(), &iv.into());
    cipher.apply_keystream(&mut ct);
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&mac_key).expect("hmac accepts 32-byte keys");
    mac.update(&dk.key_id.to_le_bytes());
    mac.update(&iv);
    mac.update(&ct);
    let tag = mac.finalize().into_bytes();
    let mut wrapped = Vec::with_capacity(BUNDLE_WRAPPED_LEN);
    wrapped.extend_from_slice(&iv);
    wrapped.extend_from_slice(&ct);
    wrapped.extend_from_slice(&tag);
    KeyBundle {
        key_id: dk.key_id,
        wrapped,
    }
}

/// Inverse of [`wrap_key`]. Fails on any modified byte or wrong session key.
pub fn unwrap_key(sk: &SessionKey, bundle: &KeyBundle) -> Result<DataKey, CryptoError> {
    if bundle.wrapped.len() != BUNDLE_WRAPPED_LEN {
        return Err(CryptoError::MalformedBundle);
    }
    let (enc_key, mac_key) = wrap_subkeys(sk);
    let iv = &bundle.wrapped[..BUNDLE_IV_LEN];
    let ct = &bundle.wrapped[BUNDLE_IV_LEN..BUNDLE_IV_LEN + BUNDLE_CT_LEN];
    let tag = &bundle.wrapped[BUNDLE_IV_LEN + BUNDLE_CT_LEN..];
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&mac_key).expect("hmac accepts 32-byte keys");
    mac.update(&bundle.key_id.to_le_bytes());
    mac.update(iv);
    mac.update(ct);
    mac.verify_slice(tag).map_err(|_| CryptoError::AuthFailure)?;
    let mut secret = [0u8; 32];
    secret.copy_from_slice(ct);
    let iv_arr: [u8; 16] = iv.try_into().unwrap();
    let mut cipher = Aes256Ctr::new(&enc_key.into(), &iv_arr.into());
    cipher.apply_keystream(&mut secret);
    Ok(DataKey {
        key_id: bundle.key_id,
        secret,
    })
}

/// SHA-256 of a code artifact's canonical bytes.
pub fn code_hash(artifact: &[u8]) -> CodeIdentity {
    CodeIdentity(Sha256::digest(artifact).into())
}
