//! Message model and wire framing shared by every process on the bus.
//!
//! The frame layout is fixed and bit-exact so that frames produced by any
//! component (or captured on the wire) compare byte-identical:
//!
//! ```text
//! magic 0x53 0x42 ("SB") | version u8 = 1 | topic_len u8 | topic bytes
//! | privacy u8 (0=High 1=Moderate 2=Low) | enc u8 (0=CounterMode 1=Plaintext)
//! | publisher_id u64 LE | key_epoch u32 LE | payload_len u32 LE | payload
//! ```
//!
//! All integers are little-endian, strings are length-prefixed. The privacy
//! level always travels in the routable header, never inside the (possibly
//! encrypted) payload.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FRAME_MAGIC: [u8; 2] = [0x53, 0x42];
pub const FRAME_VERSION: u8 = 1;
pub const MAX_TOPIC_LEN: usize = 64;
/// Upper bound on payload size; keeps a malformed length field from
/// driving an allocation.
pub const MAX_PAYLOAD_LEN: usize = 1 << 20;

/// Topics with platform-assigned meaning. Control-plane topics are
/// reserved; data publications may not use them.
pub const TOPIC_CTL: &str = "ctl";
pub const TOPIC_ATTEST: &str = "attest";
pub const TOPIC_AUTH: &str = "auth";
pub const TOPIC_METER: &str = "meter";
pub const TOPIC_AGG_METER: &str = "agg.meter";
pub const TOPIC_AGG_REGION: &str = "agg.region";

pub const RESERVED_TOPICS: [&str; 3] = [TOPIC_CTL, TOPIC_ATTEST, TOPIC_AUTH];

#[derive(Error, Debug)]
pub enum EnvelopeError {
    #[error("topic exceeds {MAX_TOPIC_LEN} bytes")]
    TopicTooLong,
    #[error("payload length {0} exceeds maximum {MAX_PAYLOAD_LEN}")]
    PayloadTooLarge(usize),
    #[error("plaintext encryption mode requires Low privacy")]
    PlaintextRequiresLow,
    #[error("frame truncated")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown privacy discriminant {0}")]
    UnknownPrivacy(u8),
    #[error("unknown encryption-mode discriminant {0}")]
    UnknownEncryptionMode(u8),
    #[error("unknown level-set bits {0:#04x}")]
    UnknownLevelBits(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("topic is not valid utf-8")]
    TopicNotUtf8,
    #[error("record checksum mismatch")]
    RecordChecksum,
    #[error("unknown record tag {0:#04x}")]
    UnknownRecordTag(u8),
    #[error("record truncated or oversized")]
    RecordLength,
    #[error("bad signature length")]
    BadSignatureLength,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// FIPS-199-style impact tier. `High` is the most sensitive; the order
/// `High > Moderate > Low` backs every authorization comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrivacyLevel {
    High,
    Moderate,
    Low,
}

impl PrivacyLevel {
    pub const ALL: [PrivacyLevel; 3] = [
        PrivacyLevel::High,
        PrivacyLevel::Moderate,
        PrivacyLevel::Low,
    ];

    pub fn wire(self) -> u8 {
        match self {
            PrivacyLevel::High => 0,
            PrivacyLevel::Moderate => 1,
            PrivacyLevel::Low => 2,
        }
    }

    pub fn from_wire(b: u8) -> Result<Self, EnvelopeError> {
        match b {
            0 => Ok(PrivacyLevel::High),
            1 => Ok(PrivacyLevel::Moderate),
            2 => Ok(PrivacyLevel::Low),
            other => Err(EnvelopeError::UnknownPrivacy(other)),
        }
    }

    fn sensitivity(self) -> u8 {
        match self {
            PrivacyLevel::High => 2,
            PrivacyLevel::Moderate => 1,
            PrivacyLevel::Low => 0,
        }
    }
}

impl Ord for PrivacyLevel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sensitivity().cmp(&other.sensitivity())
    }
}

impl PartialOrd for PrivacyLevel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for PrivacyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PrivacyLevel::High => "high",
            PrivacyLevel::Moderate => "moderate",
            PrivacyLevel::Low => "low",
        };
        f.write_str(s)
    }
}

impl FromStr for PrivacyLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(PrivacyLevel::High),
            "moderate" => Ok(PrivacyLevel::Moderate),
            "low" => Ok(PrivacyLevel::Low),
            other => Err(format!("unknown privacy level {other:?}")),
        }
    }
}

/// Set of privacy levels, stored as a bitmask keyed by wire discriminant.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LevelSet(u8);

impl LevelSet {
    pub const EMPTY: LevelSet = LevelSet(0);

    pub fn all() -> LevelSet {
        LevelSet::of(&PrivacyLevel::ALL)
    }

    pub fn of(levels: &[PrivacyLevel]) -> LevelSet {
        let mut set = LevelSet::EMPTY;
        for l in levels {
            set.insert(*l);
        }
        set
    }

    pub fn insert(&mut self, level: PrivacyLevel) {
        self.0 |= 1 << level.wire();
    }

    pub fn contains(&self, level: PrivacyLevel) -> bool {
        self.0 & (1 << level.wire()) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(&self, other: &LevelSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// True when the set grants nothing above Low. The empty set qualifies.
    pub fn at_most_low(&self) -> bool {
        self.0 & !(1 << PrivacyLevel::Low.wire()) == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = PrivacyLevel> + '_ {
        PrivacyLevel::ALL.iter().copied().filter(|l| self.contains(*l))
    }

    pub fn bits(&self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Result<LevelSet, EnvelopeError> {
        if bits & !0b111 != 0 {
            return Err(EnvelopeError::UnknownLevelBits(bits));
        }
        Ok(LevelSet(bits))
    }
}

impl fmt::Debug for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<PrivacyLevel> for LevelSet {
    fn from_iter<I: IntoIterator<Item = PrivacyLevel>>(iter: I) -> Self {
        let mut set = LevelSet::EMPTY;
        for l in iter {
            set.insert(l);
        }
        set
    }
}

/// How the payload bytes are protected. Plaintext is only legal at the
/// Low tier; the `MessageHeader` constructor enforces that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncryptionMode {
    CounterMode,
    Plaintext,
}

impl EncryptionMode {
    pub fn wire(self) -> u8 {
        match self {
            EncryptionMode::CounterMode => 0,
            EncryptionMode::Plaintext => 1,
        }
    }

    pub fn from_wire(b: u8) -> Result<Self, EnvelopeError> {
        match b {
            0 => Ok(EncryptionMode::CounterMode),
            1 => Ok(EncryptionMode::Plaintext),
            other => Err(EnvelopeError::UnknownEncryptionMode(other)),
        }
    }
}

impl fmt::Display for EncryptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EncryptionMode::CounterMode => "ctr",
            EncryptionMode::Plaintext => "plain",
        };
        f.write_str(s)
    }
}

/// Topic string, at most [`MAX_TOPIC_LEN`] bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Topic(String);

impl Topic {
    pub fn new(s: impl Into<String>) -> Result<Topic, EnvelopeError> {
        let s = s.into();
        if s.len() > MAX_TOPIC_LEN {
            return Err(EnvelopeError::TopicTooLong);
        }
        Ok(Topic(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Subscription topic predicate: exact match or the single wildcard `*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TopicFilter {
    Any,
    Exact(Topic),
}

impl TopicFilter {
    pub fn parse(s: &str) -> Result<TopicFilter, EnvelopeError> {
        if s == "*" {
            Ok(TopicFilter::Any)
        } else {
            Ok(TopicFilter::Exact(Topic::new(s)?))
        }
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        match self {
            TopicFilter::Any => true,
            TopicFilter::Exact(t) => t == topic,
        }
    }

    pub fn as_wire_str(&self) -> &str {
        match self {
            TopicFilter::Any => "*",
            TopicFilter::Exact(t) => t.as_str(),
        }
    }
}

/// One raw meter reading. Values are integer milliwatts so serialization
/// is exact across processes; `seq` strictly increases per meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub meter_id: u64,
    pub timestamp_ms: u64,
    pub value_mw: u64,
    pub seq: u64,
}

pub const RECORD_TAG_MEASUREMENT: u8 = b'M';
pub const RECORD_TAG_AGGREGATE: u8 = b'A';
/// tag + 4 u64 fields + 4-byte checksum
pub const MEASUREMENT_WIRE_LEN: usize = 1 + 32 + 4;

/// Truncated SHA-256 over the record body. Counter-mode sealing has no
/// built-in integrity, so the record decoder is where tampering surfaces.
pub(crate) fn record_checksum(body: &[u8]) -> [u8; 4] {
    let digest = Sha256::digest(body);
    [digest[0], digest[1], digest[2], digest[3]]
}

impl Measurement {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MEASUREMENT_WIRE_LEN);
        out.push(RECORD_TAG_MEASUREMENT);
        out.extend_from_slice(&self.meter_id.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&self.value_mw.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        let check = record_checksum(&out);
        out.extend_from_slice(&check);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Measurement, EnvelopeError> {
        if bytes.len() != MEASUREMENT_WIRE_LEN {
            return Err(EnvelopeError::RecordLength);
        }
        if bytes[0] != RECORD_TAG_MEASUREMENT {
            return Err(EnvelopeError::UnknownRecordTag(bytes[0]));
        }
        let body = &bytes[..MEASUREMENT_WIRE_LEN - 4];
        if record_checksum(body) != bytes[MEASUREMENT_WIRE_LEN - 4..] {
            return Err(EnvelopeError::RecordChecksum);
        }
        Ok(Measurement {
            meter_id: u64::from_le_bytes(bytes[1..9].try_into().unwrap()),
            timestamp_ms: u64::from_le_bytes(bytes[9..17].try_into().unwrap()),
            value_mw: u64::from_le_bytes(bytes[17..25].try_into().unwrap()),
            seq: u64::from_le_bytes(bytes[25..33].try_into().unwrap()),
        })
    }
}

/// Routable frame header. The sensitivity tier lives here, in the clear,
/// so the broker can match without touching the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    topic: Topic,
    privacy: PrivacyLevel,
    enc: EncryptionMode,
    publisher_id: u64,
    key_epoch: u32,
    payload_len: u32,
}

impl MessageHeader {
    pub fn new(
        topic: Topic,
        privacy: PrivacyLevel,
        enc: EncryptionMode,
        publisher_id: u64,
        key_epoch: u32,
        payload_len: u32,
    ) -> Result<MessageHeader, EnvelopeError> {
        if enc == EncryptionMode::Plaintext && privacy != PrivacyLevel::Low {
            return Err(EnvelopeError::PlaintextRequiresLow);
        }
        if payload_len as usize > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLarge(payload_len as usize));
        }
        Ok(MessageHeader {
            topic,
            privacy,
            enc,
            publisher_id,
            key_epoch,
            payload_len,
        })
    }

    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    pub fn privacy(&self) -> PrivacyLevel {
        self.privacy
    }

    pub fn enc(&self) -> EncryptionMode {
        self.enc
    }

    pub fn publisher_id(&self) -> u64 {
        self.publisher_id
    }

    pub fn key_epoch(&self) -> u32 {
        self.key_epoch
    }

    pub fn payload_len(&self) -> u32 {
        self.payload_len
    }

    pub fn encoded_len(&self) -> usize {
        2 + 1 + 1 + self.topic.as_str().len() + 1 + 1 + 8 + 4 + 4
    }

    /// Header bytes exactly as they appear on the wire.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(FRAME_VERSION);
        let topic = self.topic.as_str().as_bytes();
        out.push(topic.len() as u8);
        out.extend_from_slice(topic);
        out.push(self.privacy.wire());
        out.push(self.enc.wire());
        out.extend_from_slice(&self.publisher_id.to_le_bytes());
        out.extend_from_slice(&self.key_epoch.to_le_bytes());
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        out
    }
}

/// The unit routed by the broker: header plus payload bytes.
///
/// With `CounterMode` the payload is sealed record bytes; with
/// `Plaintext` it is the plain record serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publication {
    header: MessageHeader,
    payload: Vec<u8>,
}

impl Publication {
    pub fn new(
        topic: Topic,
        privacy: PrivacyLevel,
        enc: EncryptionMode,
        publisher_id: u64,
        key_epoch: u32,
        payload: Vec<u8>,
    ) -> Result<Publication, EnvelopeError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLarge(payload.len()));
        }
        let header = MessageHeader::new(
            topic,
            privacy,
            enc,
            publisher_id,
            key_epoch,
            payload.len() as u32,
        )?;
        Ok(Publication { header, payload })
    }

    pub fn from_parts(header: MessageHeader, payload: Vec<u8>) -> Result<Publication, EnvelopeError> {
        if header.payload_len as usize != payload.len() {
            return Err(EnvelopeError::RecordLength);
        }
        Ok(Publication { header, payload })
    }

    pub fn header(&self) -> &MessageHeader {
        &self.header
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }
}

/// Serialize a publication into a self-delimiting frame.
pub fn encode_publication(p: &Publication) -> Vec<u8> {
    let mut out = p.header.encode();
    out.extend_from_slice(&p.payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvelopeError> {
        if self.pos + n > self.buf.len() {
            return Err(EnvelopeError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EnvelopeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, EnvelopeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EnvelopeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Inverse of [`encode_publication`]. Rejects trailing garbage.
pub fn decode_publication(bytes: &[u8]) -> Result<Publication, EnvelopeError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let p = decode_from_cursor(&mut c)?;
    if c.pos != bytes.len() {
        return Err(EnvelopeError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(p)
}

fn decode_from_cursor(c: &mut Cursor<'_>) -> Result<Publication, EnvelopeError> {
    let magic = c.take(2)?;
    if magic != FRAME_MAGIC {
        return Err(EnvelopeError::BadMagic);
    }
    let version = c.u8()?;
    if version != FRAME_VERSION {
        return Err(EnvelopeError::BadVersion(version));
    }
    let topic_len = c.u8()? as usize;
    if topic_len > MAX_TOPIC_LEN {
        return Err(EnvelopeError::TopicTooLong);
    }
    let topic_bytes = c.take(topic_len)?;
    let topic = std::str::from_utf8(topic_bytes).map_err(|_| EnvelopeError::TopicNotUtf8)?;
    let privacy = PrivacyLevel::from_wire(c.u8()?)?;
    let enc = EncryptionMode::from_wire(c.u8()?)?;
    let publisher_id = c.u64()?;
    let key_epoch = c.u32()?;
    let payload_len = c.u32()? as usize;
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(EnvelopeError::PayloadTooLarge(payload_len));
    }
    let payload = c.take(payload_len)?.to_vec();
    let header = MessageHeader::new(
        Topic::new(topic)?,
        privacy,
        enc,
        publisher_id,
        key_epoch,
        payload_len as u32,
    )?;
    Ok(Publication { header, payload })
}

/// Read one frame from a stream. An EOF before the first byte surfaces as
/// `Io(UnexpectedEof)`; callers treat that as a clean close.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Publication, EnvelopeError> {
    let mut prelude = [0u8; 4];
    r.read_exact(&mut prelude)?;
    if prelude[..2] != FRAME_MAGIC {
        return Err(EnvelopeError::BadMagic);
    }
    if prelude[2] != FRAME_VERSION {
        return Err(EnvelopeError::BadVersion(prelude[2]));
    }
    let topic_len = prelude[3] as usize;
    if topic_len > MAX_TOPIC_LEN {
        return Err(EnvelopeError::TopicTooLong);
    }
    // topic + privacy + enc + publisher_id + key_epoch + payload_len
    let mut rest = vec![0u8; topic_len + 1 + 1 + 8 + 4 + 4];
    r.read_exact(&mut rest)?;
    let mut c = Cursor { buf: &rest, pos: 0 };
    let topic_bytes = c.take(topic_len)?;
    let topic = std::str::from_utf8(topic_bytes).map_err(|_| EnvelopeError::TopicNotUtf8)?;
    let topic = Topic::new(topic)?;
    let privacy = PrivacyLevel::from_wire(c.u8()?)?;
    let enc = EncryptionMode::from_wire(c.u8()?)?;
    let publisher_id = c.u64()?;
    let key_epoch = c.u32()?;
    let payload_len = c.u32()? as usize;
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(EnvelopeError::PayloadTooLarge(payload_len));
    }
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload)?;
    let header = MessageHeader::new(topic, privacy, enc, publisher_id, key_epoch, payload_len as u32)?;
    Ok(Publication { header, payload })
}

pub fn write_frame<W: Write>(w: &mut W, p: &Publication) -> io::Result<()> {
    w.write_all(&encode_publication(p))
}

/// Incremental frame reader for sockets with read timeouts.
///
/// A timeout mid-frame must not lose the bytes already read, so partial
/// input accumulates here until a whole frame is available. Bulk reads
/// also mean one syscall can yield many frames.
pub struct FrameReader<R: Read> {
    inner: R,
    buf: Vec<u8>,
    pos: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> FrameReader<R> {
        FrameReader {
            inner,
            buf: Vec::with_capacity(1 << 16),
            pos: 0,
        }
    }

    /// `Ok(Some)` on a complete frame; `Ok(None)` when the inner reader
    /// would block before one is complete (partial input is kept); `Err`
    /// on end of stream or a protocol violation.
    pub fn poll_frame(&mut self) -> Result<Option<Publication>, EnvelopeError> {
        loop {
            if let Some((publication, consumed)) = try_parse_frame(&self.buf[self.pos..])? {
                self.pos += consumed;
                if self.pos >= (1 << 16) {
                    self.buf.drain(..self.pos);
                    self.pos = 0;
                }
                return Ok(Some(publication));
            }
            let mut chunk = [0u8; 1 << 14];
            match self.inner.read(&mut chunk) {
                Ok(0) => {
                    return Err(EnvelopeError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        if self.pos < self.buf.len() {
                            "stream closed mid-frame"
                        } else {
                            "stream closed"
                        },
                    )));
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                {
                    return Ok(None);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(EnvelopeError::Io(e)),
            }
        }
    }
}

/// Parse one frame from the front of `buf`. `Ok(None)` means more bytes
/// are needed; errors are hard protocol violations.
fn try_parse_frame(buf: &[u8]) -> Result<Option<(Publication, usize)>, EnvelopeError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    if buf[..2] != FRAME_MAGIC {
        return Err(EnvelopeError::BadMagic);
    }
    if buf[2] != FRAME_VERSION {
        return Err(EnvelopeError::BadVersion(buf[2]));
    }
    let topic_len = buf[3] as usize;
    if topic_len > MAX_TOPIC_LEN {
        return Err(EnvelopeError::TopicTooLong);
    }
    let header_len = 4 + topic_len + 1 + 1 + 8 + 4 + 4;
    if buf.len() < header_len {
        return Ok(None);
    }
    let payload_len = u32::from_le_bytes(buf[header_len - 4..header_len].try_into().unwrap()) as usize;
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(EnvelopeError::PayloadTooLarge(payload_len));
    }
    let total = header_len + payload_len;
    if buf.len() < total {
        return Ok(None);
    }
    let publication = decode_publication(&buf[..total])?;
    Ok(Some((publication, total)))
}

/// Publisher-authorized routing predicate bound to one subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub subscriber_id: u64,
    pub publisher_id: u64,
    pub topic_filter: TopicFilter,
    pub levels: LevelSet,
    /// ed25519 signature by the publisher over [`Subscription::signing_bytes`].
    pub authorization: [u8; 64],
}

const SUBSCRIPTION_DOMAIN_TAG: &[u8] = b"tierbus.sub.v1";

impl Subscription {
    /// Canonical bytes the publisher signs: domain tag, ids, filter, levels.
    pub fn signing_bytes(
        subscriber_id: u64,
        publisher_id: u64,
        topic_filter: &TopicFilter,
        levels: LevelSet,
    ) -> Vec<u8> {
        let filter = topic_filter.as_wire_str().as_bytes();
        let mut out = Vec::with_capacity(SUBSCRIPTION_DOMAIN_TAG.len() + 18 + filter.len());
        out.extend_from_slice(SUBSCRIPTION_DOMAIN_TAG);
        out.extend_from_slice(&subscriber_id.to_le_bytes());
        out.extend_from_slice(&publisher_id.to_le_bytes());
        out.push(filter.len() as u8);
        out.extend_from_slice(filter);
        out.push(levels.bits());
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let filter = self.topic_filter.as_wire_str().as_bytes();
        let mut out = Vec::with_capacity(18 + filter.len() + 64);
        out.extend_from_slice(&self.subscriber_id.to_le_bytes());
        out.extend_from_slice(&self.publisher_id.to_le_bytes());
        out.push(filter.len() as u8);
        out.extend_from_slice(filter);
        out.push(self.levels.bits());
        out.extend_from_slice(&self.authorization);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Subscription, EnvelopeError> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        let subscriber_id = c.u64()?;
        let publisher_id = c.u64()?;
        let filter_len = c.u8()? as usize;
        if filter_len > MAX_TOPIC_LEN {
            return Err(EnvelopeError::TopicTooLong);
        }
        let filter_bytes = c.take(filter_len)?;
        let filter = std::str::from_utf8(filter_bytes).map_err(|_| EnvelopeError::TopicNotUtf8)?;
        let topic_filter = TopicFilter::parse(filter)?;
        let levels = LevelSet::from_bits(c.u8()?)?;
        let sig = c.take(64)?;
        if c.pos != bytes.len() {
            return Err(EnvelopeError::TrailingBytes(bytes.len() - c.pos));
        }
        let mut authorization = [0u8; 64];
        authorization.copy_from_slice(sig);
        Ok(Subscription {
            subscriber_id,
            publisher_id,
            topic_filter,
            levels,
            authorization,
        })
    }

    /// Identity for idempotent resubmission: everything but the signature.
    pub fn dedup_key(&self) -> (u64, u64, String, u8) {
        (
            self.subscriber_id,
            self.publisher_id,
            self.topic_filter.as_wire_str().to_string(),
            self.levels.bits(),
        )
    }
}

/// The content-based routing predicate. Total function, no side effects:
/// publisher must match, topic must pass the filter, and the header's
/// privacy level must be one the subscription was authorized for.
pub fn match_header(h: &MessageHeader, s: &Subscription) -> bool {
    h.publisher_id == s.publisher_id
        && s.topic_filter.matches(&h.topic)
        && s.levels.contains(h.privacy)
}
