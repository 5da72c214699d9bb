//! Windowed aggregation that lowers data sensitivity.
//!
//! Raw High-tier measurements are folded into per-meter and regional
//! window averages. Per-meter averages republish at Moderate
//! (encrypted, for the utility); regional averages at Low (plaintext,
//! public). Sums and counts are exact integers with floor division for
//! the mean, so conservation checks hold with zero tolerance.

mod service;

pub use service::{AggregatorService, AggregatorServiceConfig};

use std::collections::BTreeMap;
use std::collections::HashMap;

use thiserror::Error;

use crate::crypto::{seal_message, DataKey};
use crate::envelope::{
    record_checksum, EncryptionMode, EnvelopeError, Measurement, PrivacyLevel, Publication, Topic,
    RECORD_TAG_AGGREGATE, TOPIC_AGG_METER, TOPIC_AGG_REGION,
};

#[derive(Error, Debug)]
pub enum AggregatorError {
    #[error("window duration must be at least 1 ms")]
    ZeroDuration,
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

/// Epoch-aligned aggregation window: `start_ms` is a multiple of
/// `duration_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub start_ms: u64,
    pub duration_ms: u64,
}

impl Window {
    /// Window containing `timestamp_ms`.
    pub fn containing(timestamp_ms: u64, duration_ms: u64) -> Window {
        Window {
            start_ms: timestamp_ms - timestamp_ms % duration_ms,
            duration_ms,
        }
    }

    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    PerMeter(u64),
    Regional(u64),
}

/// One emitted aggregate: exact sum and count, mean as floor(sum/count).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateRecord {
    pub window: Window,
    pub scope: Scope,
    pub sum_mw: u128,
    pub count: u64,
    pub mean_mw: u64,
}

// tag + start + duration + scope tag + scope id + sum(16) + count + mean + check
pub const AGGREGATE_WIRE_LEN: usize = 1 + 8 + 8 + 1 + 8 + 16 + 8 + 8 + 4;

impl AggregateRecord {
    fn new(window: Window, scope: Scope, sum_mw: u128, count: u64) -> AggregateRecord {
        debug_assert!(count >= 1, "records are only emitted for populated scopes");
        AggregateRecord {
            window,
            scope,
            sum_mw,
            count,
            mean_mw: (sum_mw / count as u128) as u64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(AGGREGATE_WIRE_LEN);
        out.push(RECORD_TAG_AGGREGATE);
        out.extend_from_slice(&self.window.start_ms.to_le_bytes());
        out.extend_from_slice(&self.window.duration_ms.to_le_bytes());
        match self.scope {
            Scope::PerMeter(id) => {
                out.push(0);
                out.extend_from_slice(&id.to_le_bytes());
            }
            Scope::Regional(id) => {
                out.push(1);
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.sum_mw.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.mean_mw.to_le_bytes());
        let check = record_checksum(&out);
        out.extend_from_slice(&check);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<AggregateRecord, EnvelopeError> {
        if bytes.len() != AGGREGATE_WIRE_LEN {
            return Err(EnvelopeError::RecordLength);
        }
        if bytes[0] != RECORD_TAG_AGGREGATE {
            return Err(EnvelopeError::UnknownRecordTag(bytes[0]));
        }
        let body = &bytes[..AGGREGATE_WIRE_LEN - 4];
        if record_checksum(body) != bytes[AGGREGATE_WIRE_LEN - 4..] {
            return Err(EnvelopeError::RecordChecksum);
        }
        let start_ms = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let duration_ms = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let scope_id = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let scope = match bytes[17] {
            0 => Scope::PerMeter(scope_id),
            1 => Scope::Regional(scope_id),
            other => return Err(EnvelopeError::UnknownRecordTag(other)),
        };
        Ok(AggregateRecord {
            window: Window {
                start_ms,
                duration_ms,
            },
            scope,
            sum_mw: u128::from_le_bytes(bytes[26..42].try_into().unwrap()),
            count: u64::from_le_bytes(bytes[42..50].try_into().unwrap()),
            mean_mw: u64::from_le_bytes(bytes[50..58].try_into().unwrap()),
        })
    }
}

#[derive(Default)]
struct WindowState {
    // meter -> (sum, count); regional totals are derived at close
    per_meter: BTreeMap<u64, (u128, u64)>,
}

/// Single-threaded aggregation state machine. Feed decrypted
/// measurements through [`ingest`](AggregatorCore::ingest); drive window
/// closes with [`close_due`](AggregatorCore::close_due) from whatever
/// clock the caller trusts.
pub struct AggregatorCore {
    window_ms: u64,
    grace_ms: u64,
    /// meter -> region; unmapped meters fall into region 0.
    regions: HashMap<u64, u64>,
    open: BTreeMap<u64, WindowState>,
    /// Measurements older than this are dropped and counted; advances to
    /// each closed window's end.
    watermark_ms: u64,
    late_count: u64,
}

impl AggregatorCore {
    pub fn new(
        window_ms: u64,
        grace_ms: u64,
        regions: HashMap<u64, u64>,
    ) -> Result<AggregatorCore, AggregatorError> {
        if window_ms == 0 {
            return Err(AggregatorError::ZeroDuration);
        }
        Ok(AggregatorCore {
            window_ms,
            grace_ms,
            regions,
            open: BTreeMap::new(),
            watermark_ms: 0,
            late_count: 0,
        })
    }

    pub fn window_ms(&self) -> u64 {
        self.window_ms
    }

    pub fn late_count(&self) -> u64 {
        self.late_count
    }

    pub fn region_of(&self, meter_id: u64) -> u64 {
        self.regions.get(&meter_id).copied().unwrap_or(0)
    }

    /// Add one measurement to its window. Late data (behind the
    /// watermark) is dropped and counted, never an error.
    pub fn ingest(&mut self, m: &Measurement) {
        if m.timestamp_ms < self.watermark_ms {
            self.late_count += 1;
            return;
        }
        let window = Window::containing(m.timestamp_ms, self.window_ms);
        let state = self.open.entry(window.start_ms).or_default();
        let entry = state.per_meter.entry(m.meter_id).or_insert((0, 0));
        entry.0 += m.value_mw as u128;
        entry.1 += 1;
    }

    /// Close every window whose end + grace has passed, oldest first.
    pub fn close_due(&mut self, now_ms: u64) -> Vec<AggregateRecord> {
        let due: Vec<u64> = self
            .open
            .keys()
            .copied()
            .filter(|start| start + self.window_ms + self.grace_ms <= now_ms)
            .collect();
        let mut out = Vec::new();
        for start in due {
            out.extend(self.close_window_at(start));
        }
        out
    }

    /// Close one window unconditionally. Closing twice emits once: the
    /// state is consumed and the watermark advances past the window.
    pub fn close_window_at(&mut self, start_ms: u64) -> Vec<AggregateRecord> {
        let Some(state) = self.open.remove(&start_ms) else {
            return Vec::new();
        };
        let window = Window {
            start_ms,
            duration_ms: self.window_ms,
        };
        self.watermark_ms = self.watermark_ms.max(window.end_ms());

        let mut records = Vec::with_capacity(state.per_meter.len() + 1);
        // regional totals are sums over member measurements, not means of means
        let mut regional: BTreeMap<u64, (u128, u64)> = BTreeMap::new();
        for (meter, (sum, count)) in &state.per_meter {
            records.push(AggregateRecord::new(
                window,
                Scope::PerMeter(*meter),
                *sum,
                *count,
            ));
            let r = regional.entry(self.region_of(*meter)).or_insert((0, 0));
            r.0 += *sum;
            r.1 += *count;
        }
        for (region, (sum, count)) in regional {
            records.push(AggregateRecord::new(
                window,
                Scope::Regional(region),
                sum,
                count,
            ));
        }
        records
    }

    /// Starts of windows currently holding data.
    pub fn open_windows(&self) -> Vec<u64> {
        self.open.keys().copied().collect()
    }
}

/// Turn an aggregate into its publication: per-meter records go out
/// encrypted at Moderate, regional records in plaintext at Low. The
/// aggregator publishes under its own identity and key.
pub fn republish(
    record: &AggregateRecord,
    publisher_id: u64,
    key: &DataKey,
    seq: u64,
) -> Result<Publication, AggregatorError> {
    let body = record.encode();
    let publication = match record.scope {
        Scope::PerMeter(_) => Publication::new(
            Topic::new(TOPIC_AGG_METER)?,
            PrivacyLevel::Moderate,
            EncryptionMode::CounterMode,
            publisher_id,
            key.key_id(),
            seal_message(key, publisher_id, seq, &body),
        )?,
        Scope::Regional(_) => Publication::new(
            Topic::new(TOPIC_AGG_REGION)?,
            PrivacyLevel::Low,
            EncryptionMode::Plaintext,
            publisher_id,
            0,
            body,
        )?,
    };
    Ok(publication)
}

/// Audit row used by the aggregator's CSV log, one per emitted record.
pub fn audit_csv_row(r: &AggregateRecord) -> String {
    let (scope_kind, scope_id) = match r.scope {
        Scope::PerMeter(id) => ("meter", id),
        Scope::Regional(id) => ("region", id),
    };
    format!(
        "{},{},{},{},{},{},{}",
        r.window.start_ms, r.window.duration_ms, scope_kind, scope_id, r.sum_mw, r.count, r.mean_mw
    )
}

pub const AUDIT_CSV_HEADER: &str = "window_start_ms,window_ms,scope,scope_id,sum_mw,count,mean_mw";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::open_message;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(meter_id: u64, timestamp_ms: u64, value_mw: u64) -> Measurement {
        Measurement {
            meter_id,
            timestamp_ms,
            value_mw,
            seq: 0,
        }
    }

    fn core(window_ms: u64) -> AggregatorCore {
        let regions = HashMap::from([(1, 10), (2, 10), (3, 20)]);
        AggregatorCore::new(window_ms, 2000, regions).unwrap()
    }

    #[test]
    fn single_measurement_single_record() {
        let mut c = core(1000);
        c.ingest(&m(1, 500, 4200));
        let records = c.close_window_at(0);
        assert_eq!(records.len(), 2); // per-meter + its region
        assert_eq!(
            records[0],
            AggregateRecord {
                window: Window { start_ms: 0, duration_ms: 1000 },
                scope: Scope::PerMeter(1),
                sum_mw: 4200,
                count: 1,
                mean_mw: 4200,
            }
        );
        assert_eq!(records[1].scope, Scope::Regional(10));
        assert_eq!(records[1].mean_mw, 4200);
    }

    #[test]
    fn mean_is_floor_of_exact_sum() {
        let mut c = core(1000);
        c.ingest(&m(1, 0, 1000));
        c.ingest(&m(1, 10, 2000));
        c.ingest(&m(1, 20, 3000));
        let records = c.close_window_at(0);
        assert_eq!(records[0].sum_mw, 6000);
        assert_eq!(records[0].count, 3);
        assert_eq!(records[0].mean_mw, 2000);

        let mut c = core(1000);
        c.ingest(&m(1, 0, 1));
        c.ingest(&m(1, 10, 2));
        let records = c.close_window_at(0);
        assert_eq!(records[0].mean_mw, 1); // floor(3/2)
    }

    #[test]
    fn regional_mean_over_members_not_mean_of_means() {
        // meters 1: {1000, 3000}, 2: {2000}; same region
        let mut c = core(1000);
        c.ingest(&m(1, 0, 1000));
        c.ingest(&m(1, 10, 3000));
        c.ingest(&m(2, 20, 2000));
        let records = c.close_window_at(0);
        let per_meter: Vec<&AggregateRecord> = records
            .iter()
            .filter(|r| matches!(r.scope, Scope::PerMeter(_)))
            .collect();
        assert_eq!(per_meter.len(), 2);
        assert_eq!(per_meter[0].mean_mw, 2000);
        assert_eq!(per_meter[1].mean_mw, 2000);
        let regional: Vec<&AggregateRecord> = records
            .iter()
            .filter(|r| matches!(r.scope, Scope::Regional(_)))
            .collect();
        assert_eq!(regional.len(), 1);
        assert_eq!(regional[0].sum_mw, 6000);
        assert_eq!(regional[0].count, 3);
        assert_eq!(regional[0].mean_mw, 2000);
    }

    #[test]
    fn empty_window_emits_nothing() {
        let mut c = core(1000);
        assert!(c.close_window_at(0).is_empty());
        assert!(c.close_due(1_000_000).is_empty());
    }

    #[test]
    fn late_measurement_counted_not_aggregated() {
        let mut c = core(1000);
        c.ingest(&m(1, 500, 100));
        let _ = c.close_window_at(0); // watermark -> 1000
        c.ingest(&m(1, 999, 9999)); // behind the watermark
        assert_eq!(c.late_count(), 1);
        c.ingest(&m(1, 1500, 200));
        let records = c.close_window_at(1000);
        assert_eq!(records[0].sum_mw, 200);
        assert_eq!(records[0].count, 1);
    }

    #[test]
    fn idempotent_close() {
        let mut c = core(1000);
        c.ingest(&m(1, 100, 5));
        assert_eq!(c.close_window_at(0).len(), 2);
        assert!(c.close_window_at(0).is_empty());
    }

    #[test]
    fn close_due_respects_grace() {
        let mut c = core(1000);
        c.ingest(&m(1, 100, 5));
        assert!(c.close_due(2999).is_empty()); // end (1000) + grace (2000) not reached
        assert_eq!(c.close_due(3000).len(), 2);
    }

    #[test]
    fn conservation_against_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let regions: HashMap<u64, u64> = (0..12).map(|meter| (meter, meter % 3)).collect();
        let mut c = AggregatorCore::new(1000, 0, regions.clone()).unwrap();
        let mut raw: Vec<Measurement> = Vec::new();
        for _ in 0..10_000 {
            let measurement = m(
                rng.gen_range(0..12),
                rng.gen_range(0..10_000),
                rng.gen_range(0..1_000_000),
            );
            raw.push(measurement);
            c.ingest(&measurement);
        }
        let mut records = Vec::new();
        for start in c.open_windows() {
            records.extend(c.close_window_at(start));
        }
        // oracle: recompute every record from the raw log
        for r in &records {
            let in_window = |mm: &&Measurement| {
                mm.timestamp_ms >= r.window.start_ms && mm.timestamp_ms < r.window.end_ms()
            };
            let (sum, count): (u128, u64) = match r.scope {
                Scope::PerMeter(meter) => raw
                    .iter()
                    .filter(in_window)
                    .filter(|mm| mm.meter_id == meter)
                    .fold((0, 0), |acc, mm| (acc.0 + mm.value_mw as u128, acc.1 + 1)),
                Scope::Regional(region) => raw
                    .iter()
                    .filter(in_window)
                    .filter(|mm| regions.get(&mm.meter_id).copied().unwrap_or(0) == region)
                    .fold((0, 0), |acc, mm| (acc.0 + mm.value_mw as u128, acc.1 + 1)),
            };
            assert_eq!((r.sum_mw, r.count), (sum, count), "{r:?}");
            assert_eq!(r.mean_mw, (sum / count as u128) as u64);
        }
        // per window: sum of per-meter sums equals sum of regional sums
        let mut windows: BTreeMap<u64, (u128, u128, u64, u64)> = BTreeMap::new();
        for r in &records {
            let w = windows.entry(r.window.start_ms).or_insert((0, 0, 0, 0));
            match r.scope {
                Scope::PerMeter(_) => {
                    w.0 += r.sum_mw;
                    w.2 += r.count;
                }
                Scope::Regional(_) => {
                    w.1 += r.sum_mw;
                    w.3 += r.count;
                }
            }
        }
        for (start, (meter_sum, regional_sum, meter_count, regional_count)) in windows {
            assert_eq!(meter_sum, regional_sum, "window {start}");
            assert_eq!(meter_count, regional_count, "window {start}");
        }
    }

    #[test]
    fn record_encode_round_trip_and_tamper() {
        let r = AggregateRecord {
            window: Window {
                start_ms: 3_600_000,
                duration_ms: 3_600_000,
            },
            scope: Scope::Regional(20),
            sum_mw: u128::from(u64::MAX) * 3,
            count: 3,
            mean_mw: u64::MAX,
        };
        let enc = r.encode();
        assert_eq!(enc.len(), AGGREGATE_WIRE_LEN);
        assert_eq!(AggregateRecord::decode(&enc).unwrap(), r);
        for byte in 0..enc.len() {
            let mut t = enc.clone();
            t[byte] ^= 0x01;
            assert!(AggregateRecord::decode(&t).is_err(), "byte {byte}");
        }
    }

    #[test]
    fn republish_tiers_and_round_trip() {
        let record = AggregateRecord {
            window: Window {
                start_ms: 0,
                duration_ms: 1000,
            },
            scope: Scope::PerMeter(1),
            sum_mw: 10,
            count: 2,
            mean_mw: 5,
        };
        let key = DataKey::generate(4);
        let p = republish(&record, 900, &key, 17).unwrap();
        assert_eq!(p.header().privacy(), PrivacyLevel::Moderate);
        assert_eq!(p.header().enc(), EncryptionMode::CounterMode);
        assert_eq!(p.header().topic().as_str(), TOPIC_AGG_METER);
        assert_eq!(p.header().key_epoch(), 4);
        let opened = open_message(&key, 900, p.payload()).unwrap();
        assert_eq!(AggregateRecord::decode(&opened).unwrap(), record);

        let regional = AggregateRecord {
            scope: Scope::Regional(10),
            ..record
        };
        let p = republish(&regional, 900, &key, 18).unwrap();
        assert_eq!(p.header().privacy(), PrivacyLevel::Low);
        assert_eq!(p.header().enc(), EncryptionMode::Plaintext);
        assert_eq!(p.header().topic().as_str(), TOPIC_AGG_REGION);
        // decodable without any key
        assert_eq!(AggregateRecord::decode(p.payload()).unwrap(), regional);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(matches!(
            AggregatorCore::new(0, 0, HashMap::new()),
            Err(AggregatorError::ZeroDuration)
        ));
    }
}
