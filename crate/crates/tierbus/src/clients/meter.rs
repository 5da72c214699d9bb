//! Smart-meter simulator: regular processes standing in for metering
//! hardware, generating readings at a configured rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClientError;
use crate::envelope::Measurement;

#[derive(Debug, Clone)]
pub enum ValueModel {
    /// Every reading is the same value (milliwatts).
    Constant(u64),
    /// Seeded random walk; replays identically for the same seed.
    RandomWalk { seed: u64, step: u64 },
}

#[derive(Debug, Clone)]
pub struct MeterConfig {
    pub meter_id: u64,
    /// Publications per second; fractional rates allowed.
    pub rate_hz: f64,
    pub value_model: ValueModel,
}

const WALK_START_MW: u64 = 1_000_000;

/// Deterministic reading source. `tick` hands out the next measurement;
/// pacing is the caller's job (see [`MeterConfig::period`]).
pub struct MeterSim {
    cfg: MeterConfig,
    seq: u64,
    value: u64,
    rng: ChaCha8Rng,
}

impl MeterConfig {
    pub fn period(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(1.0 / self.rate_hz)
    }
}

impl MeterSim {
    pub fn new(cfg: MeterConfig) -> Result<MeterSim, ClientError> {
        if !(cfg.rate_hz > 0.0) {
            return Err(ClientError::Config(format!(
                "meter rate must be positive, got {}",
                cfg.rate_hz
            )));
        }
        let (value, rng) = match cfg.value_model {
            ValueModel::Constant(v) => (v, ChaCha8Rng::seed_from_u64(0)),
            ValueModel::RandomWalk { seed, .. } => {
                (WALK_START_MW, ChaCha8Rng::seed_from_u64(seed))
            }
        };
        Ok(MeterSim {
            cfg,
            seq: 0,
            value,
            rng,
        })
    }

    pub fn meter_id(&self) -> u64 {
        self.cfg.meter_id
    }

    /// Next measurement, stamped with `now_ms`. `seq` strictly increases.
    pub fn tick(&mut self, now_ms: u64) -> Measurement {
        match self.cfg.value_model {
            ValueModel::Constant(v) => self.value = v,
            ValueModel::RandomWalk { step, .. } => {
                let delta = self.rng.gen_range(0..=step);
                if self.rng.gen_bool(0.5) {
                    self.value = self.value.saturating_add(delta);
                } else {
                    self.value = self.value.saturating_sub(delta);
                }
            }
        }
        let m = Measurement {
            meter_id: self.cfg.meter_id,
            timestamp_ms: now_ms,
            value_mw: self.value,
            seq: self.seq,
        };
        self.seq += 1;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sys::unix_millis;
    use std::time::Instant;

    #[test]
    fn constant_model_repeats_value() {
        let mut sim = MeterSim::new(MeterConfig {
            meter_id: 3,
            rate_hz: 1.0,
            value_model: ValueModel::Constant(5000),
        })
        .unwrap();
        for i in 0..100 {
            let m = sim.tick(i);
            assert_eq!(m.value_mw, 5000);
            assert_eq!(m.seq, i);
            assert_eq!(m.meter_id, 3);
        }
    }

    #[test]
    fn random_walk_replays_deterministically() {
        let cfg = MeterConfig {
            meter_id: 1,
            rate_hz: 1.0,
            value_model: ValueModel::RandomWalk { seed: 42, step: 100 },
        };
        let mut a = MeterSim::new(cfg.clone()).unwrap();
        let mut b = MeterSim::new(cfg).unwrap();
        let seq_a: Vec<u64> = (0..1000).map(|i| a.tick(i).value_mw).collect();
        let seq_b: Vec<u64> = (0..1000).map(|i| b.tick(i).value_mw).collect();
        assert_eq!(seq_a, seq_b);
        // and it actually walks
        assert!(seq_a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(MeterSim::new(MeterConfig {
            meter_id: 1,
            rate_hz: 0.0,
            value_model: ValueModel::Constant(1),
        })
        .is_err());
    }

    #[test]
    fn paced_ticks_span_expected_time() {
        // scaled version of the 1 Hz / 60 s pacing check: 20 Hz, 21 ticks
        // should span roughly a second
        let cfg = MeterConfig {
            meter_id: 1,
            rate_hz: 20.0,
            value_model: ValueModel::Constant(1),
        };
        let mut sim = MeterSim::new(cfg.clone()).unwrap();
        let period = cfg.period();
        let start = Instant::now();
        let mut stamps = Vec::new();
        for i in 0..21u32 {
            let target = start + period * i;
            if let Some(wait) = target.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            stamps.push(sim.tick(unix_millis()).timestamp_ms);
        }
        let span_ms = stamps.last().unwrap() - stamps.first().unwrap();
        // ideal span is 20 periods = 1000 ms; allow generous scheduler jitter
        assert!((700..=1600).contains(&span_ms), "span {span_ms} ms");
    }
}
