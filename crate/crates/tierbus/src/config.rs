//! Platform configuration file (TOML) shared by the daemons.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("parse {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub broker: BrokerSection,
    #[serde(default)]
    pub attestor: AttestorSection,
    #[serde(default)]
    pub aggregator: AggregatorSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSection {
    #[serde(default = "default_broker_listen")]
    pub listen: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// "secure" or "regular"
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_subscriber_buffer")]
    pub subscriber_buffer: usize,
    /// Fixed per-message overhead hook for experiments, nanoseconds.
    #[serde(default)]
    pub overhead_ns: u64,
}

impl Default for BrokerSection {
    fn default() -> Self {
        BrokerSection {
            listen: default_broker_listen(),
            capacity: default_capacity(),
            mode: default_mode(),
            subscriber_buffer: default_subscriber_buffer(),
            overhead_ns: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestorSection {
    #[serde(default = "default_attestor_listen")]
    pub listen: String,
    #[serde(default = "default_max_quote_age_ms")]
    pub max_quote_age_ms: u64,
}

impl Default for AttestorSection {
    fn default() -> Self {
        AttestorSection {
            listen: default_attestor_listen(),
            max_quote_age_ms: default_max_quote_age_ms(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSection {
    #[serde(default = "default_window_ms")]
    pub window_ms: u64,
    #[serde(default = "default_grace_ms")]
    pub grace_ms: u64,
    /// meter_id -> region_id (TOML keys are strings)
    #[serde(default)]
    pub regions: HashMap<String, u64>,
}

impl Default for AggregatorSection {
    fn default() -> Self {
        AggregatorSection {
            window_ms: default_window_ms(),
            grace_ms: default_grace_ms(),
            regions: HashMap::new(),
        }
    }
}

impl AggregatorSection {
    pub fn region_map(&self) -> HashMap<u64, u64> {
        self.regions
            .iter()
            .filter_map(|(k, v)| k.parse::<u64>().ok().map(|meter| (meter, *v)))
            .collect()
    }
}

fn default_broker_listen() -> String {
    "127.0.0.1:7474".to_string()
}

fn default_attestor_listen() -> String {
    "127.0.0.1:7575".to_string()
}

fn default_capacity() -> usize {
    65_536
}

fn default_mode() -> String {
    "regular".to_string()
}

fn default_subscriber_buffer() -> usize {
    8_192
}

fn default_max_quote_age_ms() -> u64 {
    30_000
}

fn default_window_ms() -> u64 {
    3_600_000
}

fn default_grace_ms() -> u64 {
    2_000
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_apply_on_empty_config() {
        let cfg: Config = toml::from_str("").unwrap();
        assert_eq!(cfg.broker.listen, "127.0.0.1:7474");
        assert_eq!(cfg.broker.capacity, 65_536);
        assert_eq!(cfg.attestor.max_quote_age_ms, 30_000);
        assert_eq!(cfg.aggregator.window_ms, 3_600_000);
        assert_eq!(cfg.aggregator.grace_ms, 2_000);
    }

    #[test]
    fn parses_sections_and_region_map() {
        let cfg: Config = toml::from_str(
            r#"
            [broker]
            listen = "127.0.0.1:9000"
            capacity = 128
            mode = "secure"

            [attestor]
            listen = "127.0.0.1:9001"

            [aggregator]
            window_ms = 1000
            regions = { "1" = 10, "2" = 20 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.broker.capacity, 128);
        assert_eq!(cfg.broker.mode, "secure");
        let regions = cfg.aggregator.region_map();
        assert_eq!(regions[&1], 10);
        assert_eq!(regions[&2], 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[broker]\nbogus = 1").is_err());
    }
}
