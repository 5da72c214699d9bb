//! Privacy-tiered data dissemination bus for metering telemetry.
//!
//! Attested producers publish encrypted measurements through an untrusted
//! gateway into a content-based pub/sub broker. Attested aggregators lower
//! data sensitivity by windowed averaging and republish; consumers receive
//! only the sensitivity tier they were attested for. A benchmark harness
//! drives the whole pipeline and an additive-homomorphic aggregation
//! baseline for comparison.

pub mod aggregator;
pub mod attestation;
pub mod bench;
pub mod broker;
pub mod clients;
pub mod config;
pub mod crypto;
pub mod envelope;
pub mod hebaseline;
pub mod sys;
