//! The producer pipeline (meter simulator, trusted collector, untrusted
//! gateway) and the consumer endpoint.

mod consumer;
mod dispatcher;
mod mdc;
mod meter;
mod producer;
mod uplink;

pub use consumer::{Consumer, ConsumerConfig, DecodedRecord, ReceivedRecord, CONSUMER_CSV_HEADER};
pub use dispatcher::{ByteLog, Dispatcher, DispatcherHandle, RetryPolicy};
pub use mdc::Mdc;
pub use meter::{MeterConfig, MeterSim, ValueModel};
pub use producer::{
    connect_retry, decide_authorization, request_authorization, spawn_publisher_auth_server,
    AuthDecision, Producer, ProducerConfig, ProducerHandle, SubscriptionSigner,
};
pub use uplink::UplinkConn;

use thiserror::Error;

use crate::attestation::{AttestationError, RejectReason};
use crate::envelope::EnvelopeError;

#[derive(Error, Debug)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error("attestation rejected: {0}")]
    AttestationRejected(RejectReason),
    #[error("broker refused the request (ack code {0})")]
    BrokerRefused(u8),
    #[error("authorization denied by publisher: {0}")]
    AuthorizationDenied(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("connection closed")]
    Closed,
    #[error("invalid configuration: {0}")]
    Config(String),
}
