//! Defect telemetry over a small MQTT 3.1.1 subset: packet codec, broker,
//! client and the fixed binary defect record.

mod broker;
mod client;
mod frame;
mod record;
mod transport;
mod varint;

use thiserror::Error;

pub use broker::{broker_serve, control_topic, defects_topic, BrokerConfig, BrokerHandle, BrokerStats};
pub use client::{next_packet_id, Client, ClientOptions, ClientStats, Delivery, FaultInjection, Handler, PublishOutcome};
pub use frame::{Packet, PacketReader, QoS, SUBACK_FAILURE};
pub use record::{quantize_confidence, DefectRecord, RECORD_LEN, RECORD_VERSION};
pub use transport::{duplex, Conn, MemEnd};
pub use varint::{decode_varint, encode_varint, encode_varint_into, VARINT_MAX};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid record field {field}: {reason}")]
    Record { field: &'static str, reason: String },
    #[error("connection refused with return code {0}")]
    Refused(u8),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("connection lost with {} unacknowledged publishes", unacked.len())]
    ConnectionLost { unacked: Vec<u16> },
    #[error("gave up delivering packets {0:?}")]
    Undelivered(Vec<u16>),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("subscription to {0} rejected")]
    Subscribe(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
