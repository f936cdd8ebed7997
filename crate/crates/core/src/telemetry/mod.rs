//! Sensor telemetry over MQTT with a compressed store-and-forward backlog.

mod backlog;
mod broker;
mod session;

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::{SensorKind, SensorReading};

pub use backlog::{BacklogError, BacklogStore, DrainOutcome, Recovery, SyncPolicy, BACKLOG_FILE};
pub use broker::{BrokerFault, LoggedPublish, StubBroker};
pub use session::{BrokerSession, IncomingMessage, SessionConfig, TransportError};

pub const DEFAULT_BROKER: &str = "10.4.1.100:1883";
pub const DEFAULT_TOPIC_PREFIX: &str = "/usp";

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("sensor kind {0} has no telemetry topic")]
    UnsupportedKind(SensorKind),
    #[error("topic prefix {0:?} must start with '/' and contain no wildcard, comma or newline")]
    InvalidPrefix(String),
}

/// An MQTT topic name such as `/usp/temp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Topic(String);

impl Topic {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Wraps a raw topic name. Used when decoding stored records.
    pub fn from_raw(s: impl Into<String>) -> Self {
        Topic(s.into())
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Topic {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

pub fn validate_prefix(prefix: &str) -> Result<(), TelemetryError> {
    let bad = |c: char| matches!(c, '+' | '#' | ',' | '\n' | '\r' | '\0');
    if !prefix.starts_with('/') || prefix.chars().any(bad) {
        return Err(TelemetryError::InvalidPrefix(prefix.to_string()));
    }
    Ok(())
}

fn join(prefix: &str, leaf: &str) -> Topic {
    Topic(format!("{}/{}", prefix.trim_end_matches('/'), leaf))
}

/// Maps a sensor kind onto `<prefix>/temp`, `<prefix>/humid` or `<prefix>/sm`.
pub fn topic_for(kind: SensorKind, prefix: &str) -> Result<Topic, TelemetryError> {
    validate_prefix(prefix)?;
    let leaf = match kind {
        SensorKind::Temperature => "temp",
        SensorKind::Humidity => "humid",
        SensorKind::SoilMoisture => "sm",
        other => return Err(TelemetryError::UnsupportedKind(other)),
    };
    Ok(join(prefix, leaf))
}

/// Subscribed manual pump command topic.
pub fn pump_command_topic(prefix: &str) -> Topic {
    join(prefix, "cmd/pump")
}

/// Retained pump status topic.
pub fn pump_status_topic(prefix: &str) -> Topic {
    join(prefix, "status/pump")
}

/// ASCII decimal with exactly one fractional digit, rounded half away
/// from zero on the value's shortest decimal representation.
pub fn encode_payload(reading: &SensorReading) -> Vec<u8> {
    format_one_decimal(reading.value).into_bytes()
}

pub fn format_one_decimal(value: f64) -> String {
    if !value.is_finite() {
        return value.to_string();
    }
    // Display for f64 is the shortest string that round-trips, never in
    // exponent form, so rounding its digits matches what a person reads.
    let text = format!("{}", value.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.push(frac.first().copied().unwrap_or(0));
    if frac.get(1).is_some_and(|&d| d >= 5) {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let (int_digits, frac_digit) = digits.split_at(digits.len() - 1);
    let negative = value < 0.0 && digits.iter().any(|&d| d != 0);
    let mut out = String::with_capacity(digits.len() + 2);
    if negative {
        out.push('-');
    }
    out.extend(int_digits.iter().map(|&d| char::from(b'0' + d)));
    out.push('.');
    out.push(char::from(b'0' + frac_digit[0]));
    out
}

/// Parses a payload produced by [`encode_payload`].
pub fn decode_payload(payload: &[u8]) -> Option<f64> {
    std::str::from_utf8(payload).ok()?.parse().ok()
}

/// A reading bound for the broker, numbered per device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub seq: u64,
    pub topic: Topic,
    pub payload: Vec<u8>,
    pub timestamp: DateTime<Utc>,
}

impl TelemetryRecord {
    pub fn from_reading(seq: u64, reading: &SensorReading, prefix: &str) -> Result<Self, TelemetryError> {
        Ok(TelemetryRecord {
            seq,
            topic: topic_for(reading.kind, prefix)?,
            payload: encode_payload(reading),
            timestamp: reading.timestamp,
        })
    }
}

/// Anything that can deliver a record with at-least-once semantics.
pub trait Publisher {
    fn publish(&mut self, record: &TelemetryRecord) -> Result<(), TransportError>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reading(kind: SensorKind, value: f64) -> SensorReading {
        SensorReading {
            kind,
            value,
            timestamp: "2021-03-01T00:00:00Z".parse().unwrap(),
            device_id: "d".into(),
        }
    }

    #[test]
    fn default_topics() {
        assert_eq!(topic_for(SensorKind::Temperature, "/usp").unwrap().as_str(), "/usp/temp");
        assert_eq!(topic_for(SensorKind::Humidity, "/usp").unwrap().as_str(), "/usp/humid");
        assert_eq!(topic_for(SensorKind::SoilMoisture, "/usp").unwrap().as_str(), "/usp/sm");
        assert_eq!(
            topic_for(SensorKind::Humidity, "/greenhouse").unwrap().as_str(),
            "/greenhouse/humid"
        );
    }

    #[test]
    fn topic_errors() {
        assert_eq!(
            topic_for(SensorKind::Rain, "/usp"),
            Err(TelemetryError::UnsupportedKind(SensorKind::Rain))
        );
        assert!(topic_for(SensorKind::Temperature, "usp").is_err());
        assert!(topic_for(SensorKind::Temperature, "/a/#").is_err());
    }

    #[test]
    fn topics_are_injective() {
        let topics: std::collections::HashSet<_> = SensorKind::ACTIVE
            .iter()
            .map(|&k| topic_for(k, DEFAULT_TOPIC_PREFIX).unwrap())
            .collect();
        assert_eq!(topics.len(), 3);
    }

    #[test]
    fn payload_examples() {
        assert_eq!(encode_payload(&reading(SensorKind::Temperature, 24.5)), b"24.5");
        assert_eq!(encode_payload(&reading(SensorKind::Humidity, 60.0)), b"60.0");
        assert_eq!(encode_payload(&reading(SensorKind::SoilMoisture, 35.449)), b"35.4");
    }

    #[test]
    fn payload_rounding_edges() {
        assert_eq!(format_one_decimal(35.45), "35.5");
        assert_eq!(format_one_decimal(1.15), "1.2");
        assert_eq!(format_one_decimal(99.96), "100.0");
        assert_eq!(format_one_decimal(-0.25), "-0.3");
        assert_eq!(format_one_decimal(-0.04), "0.0");
        assert_eq!(format_one_decimal(0.0), "0.0");
        assert_eq!(format_one_decimal(-12.0), "-12.0");
        assert_eq!(format_one_decimal(9.95), "10.0");
    }

    proptest! {
        #[test]
        fn payload_decodes_close_to_value(v in -40.0f64..85.0) {
            let p = encode_payload(&reading(SensorKind::Temperature, v));
            let text = std::str::from_utf8(&p).unwrap();
            let (_, frac) = text.split_once('.').unwrap();
            prop_assert_eq!(frac.len(), 1);
            let back = decode_payload(&p).unwrap();
            prop_assert!((back - v).abs() <= 0.05 + 1e-9);
        }
    }
}
