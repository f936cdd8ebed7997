//! Desk-scale stand-alone IoT garden device.
//!
//! The device boots into a time-boxed configuration window served over
//! HTTP, runs a one-time setup, then loops forever: sample the sensors,
//! publish to an MQTT broker (falling back to a compressed offline
//! backlog), and drive a relay-controlled pump. An irrigation planner turns
//! crop, soil, plantation date and weather history into a growth-stage
//! calendar and dated irrigation events.

pub mod clock;
pub mod sensing;
pub mod telemetry;
pub mod irrigation;
pub mod runtime;
pub mod actuation;
pub mod portal;
pub mod scenario;
pub mod runner;
pub mod cli;
