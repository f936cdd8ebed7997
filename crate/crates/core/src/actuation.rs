//! Pump decision with a hysteresis band, manual override with expiry, and
//! the simulated relay.

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::irrigation::{CropProfile, SoilProfile};
use crate::sensing::{SensorKind, SensorReading};

pub const DEFAULT_MANUAL_TTL_S: u64 = 1800;
/// Missed sample periods after which the pump is forced off.
pub const STALE_PERIODS: u32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ActuationError {
    #[error("need 0 ≤ sm_low < sm_high ≤ 100, got {low} / {high}")]
    InvalidBand { low: f64, high: f64 },
    #[error("manual commands need a positive ttl")]
    MissingTtl,
    #[error("unrecognised pump command {0:?}")]
    BadCommand(String),
}

/// Turn-on and turn-off soil-moisture thresholds, %VWC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub sm_low: f64,
    pub sm_high: f64,
}

impl DecisionPolicy {
    pub fn new(sm_low: f64, sm_high: f64) -> Result<Self, ActuationError> {
        if !(0.0 <= sm_low && sm_low < sm_high && sm_high <= 100.0) {
            return Err(ActuationError::InvalidBand { low: sm_low, high: sm_high });
        }
        Ok(DecisionPolicy { sm_low, sm_high })
    }

    /// Turn on where the readily available water is used up, turn off just
    /// short of field capacity.
    pub fn from_soil(soil: &SoilProfile, crop: &CropProfile) -> Result<Self, ActuationError> {
        let p = crop.depletion_fraction_p;
        Self::new(
            100.0 * (soil.fc - p * (soil.fc - soil.wp)),
            100.0 * soil.fc * 0.95,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Pump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    On,
    Off,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::On => "on",
            Action::Off => "off",
        }
    }

    /// Parses the `on`/`off` wire payload.
    pub fn parse(payload: &[u8]) -> Result<Self, ActuationError> {
        match std::str::from_utf8(payload).map(str::trim) {
            Ok(s) if s.eq_ignore_ascii_case("on") => Ok(Action::On),
            Ok(s) if s.eq_ignore_ascii_case("off") => Ok(Action::Off),
            _ => Err(ActuationError::BadCommand(String::from_utf8_lossy(payload).into_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub target: Target,
    pub action: Action,
    pub source: Source,
    pub timestamp: DateTime<Utc>,
    pub ttl_s: Option<u64>,
}

impl ActuatorCommand {
    pub fn auto(action: Action, timestamp: DateTime<Utc>) -> Self {
        ActuatorCommand {
            target: Target::Pump,
            action,
            source: Source::Auto,
            timestamp,
            ttl_s: None,
        }
    }

    pub fn manual(action: Action, timestamp: DateTime<Utc>, ttl_s: u64) -> Result<Self, ActuationError> {
        if ttl_s == 0 {
            return Err(ActuationError::MissingTtl);
        }
        Ok(ActuatorCommand {
            target: Target::Pump,
            action,
            source: Source::Manual,
            timestamp,
            ttl_s: Some(ttl_s),
        })
    }

    /// Manual commands expire at `timestamp + ttl`; auto commands never do.
    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        match self.ttl_s {
            Some(ttl) => now >= self.timestamp + ChronoDuration::seconds(ttl as i64),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayState {
    pub pump_on: bool,
    pub since: DateTime<Utc>,
    pub last_source: Source,
}

impl RelayState {
    pub fn off(since: DateTime<Utc>) -> Self {
        RelayState {
            pump_on: false,
            since,
            last_source: Source::Auto,
        }
    }

    pub fn status_payload(&self) -> &'static str {
        if self.pump_on {
            "on"
        } else {
            "off"
        }
    }
}

/// Hysteresis decision: on at or below `sm_low` when off, off at or above
/// `sm_high` when on, otherwise hold.
pub fn decide(policy: &DecisionPolicy, sm: f64, relay: &RelayState, now: DateTime<Utc>) -> Option<ActuatorCommand> {
    if !relay.pump_on && sm <= policy.sm_low {
        Some(ActuatorCommand::auto(Action::On, now))
    } else if relay.pump_on && sm >= policy.sm_high {
        Some(ActuatorCommand::auto(Action::Off, now))
    } else {
        None
    }
}

/// An unexpired manual command beats any automatic one.
pub fn merge(
    auto: Option<ActuatorCommand>,
    manual: Option<ActuatorCommand>,
    now: DateTime<Utc>,
) -> Option<ActuatorCommand> {
    match manual {
        Some(m) if !m.is_expired(now) => Some(m),
        _ => auto,
    }
}

/// Drives the relay. Re-applying the current action is a no-op.
pub fn apply(relay: &RelayState, cmd: &ActuatorCommand, now: DateTime<Utc>) -> RelayState {
    let want_on = cmd.action == Action::On;
    if want_on == relay.pump_on {
        return relay.clone();
    }
    RelayState {
        pump_on: want_on,
        since: now,
        last_source: cmd.source,
    }
}

/// Control-loop owner of the relay: feeds samples and manual commands
/// through decide, merge and apply, with the stale-sensor guard.
#[derive(Debug, Clone)]
pub struct PumpController {
    policy: Option<DecisionPolicy>,
    relay: RelayState,
    manual: Option<ActuatorCommand>,
    last_sm: Option<(DateTime<Utc>, f64)>,
    stale_after: ChronoDuration,
    auto_log: Vec<ActuatorCommand>,
}

impl PumpController {
    /// Without a policy only manual commands and the stale guard act.
    pub fn new(policy: Option<DecisionPolicy>, sample_period_s: f64, now: DateTime<Utc>) -> Self {
        let stale_ms = (sample_period_s * 1000.0 * f64::from(STALE_PERIODS)).round() as i64;
        PumpController {
            policy,
            relay: RelayState::off(now),
            manual: None,
            last_sm: None,
            stale_after: ChronoDuration::milliseconds(stale_ms),
            auto_log: Vec::new(),
        }
    }

    pub fn policy(&self) -> Option<DecisionPolicy> {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Option<DecisionPolicy>) {
        self.policy = policy;
    }

    pub fn relay(&self) -> &RelayState {
        &self.relay
    }

    /// Automatic commands that reached the relay, in order.
    pub fn auto_commands(&self) -> &[ActuatorCommand] {
        &self.auto_log
    }

    pub fn active_manual(&self, now: DateTime<Utc>) -> Option<&ActuatorCommand> {
        self.manual.as_ref().filter(|m| !m.is_expired(now))
    }

    pub fn submit_manual(&mut self, cmd: ActuatorCommand, now: DateTime<Utc>) -> Option<RelayState> {
        self.manual = Some(cmd);
        self.step(now, None)
    }

    /// Runs one decision. `sm` is a soil-moisture reading that already
    /// passed validation. Returns the new relay state when it changed.
    pub fn step(&mut self, now: DateTime<Utc>, sm: Option<&SensorReading>) -> Option<RelayState> {
        if let Some(r) = sm.filter(|r| r.kind == SensorKind::SoilMoisture) {
            if self.last_sm.is_none_or(|(t, _)| r.timestamp >= t) {
                self.last_sm = Some((r.timestamp, r.value));
            }
        }
        let auto = match self.last_sm {
            Some((t, v)) if now - t < self.stale_after => {
                self.policy.and_then(|p| decide(&p, v, &self.relay, now))
            }
            // no fresh reading: fail safe
            _ if self.relay.pump_on => Some(ActuatorCommand::auto(Action::Off, now)),
            _ => None,
        };
        if self.manual.as_ref().is_some_and(|m| m.is_expired(now)) {
            self.manual = None;
        }
        let cmd = merge(auto, self.manual.clone(), now)?;
        let next = apply(&self.relay, &cmd, now);
        if cmd.source == Source::Auto && next != self.relay {
            self.auto_log.push(cmd);
        }
        if next != self.relay {
            self.relay = next.clone();
            Some(next)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irrigation::Catalog;

    fn t(s: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(1_614_556_800 + s, 0).unwrap()
    }

    fn policy() -> DecisionPolicy {
        DecisionPolicy::new(20.0, 35.0).unwrap()
    }

    fn relay(on: bool) -> RelayState {
        RelayState {
            pump_on: on,
            since: t(0),
            last_source: Source::Auto,
        }
    }

    fn sm(at: i64, v: f64) -> SensorReading {
        SensorReading {
            kind: SensorKind::SoilMoisture,
            value: v,
            timestamp: t(at),
            device_id: "d".into(),
        }
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(&policy(), 18.0, &relay(false), t(1)).unwrap().action, Action::On);
        assert_eq!(decide(&policy(), 30.0, &relay(false), t(1)), None);
        assert_eq!(decide(&policy(), 36.0, &relay(true), t(1)).unwrap().action, Action::Off);
        assert_eq!(decide(&policy(), 20.0, &relay(false), t(1)).unwrap().action, Action::On);
        assert_eq!(decide(&policy(), 18.0, &relay(true), t(1)), None);
    }

    #[test]
    fn band_validation() {
        assert!(DecisionPolicy::new(35.0, 20.0).is_err());
        assert!(DecisionPolicy::new(20.0, 20.0).is_err());
        assert!(DecisionPolicy::new(-1.0, 20.0).is_err());
        assert!(DecisionPolicy::new(0.0, 100.0).is_ok());
    }

    #[test]
    fn thresholds_from_loam_beans() {
        let cat = Catalog::seeded();
        let p = DecisionPolicy::from_soil(cat.soil("loam").unwrap(), cat.crop("beans").unwrap()).unwrap();
        // 100·(0.25 − 0.45·0.13) and 100·0.25·0.95
        assert!((p.sm_low - 19.15).abs() < 1e-9);
        assert!((p.sm_high - 23.75).abs() < 1e-9);
    }

    #[test]
    fn merge_examples() {
        let auto_on = Some(ActuatorCommand::auto(Action::On, t(100)));
        let manual_off = ActuatorCommand::manual(Action::Off, t(0), 1800).unwrap();
        assert_eq!(merge(auto_on.clone(), Some(manual_off.clone()), t(100)).unwrap().action, Action::Off);
        assert_eq!(merge(auto_on.clone(), Some(manual_off), t(1800)).unwrap().action, Action::On);
        assert_eq!(merge(None, None, t(0)), None);
        assert!(ActuatorCommand::manual(Action::On, t(0), 0).is_err());
    }

    #[test]
    fn apply_examples() {
        let on = apply(&relay(false), &ActuatorCommand::auto(Action::On, t(5)), t(5));
        assert!(on.pump_on);
        assert_eq!(on.since, t(5));
        let again = apply(&on, &ActuatorCommand::auto(Action::On, t(9)), t(9));
        assert_eq!(again, on);
        let off = apply(&on, &ActuatorCommand::manual(Action::Off, t(10), 60).unwrap(), t(10));
        assert!(!off.pump_on);
        assert_eq!(off.last_source, Source::Manual);
    }

    #[test]
    fn one_on_one_off_over_a_band_crossing() {
        let mut c = PumpController::new(Some(policy()), 60.0, t(0));
        let trace = [30.0, 26.0, 22.0, 19.0, 17.0, 21.0, 27.0, 33.0, 36.0, 40.0, 38.0];
        for (i, v) in trace.iter().enumerate() {
            let at = i as i64 * 60;
            c.step(t(at), Some(&sm(at, *v)));
        }
        let actions: Vec<_> = c.auto_commands().iter().map(|c| c.action).collect();
        assert_eq!(actions, vec![Action::On, Action::Off]);
    }

    #[test]
    fn manual_off_holds_until_expiry() {
        let mut c = PumpController::new(Some(policy()), 60.0, t(0));
        c.submit_manual(ActuatorCommand::manual(Action::Off, t(0), 300).unwrap(), t(0));
        for at in (0..300).step_by(60) {
            c.step(t(at), Some(&sm(at, 10.0)));
            assert!(!c.relay().pump_on, "auto On leaked at {at}");
        }
        c.step(t(300), Some(&sm(300, 10.0)));
        assert!(c.relay().pump_on);
        assert_eq!(c.relay().last_source, Source::Auto);
    }

    #[test]
    fn stale_sensor_forces_off() {
        let mut c = PumpController::new(Some(policy()), 60.0, t(0));
        c.step(t(0), Some(&sm(0, 10.0)));
        assert!(c.relay().pump_on);
        c.step(t(60), None);
        c.step(t(120), None);
        assert!(c.relay().pump_on);
        c.step(t(180), None);
        assert!(!c.relay().pump_on);
        assert_eq!(c.auto_commands().last().unwrap().action, Action::Off);
    }

    #[test]
    fn interlock_never_on_above_high() {
        let mut c = PumpController::new(Some(policy()), 60.0, t(0));
        for (i, v) in [50.0, 40.0, 35.0, 60.0].iter().enumerate() {
            let at = i as i64 * 60;
            c.step(t(at), Some(&sm(at, *v)));
            assert!(!c.relay().pump_on);
        }
    }

    #[test]
    fn parse_wire_payload() {
        assert_eq!(Action::parse(b"on"), Ok(Action::On));
        assert_eq!(Action::parse(b"OFF\n"), Ok(Action::Off));
        assert!(Action::parse(b"toggle").is_err());
    }
}
