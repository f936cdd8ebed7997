//! The device's single control loop: lifecycle ticks, sampling, telemetry
//! through the write-ahead backlog, pump control, and portal requests.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use serde_json::{json, Value};
use thiserror::Error;

use crate::actuation::{Action, ActuatorCommand, DecisionPolicy, PumpController, RelayState};
use crate::clock::{Clock, MonoTime};
use crate::irrigation::{
    simulate_balance, update_with_observation, Catalog, CropProfile, IrrigationError, IrrigationPlan, SoilProfile,
    DEFAULT_EFFICIENCY,
};
use crate::portal::http::{self, PortalInbox, Responder};
use crate::portal::{DevicePortal, PortalError, PortalReply, PortalRequest, PortalServer, StreamEvent};
use crate::runtime::{DataStore, DeviceState, Effect, Phase, RuntimeError, RuntimeSettings};
use crate::scenario::Scenario;
use crate::sensing::{self, ScenarioStream, SensorKind, SensorReading};
use crate::telemetry::{
    pump_command_topic, pump_status_topic, BacklogError, BacklogStore, BrokerSession, LoggedPublish, SessionConfig,
    StubBroker, SyncPolicy, TelemetryRecord, BACKLOG_FILE,
};

/// Upper bound on one idle wait, so portal requests are served promptly.
const MAX_IDLE: Duration = Duration::from_millis(10);
const RECONNECT_MIN: Duration = Duration::from_millis(50);
const RECONNECT_MAX: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerTarget {
    Address(String),
    /// Start an in-process stub broker on a free local port.
    Stub,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub settings: RuntimeSettings,
    /// Simulated run length, counted from boot. `None` runs forever.
    pub duration: Option<Duration>,
    pub data_dir: PathBuf,
    /// Where the portal listens; `None` disables it.
    pub portal_addr: Option<SocketAddr>,
    pub broker: BrokerTarget,
    pub scenario: Scenario,
}

/// Addresses known once the device is up.
#[derive(Debug, Clone)]
pub struct Ready {
    pub portal: Option<SocketAddr>,
    pub broker: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    Fault(String),
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: Outcome,
    pub samples: u64,
    /// Validated readings written to the backlog.
    pub readings: u64,
    pub rejected: u64,
    pub delivered: u64,
    pub backlog_remaining: usize,
    pub disable_portal_effects: u32,
    pub setup_effects: u32,
    pub relay: RelayState,
    pub auto_commands: Vec<ActuatorCommand>,
    pub plan: Option<IrrigationPlan>,
    /// Everything the in-process broker saw, for `BrokerTarget::Stub`.
    pub stub_log: Option<Vec<LoggedPublish>>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Settings(#[from] RuntimeError),
    #[error("data directory {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },
    #[error("backlog: {0}")]
    Backlog(#[from] BacklogError),
    #[error("crop/soil database: {0}")]
    Catalog(#[from] IrrigationError),
    #[error("portal: {0}")]
    Portal(std::io::Error),
    #[error("stub broker: {0}")]
    Broker(std::io::Error),
    #[error("scenario: {0}")]
    Scenario(String),
}

struct Agronomy {
    crop: CropProfile,
    soil: SoilProfile,
    plan: Option<IrrigationPlan>,
    replanned_on: Option<NaiveDate>,
}

struct Device {
    cfg: RunConfig,
    clock: Arc<dyn Clock>,
    boot: MonoTime,
    state: DeviceState,
    portal: DevicePortal,
    inbox: PortalInbox,
    session: BrokerSession,
    backlog: BacklogStore,
    stream: ScenarioStream,
    controller: PumpController,
    agronomy: Option<Agronomy>,
    last_offset: BTreeMap<SensorKind, f64>,
    latest: BTreeMap<String, (String, DateTime<Utc>)>,
    link_down: bool,
    storage_failed: bool,
    status_dirty: bool,
    next_connect: MonoTime,
    connect_backoff: Duration,
    /// In-process broker; scripted outages take it down instead of the link.
    stub: Option<StubBroker>,
    report: RunReport,
}

/// Boots the device and runs it to completion. `ready` is called once the
/// portal and broker addresses are known.
pub fn run(cfg: RunConfig, clock: Arc<dyn Clock>, ready: impl FnOnce(Ready)) -> Result<RunReport, RunError> {
    cfg.settings.validate()?;
    std::fs::create_dir_all(&cfg.data_dir).map_err(|source| RunError::DataDir {
        path: cfg.data_dir.clone(),
        source,
    })?;

    let stub = match cfg.broker {
        BrokerTarget::Stub => Some(StubBroker::start().map_err(RunError::Broker)?),
        BrokerTarget::Address(_) => None,
    };
    let broker_addr = match (&cfg.broker, &stub) {
        (_, Some(s)) => s.addr().to_string(),
        (BrokerTarget::Address(a), None) => a.clone(),
        (BrokerTarget::Stub, None) => unreachable!(),
    };

    let catalog = Catalog::load_or_seeded(Some(&cfg.data_dir))?;
    let store = DataStore::in_dir(&cfg.data_dir);
    let now = clock.now();
    let (state, data) = crate::runtime::boot(&cfg.settings, now, &store)?;
    if data.application().is_some() {
        log::info!("loaded saved application input; the form is prefilled");
    }
    let portal = DevicePortal::new(cfg.scenario.networks.clone(), catalog, data, store).map_err(RunError::Scenario)?;

    let (backlog, recovery) = BacklogStore::open(cfg.data_dir.join(BACKLOG_FILE), SyncPolicy::Fsync)?;
    if recovery.records > 0 {
        log::info!(
            "backlog: {} record(s) recovered, {} still to deliver",
            recovery.records,
            backlog.len()
        );
    }

    let (handle, inbox) = http::channel();
    let server = match cfg.portal_addr {
        Some(addr) => Some(PortalServer::start(addr, handle).map_err(RunError::Portal)?),
        None => None,
    };

    let period_s = cfg.settings.sample_period.as_secs_f64();
    let duration_s = cfg.duration.map_or(7.0 * 86_400.0, |d| d.as_secs_f64());
    let stream = cfg.scenario.sensors.stream(duration_s, period_s);
    let session = BrokerSession::new(SessionConfig::new(broker_addr.clone(), cfg.settings.device_id.clone()));
    let start_utc = cfg.scenario.start;

    let mut device = Device {
        controller: PumpController::new(None, period_s, start_utc),
        clock,
        boot: now,
        state,
        portal,
        inbox,
        session,
        backlog,
        stream,
        agronomy: None,
        last_offset: BTreeMap::new(),
        latest: BTreeMap::new(),
        link_down: false,
        storage_failed: false,
        status_dirty: false,
        next_connect: now,
        connect_backoff: RECONNECT_MIN,
        stub,
        report: RunReport {
            outcome: Outcome::Clean,
            samples: 0,
            readings: 0,
            rejected: 0,
            delivered: 0,
            backlog_remaining: 0,
            disable_portal_effects: 0,
            setup_effects: 0,
            relay: RelayState::off(start_utc),
            auto_commands: Vec::new(),
            plan: None,
            stub_log: None,
        },
        cfg,
    };

    if let Some(form) = device.cfg.scenario.application.clone() {
        device
            .portal
            .submit_application(&device.state, form)
            .map_err(|e| RunError::Scenario(format!("application: {}", e.detail)))?;
    }

    ready(Ready {
        portal: server.as_ref().map(PortalServer::addr),
        broker: broker_addr,
    });
    device.run_loop();
    device.report.backlog_remaining = device.backlog.len();
    device.report.relay = device.controller.relay().clone();
    device.report.auto_commands = device.controller.auto_commands().to_vec();
    device.report.plan = device.agronomy.as_ref().and_then(|a| a.plan.clone());
    device.session.disconnect();
    drop(server);
    if let Some(stub) = &device.stub {
        device.report.stub_log = Some(stub.log());
    }
    Ok(device.report)
}

fn round_ms(secs: f64) -> f64 {
    (secs * 1000.0).round() / 1000.0
}

impl Device {
    fn sim_s(&self, t: MonoTime) -> f64 {
        round_ms(self.cfg.settings.nominal(t.since(self.boot)).as_secs_f64())
    }

    fn sim_utc(&self, sim_s: f64) -> DateTime<Utc> {
        self.cfg.scenario.start + chrono::Duration::milliseconds((sim_s * 1000.0).round() as i64)
    }

    fn prefix(&self) -> &str {
        &self.cfg.settings.topic_prefix
    }

    fn run_loop(&mut self) {
        let end_s = self.cfg.duration.map(|d| d.as_secs_f64());
        loop {
            let now = self.clock.now();
            let sim = self.sim_s(now);
            if end_s.is_some_and(|e| sim >= e) {
                break;
            }
            self.apply_faults(sim);
            self.serve_portal(now);

            let committed = self.portal.data().application().is_some();
            let (next, effects) = self.state.clone().tick(now, committed);
            self.state = next;
            for effect in effects {
                if let Err(reason) = self.execute(effect, now) {
                    log::error!("fault: {reason}");
                    self.state = self.state.clone().into_fault(reason.clone());
                    self.report.outcome = Outcome::Fault(reason);
                }
            }
            if let Phase::Fault { .. } = self.state.phase {
                break;
            }
            if self.state.phase == Phase::Operational {
                self.poll_commands(now);
            }
            self.idle(now);
        }
        if self.report.outcome == Outcome::Clean {
            if let Err(reason) = self.flush(self.clock.now()) {
                self.report.outcome = Outcome::Fault(reason);
            }
        }
        let now = self.clock.now();
        self.serve_portal(now);
    }

    fn apply_faults(&mut self, sim: f64) {
        let down = self.cfg.scenario.link_down_at(sim);
        if down != self.link_down {
            self.link_down = down;
            match (&self.stub, down) {
                (Some(stub), true) => stub.take_down(),
                (Some(stub), false) => stub.heal(),
                (None, _) => self.session.set_link(!down),
            }
            self.connect_backoff = RECONNECT_MIN;
            self.next_connect = MonoTime::ZERO;
            if down {
                log::warn!("broker outage begins at t={sim}s (scripted)");
            } else {
                log::info!("broker outage ends at t={sim}s");
            }
        }
        if !self.storage_failed && self.cfg.scenario.storage.fail_at_s.is_some_and(|t| sim >= t) {
            self.storage_failed = true;
            self.backlog.set_write_fault(true);
            log::warn!("storage failure injected at t={sim}s");
        }
    }

    fn idle(&mut self, now: MonoTime) {
        let mut wake = now + MAX_IDLE;
        if let Phase::ConfigMode { deadline } = self.state.phase {
            wake = wake.min(deadline);
        }
        if let Some(due) = self.state.next_sample_at() {
            wake = wake.min(due);
        }
        if let Some(d) = self.cfg.duration {
            wake = wake.min(self.boot + self.cfg.settings.wall(d));
        }
        let wait = wake.since(now);
        if wait.is_zero() {
            return;
        }
        std::thread::sleep(wait);
    }

    fn execute(&mut self, effect: Effect, now: MonoTime) -> Result<(), String> {
        match effect {
            Effect::DisablePortalConfig => {
                self.report.disable_portal_effects += 1;
                log::info!("configuration window closed; portal is read-only");
                Ok(())
            }
            Effect::RunOneTimeSetup { application_committed } => {
                self.report.setup_effects += 1;
                self.setup(application_committed)?;
                self.flush(now)
            }
            Effect::SampleSensors { at } => self.sample(at),
        }
    }

    fn setup(&mut self, application_committed: bool) -> Result<(), String> {
        let cmd_topic = pump_command_topic(self.prefix());
        let scenario = &self.cfg.scenario;
        let override_policy = scenario.policy_override().map_err(|e| e.to_string())?;
        let mut policy = override_policy;

        if let Some(input) = self.portal.data().application().filter(|_| application_committed) {
            let catalog = self.portal.catalog();
            let crop = catalog.crop(&input.crop_name).map_err(|e| e.to_string())?.clone();
            let soil = catalog.soil(&input.soil_name).map_err(|e| e.to_string())?.clone();
            if policy.is_none() {
                policy = DecisionPolicy::from_soil(&soil, &crop).ok();
            }
            let plan = match (scenario.weather.is_empty(), scenario.latitude_deg) {
                (true, _) => {
                    log::info!("no weather history given; irrigation plan skipped");
                    None
                }
                (false, None) => {
                    log::warn!("weather given without latitude_deg; irrigation plan skipped");
                    None
                }
                (false, Some(lat)) => {
                    let eff = scenario.efficiency.unwrap_or(DEFAULT_EFFICIENCY);
                    match simulate_balance(&input, &crop, &soil, &scenario.weather, eff, lat.to_radians()) {
                        Ok(plan) => {
                            log::info!(
                                "irrigation plan: {} event(s) over {} days (TAW {:.1} mm, RAW {:.1} mm)",
                                plan.events.len(),
                                plan.days.len(),
                                plan.taw_mm,
                                plan.raw_mm
                            );
                            Some(plan)
                        }
                        Err(e) => {
                            log::warn!("irrigation plan unavailable: {e}");
                            None
                        }
                    }
                }
            };
            self.agronomy = Some(Agronomy {
                crop,
                soil,
                plan,
                replanned_on: None,
            });
        } else {
            log::info!("no application input; automatic pump control needs explicit thresholds");
        }
        if let Some(p) = policy {
            log::info!("pump thresholds: on ≤ {:.1} %VWC, off ≥ {:.1} %VWC", p.sm_low, p.sm_high);
        }
        self.controller.set_policy(policy);

        if let Err(e) = self.session.subscribe(cmd_topic.as_str()) {
            log::warn!("broker unavailable at setup ({e}); will retry");
        }
        self.status_dirty = true;
        self.stream_event(
            pump_status_topic(self.prefix()).as_str().to_string(),
            self.controller.relay().status_payload().to_string(),
            self.cfg.scenario.start,
        );
        Ok(())
    }

    fn sample(&mut self, at: MonoTime) -> Result<(), String> {
        let sim = self.sim_s(at);
        let now_utc = self.sim_utc(sim);
        self.report.samples += 1;

        let mut fresh = Vec::new();
        for kind in SensorKind::ACTIVE {
            let Some((offset, _)) = self.stream.latest(kind, sim) else { continue };
            // only new records become readings; nothing is republished
            if self.last_offset.get(&kind) == Some(&offset) {
                continue;
            }
            self.last_offset.insert(kind, offset);
            fresh.push(kind);
        }
        let readings: Vec<SensorReading> = self
            .stream
            .sample(sim, self.cfg.scenario.start, &self.cfg.settings.device_id)
            .into_iter()
            .filter(|r| fresh.contains(&r.kind))
            .collect();

        let mut valid = Vec::with_capacity(readings.len());
        for r in readings {
            match sensing::validate(&r) {
                Ok(()) => valid.push(r),
                Err(e) => {
                    self.report.rejected += 1;
                    log::warn!("dropping reading: {e}");
                }
            }
        }

        let mut records = Vec::with_capacity(valid.len());
        for r in &valid {
            let seq = self.backlog.next_seq().map_err(|e| format!("storage: {e}"))?;
            let rec = TelemetryRecord::from_reading(seq, r, &self.cfg.settings.topic_prefix).map_err(|e| e.to_string())?;
            records.push(rec);
        }
        self.backlog
            .append_batch(&records)
            .map_err(|e| format!("storage: {e}"))?;
        self.report.readings += records.len() as u64;
        for rec in &records {
            self.stream_event(
                rec.topic.as_str().to_string(),
                String::from_utf8_lossy(&rec.payload).into_owned(),
                rec.timestamp,
            );
        }

        let sm = valid.iter().find(|r| r.kind == SensorKind::SoilMoisture);
        if let Some(r) = sm {
            self.replan(r);
        }
        if self.controller.step(now_utc, sm).is_some() {
            self.relay_changed();
        }
        self.flush(at)
    }

    fn replan(&mut self, sm: &SensorReading) {
        let Some(ag) = self.agronomy.as_mut() else { return };
        let today = sm.timestamp.date_naive();
        if ag.replanned_on == Some(today) {
            return;
        }
        let Some(plan) = ag.plan.as_ref() else { return };
        match update_with_observation(plan, sm, today, &ag.soil, &ag.crop) {
            Ok(updated) => {
                log::debug!("plan updated from SM {} on {today}", sm.value);
                ag.plan = Some(updated);
                ag.replanned_on = Some(today);
            }
            Err(IrrigationError::DateOutOfSeason { .. }) => {}
            Err(e) => log::warn!("plan update failed: {e}"),
        }
    }

    fn relay_changed(&mut self) {
        let relay = self.controller.relay().clone();
        log::info!(
            "pump {} ({:?}) at {}",
            relay.status_payload(),
            relay.last_source,
            relay.since.format("%Y-%m-%dT%H:%M:%SZ")
        );
        self.status_dirty = true;
        self.stream_event(
            pump_status_topic(self.prefix()).as_str().to_string(),
            relay.status_payload().to_string(),
            relay.since,
        );
    }

    fn stream_event(&mut self, topic: String, payload: String, ts: DateTime<Utc>) {
        self.latest.insert(topic.clone(), (payload.clone(), ts));
        self.inbox.publish(StreamEvent { topic, payload, ts });
    }

    /// Connects if needed, drains the backlog oldest-first, then sends a
    /// pending pump status. Only storage errors are fatal.
    fn flush(&mut self, now: MonoTime) -> Result<(), String> {
        if self.backlog.is_empty() && !self.status_dirty {
            return Ok(());
        }
        if !self.session.is_connected() {
            if (self.link_down && self.stub.is_none()) || now < self.next_connect {
                return Ok(());
            }
            match self.session.connect() {
                Ok(()) => {
                    log::info!("connected to broker {}", self.session.config().broker);
                    self.connect_backoff = RECONNECT_MIN;
                }
                Err(e) => {
                    log::debug!("broker connect failed: {e}");
                    self.next_connect = now + self.connect_backoff;
                    let cap = RECONNECT_MAX.min(self.cfg.settings.wall(self.cfg.settings.sample_period));
                    self.connect_backoff = (self.connect_backoff * 2).min(cap).max(RECONNECT_MIN.min(cap));
                    return Ok(());
                }
            }
        }
        let outcome = self.backlog.drain(&mut self.session).map_err(|e| format!("storage: {e}"))?;
        self.report.delivered += outcome.delivered as u64;
        if let Some(e) = outcome.error {
            log::warn!("publish interrupted after {} record(s): {e}", outcome.delivered);
            return Ok(());
        }
        if self.status_dirty {
            let topic = pump_status_topic(self.prefix());
            let payload = self.controller.relay().status_payload();
            match self.session.publish_message(topic.as_str(), payload.as_bytes(), true) {
                Ok(()) => self.status_dirty = false,
                Err(e) => log::warn!("pump status not published: {e}"),
            }
        }
        Ok(())
    }

    fn poll_commands(&mut self, now: MonoTime) {
        if !self.session.is_connected() {
            return;
        }
        let msgs = match self.session.poll(Duration::ZERO) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("broker link lost: {e}");
                return;
            }
        };
        let cmd_topic = pump_command_topic(self.prefix());
        for m in msgs.into_iter().filter(|m| m.topic == cmd_topic.as_str()) {
            match Action::parse(&m.payload) {
                Ok(action) => {
                    self.manual(action, now);
                }
                Err(e) => log::warn!("ignoring pump command: {e}"),
            }
        }
    }

    fn manual(&mut self, action: Action, now: MonoTime) -> ActuatorCommand {
        let at = self.sim_utc(self.sim_s(now));
        let cmd = ActuatorCommand::manual(action, at, self.cfg.scenario.manual_ttl_s()).expect("ttl is positive");
        log::info!("manual pump {} for {} s", action.as_str(), self.cfg.scenario.manual_ttl_s());
        if self.controller.submit_manual(cmd.clone(), at).is_some() {
            self.relay_changed();
        }
        let _ = self.flush(now);
        cmd
    }

    fn serve_portal(&mut self, now: MonoTime) {
        while let Some((req, reply)) = self.inbox.try_next() {
            self.answer(req, reply, now);
        }
    }

    fn answer(&mut self, req: PortalRequest, reply: Responder, now: MonoTime) {
        let out: PortalReply = match req {
            PortalRequest::State => Ok(self.state_view(now)),
            PortalRequest::Pump(action) => {
                if self.state.phase == Phase::Operational {
                    let cmd = self.manual(action, now);
                    Ok(json!({
                        "ok": true,
                        "pump": self.controller.relay().status_payload(),
                        "source": "manual",
                        "expires_at": cmd.timestamp + chrono::Duration::seconds(cmd.ttl_s.unwrap_or(0) as i64),
                    }))
                } else {
                    Err(PortalError::not_operational(self.state.phase.name()))
                }
            }
            other => self
                .portal
                .handle(&self.state, other)
                .expect("remaining requests belong to the portal"),
        };
        reply.send(out);
    }

    fn state_view(&self, now: MonoTime) -> Value {
        let remaining = self.state.config_remaining(now);
        let relay = self.controller.relay();
        let latest: BTreeMap<_, _> = self
            .latest
            .iter()
            .map(|(t, (p, ts))| (t.clone(), json!({ "payload": p, "ts": ts })))
            .collect();
        let plan = self.agronomy.as_ref().and_then(|a| a.plan.as_ref()).map(|p| {
            let today = self.sim_utc(self.sim_s(now)).date_naive();
            json!({
                "taw_mm": p.taw_mm,
                "raw_mm": p.raw_mm,
                "events": p.events.len(),
                "next_event": p.events.iter().find(|e| e.date >= today),
            })
        });
        json!({
            "device_id": self.cfg.settings.device_id,
            "phase": self.state.phase.name(),
            "fault": match &self.state.phase { Phase::Fault { reason } => Some(reason.clone()), _ => None },
            "config_remaining_s": remaining.map(|d| d.as_secs_f64()),
            "config_remaining_nominal_s": remaining.map(|d| self.cfg.settings.nominal(d).as_secs_f64()),
            "time_scale": self.cfg.settings.time_scale,
            "sample_period_s": self.cfg.settings.sample_period.as_secs_f64(),
            "sim_time_s": self.sim_s(now),
            "application_committed": self.portal.data().application().is_some(),
            "broker": { "address": self.session.config().broker, "connected": self.session.is_connected() },
            "backlog": self.backlog.len(),
            "pump": { "on": relay.pump_on, "since": relay.since, "source": relay.last_source },
            "latest": latest,
            "plan": plan,
        })
    }
}
