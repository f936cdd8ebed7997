//! Device lifecycle: time-boxed configuration mode, one-time setup, then
//! the operational sampling loop.
//!
//! The machine is driven by [`DeviceState::tick`] with an injected
//! [`MonoTime`] and answers with [`Effect`]s for the control loop to carry
//! out. It never performs I/O itself except through [`DataStore`] when an
//! application input is committed.

use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::MonoTime;
use crate::irrigation::{Catalog, IrrigationError};
use crate::telemetry::{self, DEFAULT_BROKER, DEFAULT_TOPIC_PREFIX};

pub const DEFAULT_CONFIG_WINDOW: Duration = Duration::from_secs(120);
pub const DEFAULT_SAMPLE_PERIOD: Duration = Duration::from_secs(60);
pub const DEVICE_DATA_FILE: &str = "device.json";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid setting {field}: {reason}")]
    InvalidSetting { field: &'static str, reason: String },
    #[error("operation requires configuration mode, device is {0}")]
    ModeViolation(&'static str),
    #[error("invalid application input {field}: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("device data storage failed: {0}")]
    Storage(#[from] io::Error),
    #[error("device data file is corrupt: {0}")]
    CorruptData(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeSettings {
    /// Nominal length of the configuration window.
    pub config_window: Duration,
    /// Nominal (simulated) time between sensor samples.
    pub sample_period: Duration,
    pub broker_address: String,
    pub topic_prefix: String,
    pub device_id: String,
    /// Simulation speed-up: nominal seconds per wall-clock second.
    pub time_scale: f64,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        RuntimeSettings {
            config_window: DEFAULT_CONFIG_WINDOW,
            sample_period: DEFAULT_SAMPLE_PERIOD,
            broker_address: DEFAULT_BROKER.to_string(),
            topic_prefix: DEFAULT_TOPIC_PREFIX.to_string(),
            device_id: "fieldpod".to_string(),
            time_scale: 1.0,
        }
    }
}

impl RuntimeSettings {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |field, reason: &str| {
            Err(RuntimeError::InvalidSetting {
                field,
                reason: reason.to_string(),
            })
        };
        if self.config_window.is_zero() {
            return bad("config_window", "must be greater than zero");
        }
        if self.sample_period.is_zero() {
            return bad("sample_period", "must be greater than zero");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time_scale", "must be a positive finite number");
        }
        if telemetry::validate_prefix(&self.topic_prefix).is_err() {
            return bad("topic_prefix", "must start with '/' and contain no wildcards");
        }
        if self.device_id.trim().is_empty() {
            return bad("device_id", "must not be empty");
        }
        if self.broker_address.trim().is_empty() {
            return bad("broker_address", "must not be empty");
        }
        Ok(())
    }

    /// Wall-clock length of a nominal duration under `time_scale`.
    pub fn wall(&self, nominal: Duration) -> Duration {
        nominal.div_f64(self.time_scale)
    }

    /// Nominal (simulated) length of a wall-clock duration.
    pub fn nominal(&self, wall: Duration) -> Duration {
        wall.mul_f64(self.time_scale)
    }
}

/// What the user selects in the application form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationInput {
    pub crop_name: String,
    pub soil_name: String,
    pub plant_date: NaiveDate,
    pub area_m2: f64,
    pub flow_lph: f64,
}

impl ApplicationInput {
    pub fn validate(&self, catalog: &Catalog) -> Result<(), RuntimeError> {
        let lookup = |e: IrrigationError, field| RuntimeError::Validation {
            field,
            reason: e.to_string(),
        };
        catalog.crop(&self.crop_name).map_err(|e| lookup(e, "crop"))?;
        catalog.soil(&self.soil_name).map_err(|e| lookup(e, "soil"))?;
        if !(self.area_m2 > 0.0 && self.area_m2.is_finite()) {
            return Err(RuntimeError::Validation {
                field: "area_m2",
                reason: format!("{} is not a positive area", self.area_m2),
            });
        }
        if !(self.flow_lph > 0.0 && self.flow_lph.is_finite()) {
            return Err(RuntimeError::Validation {
                field: "flow_lph",
                reason: format!("{} is not a positive flow", self.flow_lph),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Security {
    #[default]
    Open,
    #[serde(rename = "WPA2")]
    Wpa2,
}

/// Persisted network selection. The passphrase stays on the device; it is
/// never echoed by the portal or logged.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NetworkRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub security: Option<Security>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passphrase: Option<String>,
}

impl std::fmt::Debug for NetworkRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkRecord")
            .field("ssid", &self.ssid)
            .field("security", &self.security)
            .field("passphrase", &self.passphrase.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

/// Contents of `device.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DeviceData {
    pub crop: Option<String>,
    pub soil: Option<String>,
    pub plant_date: Option<NaiveDate>,
    pub area_m2: Option<f64>,
    pub flow_lph: Option<f64>,
    #[serde(default)]
    pub network: NetworkRecord,
}

impl DeviceData {
    pub fn application(&self) -> Option<ApplicationInput> {
        Some(ApplicationInput {
            crop_name: self.crop.clone()?,
            soil_name: self.soil.clone()?,
            plant_date: self.plant_date?,
            area_m2: self.area_m2?,
            flow_lph: self.flow_lph?,
        })
    }

    pub fn set_application(&mut self, input: &ApplicationInput) {
        self.crop = Some(input.crop_name.clone());
        self.soil = Some(input.soil_name.clone());
        self.plant_date = Some(input.plant_date);
        self.area_m2 = Some(input.area_m2);
        self.flow_lph = Some(input.flow_lph);
    }
}

/// The device data file, or nothing at all for ephemeral runs.
#[derive(Debug, Clone)]
pub struct DataStore {
    path: Option<PathBuf>,
}

impl DataStore {
    pub fn in_dir(dir: &Path) -> Self {
        DataStore {
            path: Some(dir.join(DEVICE_DATA_FILE)),
        }
    }

    pub fn ephemeral() -> Self {
        DataStore { path: None }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn load(&self) -> Result<DeviceData, RuntimeError> {
        let Some(path) = &self.path else {
            return Ok(DeviceData::default());
        };
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| RuntimeError::CorruptData(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(DeviceData::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes atomically through a temporary file.
    pub fn save(&self, data: &DeviceData) -> Result<(), RuntimeError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(data).expect("device data serializes");
        std::fs::write(&tmp, body)?;
        std::fs::File::open(&tmp)?.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    ConfigMode { deadline: MonoTime },
    SettingUp,
    Operational,
    Fault { reason: String },
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::ConfigMode { .. } => "config_mode",
            Phase::SettingUp => "setting_up",
            Phase::Operational => "operational",
            Phase::Fault { .. } => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    /// Close the portal's write endpoints.
    DisablePortalConfig,
    /// Connect, create topics, compute the plan.
    RunOneTimeSetup { application_committed: bool },
    /// Sample the sensor set for the boundary at `at`.
    SampleSensors { at: MonoTime },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub phase: Phase,
    pub boot_time: MonoTime,
    sample_interval: Duration,
    next_sample: Option<MonoTime>,
}

/// Boots into configuration mode and loads any previously saved input.
pub fn boot(
    settings: &RuntimeSettings,
    now: MonoTime,
    store: &DataStore,
) -> Result<(DeviceState, DeviceData), RuntimeError> {
    let state = DeviceState::boot(settings, now)?;
    let data = store.load()?;
    Ok((state, data))
}

impl DeviceState {
    pub fn boot(settings: &RuntimeSettings, now: MonoTime) -> Result<Self, RuntimeError> {
        settings.validate()?;
        Ok(DeviceState {
            phase: Phase::ConfigMode {
                deadline: now + settings.wall(settings.config_window),
            },
            boot_time: now,
            sample_interval: settings.wall(settings.sample_period),
            next_sample: None,
        })
    }

    pub fn is_config_mode(&self) -> bool {
        matches!(self.phase, Phase::ConfigMode { .. })
    }

    /// When the next sample falls due, once sampling has started.
    pub fn next_sample_at(&self) -> Option<MonoTime> {
        self.next_sample
    }

    /// Wall time left in the configuration window.
    pub fn config_remaining(&self, now: MonoTime) -> Option<Duration> {
        match self.phase {
            Phase::ConfigMode { deadline } => Some(deadline.since(now)),
            _ => None,
        }
    }

    pub fn tick(self, now: MonoTime, inputs_committed: bool) -> (DeviceState, Vec<Effect>) {
        match self.phase {
            Phase::ConfigMode { deadline } if now < deadline => (self, vec![]),
            // sampling is anchored to the deadline, not to whenever the
            // loop next comes round
            Phase::ConfigMode { deadline } => (
                DeviceState {
                    phase: Phase::SettingUp,
                    next_sample: Some(deadline),
                    ..self
                },
                vec![Effect::DisablePortalConfig],
            ),
            Phase::SettingUp => (
                DeviceState {
                    phase: Phase::Operational,
                    ..self
                },
                vec![Effect::RunOneTimeSetup {
                    application_committed: inputs_committed,
                }],
            ),
            Phase::Operational => {
                let due = self.next_sample.unwrap_or(now);
                if now >= due {
                    let next = DeviceState {
                        next_sample: Some(due + self.sample_interval),
                        ..self
                    };
                    (next, vec![Effect::SampleSensors { at: due }])
                } else {
                    (self, vec![])
                }
            }
            Phase::Fault { .. } => (self, vec![]),
        }
    }

    /// Validates and saves the application input. Only allowed while the
    /// configuration window is open.
    pub fn commit_application(
        &self,
        input: &ApplicationInput,
        catalog: &Catalog,
        data: &mut DeviceData,
        store: &DataStore,
    ) -> Result<DeviceState, RuntimeError> {
        if !self.is_config_mode() {
            return Err(RuntimeError::ModeViolation(self.phase.name()));
        }
        input.validate(catalog)?;
        let mut updated = data.clone();
        updated.set_application(input);
        store.save(&updated)?;
        *data = updated;
        Ok(self.clone())
    }

    pub fn into_fault(self, reason: impl Into<String>) -> DeviceState {
        DeviceState {
            phase: Phase::Fault { reason: reason.into() },
            ..self
        }
    }
}
