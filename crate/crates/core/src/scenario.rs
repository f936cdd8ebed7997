//! Scenario files: what the simulated device senses, which networks it
//! can see, and which faults to inject. TOML, paths relative to the file.
//!
//! ```toml
//! device_id = "fieldpod-01"
//! start = "2021-03-01T06:00:00Z"
//! sample_period_s = 60
//! latitude_deg = -20.0
//! weather = "weather.csv"
//!
//! [sensors]
//! replay = "trace.csv"          # or a [sensors.generator] table
//!
//! [[networks]]
//! ssid = "garden"
//! rssi_dbm = -48
//! security = "WPA2"
//!
//! [[broker_faults]]
//! down_at_s = 600
//! up_at_s = 900
//!
//! [storage]
//! fail_at_s = 1800
//! ```

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

use crate::actuation::{ActuationError, DecisionPolicy, DEFAULT_MANUAL_TTL_S};
use crate::irrigation::{read_weather_csv, IrrigationError, WeatherDay};
use crate::portal::{ApplicationForm, ScanEntry};
use crate::sensing::{GeneratorSpec, ScenarioStream, SensingError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("sensor stream: {0}")]
    Sensors(#[from] SensingError),
    #[error("weather: {0}")]
    Weather(#[from] IrrigationError),
    #[error("actuation: {0}")]
    Actuation(#[from] ActuationError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SensorSource {
    pub replay: Option<PathBuf>,
    pub generator: Option<GeneratorTable>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GeneratorTable {
    #[serde(flatten)]
    pub spec: GeneratorSpec,
    /// Record spacing; defaults to the sample period.
    pub step_s: Option<f64>,
}

/// Link outage over `[down_at_s, up_at_s)` of simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInterval {
    pub down_at_s: f64,
    pub up_at_s: f64,
}

impl FaultInterval {
    pub fn contains(&self, t: f64) -> bool {
        self.down_at_s <= t && t < self.up_at_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StorageFaults {
    /// From this simulated time on, every write to the data directory fails.
    pub fail_at_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ActuationOverrides {
    pub sm_low: Option<f64>,
    pub sm_high: Option<f64>,
    pub manual_ttl_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    device_id: Option<String>,
    start: Option<DateTime<Utc>>,
    sample_period_s: Option<f64>,
    topic_prefix: Option<String>,
    latitude_deg: Option<f64>,
    weather: Option<PathBuf>,
    efficiency: Option<f64>,
    #[serde(default)]
    sensors: SensorSource,
    #[serde(default)]
    networks: Vec<ScanEntry>,
    #[serde(default)]
    broker_faults: Vec<FaultInterval>,
    #[serde(default)]
    storage: StorageFaults,
    application: Option<ApplicationForm>,
    #[serde(default)]
    actuation: ActuationOverrides,
}

/// A loaded scenario with its referenced files already read.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub device_id: Option<String>,
    /// Wall-clock date the simulated run starts at.
    pub start: DateTime<Utc>,
    pub sample_period_s: Option<f64>,
    pub topic_prefix: Option<String>,
    pub latitude_deg: Option<f64>,
    pub weather: Vec<WeatherDay>,
    pub efficiency: Option<f64>,
    pub sensors: SensorSpec,
    pub networks: Vec<ScanEntry>,
    pub broker_faults: Vec<FaultInterval>,
    pub storage: StorageFaults,
    /// Pre-filled application input, committed as if typed in the portal.
    pub application: Option<ApplicationForm>,
    pub actuation: ActuationOverrides,
}

#[derive(Debug, Clone)]
pub enum SensorSpec {
    Replay(ScenarioStream),
    Generator { spec: GeneratorSpec, step_s: Option<f64> },
}

impl SensorSpec {
    /// Materializes the stream for a run of `duration_s`.
    pub fn stream(&self, duration_s: f64, sample_period_s: f64) -> ScenarioStream {
        match self {
            SensorSpec::Replay(s) => s.clone(),
            SensorSpec::Generator { spec, step_s } => spec.generate(duration_s, step_s.unwrap_or(sample_period_s)),
        }
    }
}

pub fn default_start() -> DateTime<Utc> {
    "2021-03-01T06:00:00Z".parse().expect("valid literal")
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            device_id: None,
            start: default_start(),
            sample_period_s: None,
            topic_prefix: None,
            latitude_deg: None,
            weather: Vec::new(),
            efficiency: None,
            sensors: SensorSpec::Generator {
                spec: GeneratorSpec::default(),
                step_s: None,
            },
            networks: Vec::new(),
            broker_faults: Vec::new(),
            storage: StorageFaults::default(),
            application: None,
            actuation: ActuationOverrides::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Parses scenario text, resolving file references against `base`.
    /// `origin` only labels errors.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let read = |rel: &Path| -> Result<std::fs::File, ScenarioError> {
            let p = base.join(rel);
            std::fs::File::open(&p).map_err(|source| ScenarioError::Read { path: p, source })
        };

        let sensors = match (file.sensors.replay, file.sensors.generator) {
            (Some(_), Some(_)) => {
                return Err(ScenarioError::Invalid(
                    "sensors: give either replay or generator, not both".into(),
                ))
            }
            (Some(rel), None) => SensorSpec::Replay(ScenarioStream::from_csv_reader(read(&rel)?)?),
            (None, Some(g)) => SensorSpec::Generator {
                spec: g.spec,
                step_s: g.step_s,
            },
            (None, None) => SensorSpec::Generator {
                spec: GeneratorSpec::default(),
                step_s: None,
            },
        };
        let weather = match &file.weather {
            Some(rel) => read_weather_csv(read(rel)?)?,
            None => Vec::new(),
        };

        let scenario = Scenario {
            device_id: file.device_id,
            start: file.start.unwrap_or_else(default_start),
            sample_period_s: file.sample_period_s,
            topic_prefix: file.topic_prefix,
            latitude_deg: file.latitude_deg,
            weather,
            efficiency: file.efficiency,
            sensors,
            networks: file.networks,
            broker_faults: file.broker_faults,
            storage: file.storage,
            application: file.application,
            actuation: file.actuation,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut faults = self.broker_faults.clone();
        faults.sort_by(|a, b| a.down_at_s.total_cmp(&b.down_at_s));
        for f in &faults {
            if !(f.down_at_s >= 0.0 && f.down_at_s < f.up_at_s) {
                return Err(ScenarioError::Invalid(format!(
                    "broker fault [{}, {}) is empty or negative",
                    f.down_at_s, f.up_at_s
                )));
            }
        }
        for w in faults.windows(2) {
            if w[1].down_at_s < w[0].up_at_s {
                return Err(ScenarioError::Invalid(format!(
                    "broker faults [{}, {}) and [{}, {}) overlap",
                    w[0].down_at_s, w[0].up_at_s, w[1].down_at_s, w[1].up_at_s
                )));
            }
        }
        if self.networks.iter().filter(|n| n.connected).count() > 1 {
            return Err(ScenarioError::Invalid("more than one network marked connected".into()));
        }
        if let Some(p) = self.sample_period_s {
            if !(p > 0.0 && p.is_finite()) {
                return Err(ScenarioError::Invalid(format!("sample_period_s {p} must be positive")));
            }
        }
        if let Some(lat) = self.latitude_deg {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(ScenarioError::Invalid(format!("latitude_deg {lat} out of range")));
            }
        }
        self.policy_override()?;
        Ok(())
    }

    pub fn link_down_at(&self, sim_s: f64) -> bool {
        self.broker_faults.iter().any(|f| f.contains(sim_s))
    }

    pub fn manual_ttl_s(&self) -> u64 {
        self.actuation.manual_ttl_s.unwrap_or(DEFAULT_MANUAL_TTL_S)
    }

    /// An explicit threshold band, when both ends are given.
    pub fn policy_override(&self) -> Result<Option<DecisionPolicy>, ScenarioError> {
        match (self.actuation.sm_low, self.actuation.sm_high) {
            (Some(lo), Some(hi)) => Ok(Some(DecisionPolicy::new(lo, hi)?)),
            (None, None) => Ok(None),
            _ => Err(ScenarioError::Invalid(
                "actuation: give both sm_low and sm_high or neither".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, dir: &Path) -> Result<Scenario, ScenarioError> {
        Scenario::parse(text, dir, Path::new("test.toml"))
    }

    #[test]
    fn full_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("trace.csv"), "offset_s,kind,value\n0,temp,24.5\n0,sm,30\n").unwrap();
        std::fs::write(
            dir.path().join("w.csv"),
            "date,tmin_c,tmax_c,rain_mm\n2021-03-01,12,26,0\n",
        )
        .unwrap();
        let s = parse(
            r#"
device_id = "pod-7"
start = "2021-03-01T00:00:00Z"
latitude_deg = -20
weather = "w.csv"
[sensors]
replay = "trace.csv"
[[networks]]
ssid = "garden"
rssi_dbm = -48
security = "WPA2"
[[broker_faults]]
down_at_s = 100
up_at_s = 200
[storage]
fail_at_s = 50
[actuation]
sm_low = 20
sm_high = 35
"#,
            dir.path(),
        )
        .unwrap();
        assert_eq!(s.device_id.as_deref(), Some("pod-7"));
        assert_eq!(s.weather.len(), 1);
        assert!(matches!(&s.sensors, SensorSpec::Replay(st) if st.len() == 2));
        assert!(s.link_down_at(100.0) && s.link_down_at(199.9) && !s.link_down_at(200.0));
        assert_eq!(s.policy_override().unwrap().unwrap().sm_high, 35.0);
        assert_eq!(s.storage.fail_at_s, Some(50.0));
    }

    #[test]
    fn empty_file_uses_generator() {
        let s = parse("", Path::new(".")).unwrap();
        assert!(matches!(s.sensors, SensorSpec::Generator { .. }));
        assert!(s.networks.is_empty());
        assert_eq!(s.manual_ttl_s(), 1800);
    }

    #[test]
    fn generator_table() {
        let s = parse(
            "[sensors.generator]\nseed = 9\nstep_s = 30\n[sensors.generator.sm]\nbaseline = 25\namplitude = 5\n",
            Path::new("."),
        )
        .unwrap();
        let SensorSpec::Generator { spec, step_s } = &s.sensors else {
            panic!()
        };
        assert_eq!((spec.seed, *step_s), (9, Some(30.0)));
        assert_eq!(spec.temp, GeneratorSpec::default().temp);
        assert_eq!(spec.sm.unwrap().baseline, 25.0);
    }

    #[test]
    fn rejects_overlapping_faults() {
        let text = "[[broker_faults]]\ndown_at_s = 0\nup_at_s = 10\n[[broker_faults]]\ndown_at_s = 5\nup_at_s = 20\n";
        assert!(matches!(parse(text, Path::new(".")), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn rejects_missing_replay_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse("[sensors]\nreplay = \"nope.csv\"\n", dir.path()).unwrap_err();
        assert!(matches!(err, ScenarioError::Read { .. }));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(parse("colour = 3\n", Path::new(".")), Err(ScenarioError::Parse { .. })));
    }
}
