//! Python bindings: the agronomy maths, pump decisions, the telemetry
//! backlog and a whole simulated device run against an in-process broker.

// pyo3 0.22 macros trip this lint on every fallible binding
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::{NaiveDate, Utc};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use fieldpod::actuation::{self, DecisionPolicy, RelayState};
use fieldpod::clock::SystemClock;
use fieldpod::irrigation::{self, Catalog, IrrigationPlan, WeatherDay, DEFAULT_EFFICIENCY};
use fieldpod::runner::{self, BrokerTarget, Outcome, RunConfig};
use fieldpod::runtime::{ApplicationInput, RuntimeSettings};
use fieldpod::scenario::Scenario;
use fieldpod::sensing::{SensorKind, SensorReading};
use fieldpod::telemetry::{self, BacklogStore, SyncPolicy, TelemetryRecord};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn date(s: &str) -> PyResult<NaiveDate> {
    s.parse().map_err(|e| value_err(format!("bad date {s:?}: {e}")))
}

/// Names of the seeded crops.
#[pyfunction]
fn crops() -> Vec<String> {
    Catalog::seeded().crop_names()
}

/// Names of the seeded soils.
#[pyfunction]
fn soils() -> Vec<String> {
    Catalog::seeded().soil_names()
}

/// Extraterrestrial radiation, MJ m⁻² day⁻¹.
#[pyfunction]
fn ra(latitude_deg: f64, day_of_year: u32) -> PyResult<f64> {
    irrigation::ra_extraterrestrial(latitude_deg.to_radians(), day_of_year).map_err(value_err)
}

/// Reference evapotranspiration for one day, mm.
#[pyfunction]
fn et0(tmin_c: f64, tmax_c: f64, latitude_deg: f64, on: &str) -> PyResult<f64> {
    let day = WeatherDay {
        date: date(on)?,
        tmin_c,
        tmax_c,
        rain_mm: 0.0,
    };
    irrigation::et0_hargreaves(&day, latitude_deg.to_radians()).map_err(value_err)
}

/// Crop coefficient `days_after_planting` days into the season.
#[pyfunction]
fn kc(crop: &str, days_after_planting: i64) -> PyResult<f64> {
    let catalog = Catalog::seeded();
    let c = catalog.crop(crop).map_err(value_err)?;
    irrigation::kc_on(c, days_after_planting).map_err(value_err)
}

fn plan_dict<'py>(py: Python<'py>, plan: &IrrigationPlan) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new_bound(py);
    out.set_item("taw_mm", plan.taw_mm)?;
    out.set_item("raw_mm", plan.raw_mm)?;
    let stages = PyList::empty_bound(py);
    for s in &plan.stage_plan.stages {
        let d = PyDict::new_bound(py);
        d.set_item("stage", s.stage.name())?;
        d.set_item("start", s.start.to_string())?;
        d.set_item("length_days", s.length_days)?;
        stages.append(d)?;
    }
    out.set_item("stages", stages)?;
    let events = PyList::empty_bound(py);
    for e in &plan.events {
        let d = PyDict::new_bound(py);
        d.set_item("date", e.date.to_string())?;
        d.set_item("net_depth_mm", e.net_depth_mm)?;
        d.set_item("gross_depth_mm", e.gross_depth_mm)?;
        d.set_item("runtime_min", e.runtime_min)?;
        events.append(d)?;
    }
    out.set_item("events", events)?;
    let depletion: Vec<f64> = plan.days.iter().map(|d| d.depletion_end_mm).collect();
    out.set_item("depletion_mm", depletion)?;
    Ok(out)
}

/// Season plan. `weather` is a list of `(date, tmin_c, tmax_c, rain_mm)`.
#[pyfunction]
#[pyo3(signature = (crop, soil, plant_date, area_m2, flow_lph, weather, latitude_deg, efficiency=DEFAULT_EFFICIENCY))]
#[allow(clippy::too_many_arguments)]
fn plan<'py>(
    py: Python<'py>,
    crop: &str,
    soil: &str,
    plant_date: &str,
    area_m2: f64,
    flow_lph: f64,
    weather: Vec<(String, f64, f64, f64)>,
    latitude_deg: f64,
    efficiency: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let catalog = Catalog::seeded();
    let input = ApplicationInput {
        crop_name: crop.into(),
        soil_name: soil.into(),
        plant_date: date(plant_date)?,
        area_m2,
        flow_lph,
    };
    input.validate(&catalog).map_err(value_err)?;
    let days = weather
        .into_iter()
        .map(|(d, tmin_c, tmax_c, rain_mm)| {
            Ok(WeatherDay {
                date: date(&d)?,
                tmin_c,
                tmax_c,
                rain_mm,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let c = catalog.crop(crop).map_err(value_err)?;
    let s = catalog.soil(soil).map_err(value_err)?;
    let p = irrigation::simulate_balance(&input, c, s, &days, efficiency, latitude_deg.to_radians())
        .map_err(value_err)?;
    plan_dict(py, &p)
}

/// MQTT topic for a sensor code (`temp`, `humid`, `sm`).
#[pyfunction]
#[pyo3(signature = (kind, prefix="/usp"))]
fn topic_for(kind: &str, prefix: &str) -> PyResult<String> {
    let k: SensorKind = kind.parse().map_err(value_err)?;
    Ok(telemetry::topic_for(k, prefix).map_err(value_err)?.as_str().to_string())
}

/// Wire payload for a reading value.
#[pyfunction]
fn encode_payload(value: f64) -> String {
    telemetry::format_one_decimal(value)
}

/// Hysteresis band for automatic pump control, in %VWC.
#[pyclass(name = "PumpPolicy")]
struct PyPumpPolicy(DecisionPolicy);

#[pymethods]
impl PyPumpPolicy {
    #[new]
    fn new(sm_low: f64, sm_high: f64) -> PyResult<Self> {
        DecisionPolicy::new(sm_low, sm_high).map(Self).map_err(value_err)
    }

    /// Band derived from a seeded soil and crop.
    #[staticmethod]
    fn for_planting(soil: &str, crop: &str) -> PyResult<Self> {
        let catalog = Catalog::seeded();
        let s = catalog.soil(soil).map_err(value_err)?;
        let c = catalog.crop(crop).map_err(value_err)?;
        DecisionPolicy::from_soil(s, c).map(Self).map_err(value_err)
    }

    #[getter]
    fn sm_low(&self) -> f64 {
        self.0.sm_low
    }

    #[getter]
    fn sm_high(&self) -> f64 {
        self.0.sm_high
    }

    /// `"on"`, `"off"` or `None` for no change.
    fn decide(&self, sm: f64, pump_on: bool) -> Option<&'static str> {
        let now = Utc::now();
        let relay = RelayState {
            pump_on,
            ..RelayState::off(now)
        };
        actuation::decide(&self.0, sm, &relay, now).map(|c| c.action.as_str())
    }
}

/// The on-disk telemetry backlog.
#[pyclass(name = "Backlog")]
struct PyBacklog(BacklogStore);

#[pymethods]
impl PyBacklog {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        let (store, _) = BacklogStore::open(path, SyncPolicy::Fsync).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self(store))
    }

    /// Queues one reading; returns its sequence number.
    #[pyo3(signature = (kind, value, device_id="fieldpod", prefix="/usp"))]
    fn append(&self, kind: &str, value: f64, device_id: &str, prefix: &str) -> PyResult<u64> {
        let reading = SensorReading {
            kind: kind.parse().map_err(value_err)?,
            value,
            timestamp: Utc::now(),
            device_id: device_id.into(),
        };
        let io = |e: telemetry::BacklogError| PyRuntimeError::new_err(e.to_string());
        let seq = self.0.next_seq().map_err(io)?;
        let rec = TelemetryRecord::from_reading(seq, &reading, prefix).map_err(value_err)?;
        self.0.append(&rec).map_err(io)?;
        Ok(seq)
    }

    /// `(seq, topic, payload)` for every unacknowledged record.
    fn pending(&self) -> Vec<(u64, String, String)> {
        self.0
            .pending()
            .into_iter()
            .map(|r| (r.seq, r.topic.as_str().to_string(), String::from_utf8_lossy(&r.payload).into_owned()))
            .collect()
    }

    fn ack_through(&self, seq: u64) -> PyResult<()> {
        self.0.ack_through(seq).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Runs a simulated device against an in-process broker and returns a
/// summary of what happened.
#[pyfunction]
#[pyo3(signature = (data_dir, duration_s, scenario=None, time_scale=600.0, config_window_s=60.0, sample_period_s=None))]
fn run_device<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    duration_s: f64,
    scenario: Option<PathBuf>,
    time_scale: f64,
    config_window_s: f64,
    sample_period_s: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let scenario = match scenario {
        Some(p) => Scenario::load(&p).map_err(value_err)?,
        None => Scenario::default(),
    };
    let mut settings = RuntimeSettings {
        config_window: Duration::from_secs_f64(config_window_s),
        time_scale,
        ..Default::default()
    };
    if let Some(p) = sample_period_s.or(scenario.sample_period_s) {
        settings.sample_period = Duration::from_secs_f64(p);
    }
    if let Some(id) = &scenario.device_id {
        settings.device_id = id.clone();
    }
    let cfg = RunConfig {
        settings,
        duration: Some(Duration::from_secs_f64(duration_s)),
        data_dir,
        portal_addr: None,
        broker: BrokerTarget::Stub,
        scenario,
    };
    let report = py
        .allow_threads(|| runner::run(cfg, Arc::new(SystemClock::new()), |_| {}))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let out = PyDict::new_bound(py);
    match &report.outcome {
        Outcome::Clean => out.set_item("fault", py.None())?,
        Outcome::Fault(reason) => out.set_item("fault", reason)?,
    }
    out.set_item("samples", report.samples)?;
    out.set_item("readings", report.readings)?;
    out.set_item("rejected", report.rejected)?;
    out.set_item("delivered", report.delivered)?;
    out.set_item("backlog_remaining", report.backlog_remaining)?;
    out.set_item("pump_on", report.relay.pump_on)?;
    let published: Vec<(String, String)> = report
        .stub_log
        .unwrap_or_default()
        .into_iter()
        .map(|m| (m.topic, String::from_utf8_lossy(&m.payload).into_owned()))
        .collect();
    out.set_item("published", published)?;
    match &report.plan {
        Some(p) => out.set_item("plan", plan_dict(py, p)?)?,
        None => out.set_item("plan", py.None())?,
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "fieldpod")]
fn fieldpod_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(crops, m)?)?;
    m.add_function(wrap_pyfunction!(soils, m)?)?;
    m.add_function(wrap_pyfunction!(ra, m)?)?;
    m.add_function(wrap_pyfunction!(et0, m)?)?;
    m.add_function(wrap_pyfunction!(kc, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(topic_for, m)?)?;
    m.add_function(wrap_pyfunction!(encode_payload, m)?)?;
    m.add_function(wrap_pyfunction!(run_device, m)?)?;
    m.add_class::<PyPumpPolicy>()?;
    m.add_class::<PyBacklog>()?;
    Ok(())
}
