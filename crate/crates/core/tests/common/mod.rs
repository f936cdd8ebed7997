//! Shared helpers for the integration tests, including naive oracles for
//! the agronomy code. The oracles are deliberately written from the
//! formulas, not from the library, and favour plainness over speed.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{Datelike, Days, NaiveDate};
use fieldpod::clock::SystemClock;
use fieldpod::irrigation::{CropProfile, SoilProfile, WeatherDay};
use fieldpod::runner::{self, BrokerTarget, Ready, RunConfig, RunReport};
use fieldpod::runtime::RuntimeSettings;
use fieldpod::scenario::Scenario;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

// ---------------------------------------------------------------- oracles

pub fn oracle_ra(lat: f64, j: u32) -> f64 {
    let pi = std::f64::consts::PI;
    let x = 2.0 * pi * j as f64 / 365.0;
    let dr = 1.0 + 0.033 * x.cos();
    let decl = 0.409 * (x - 1.39).sin();
    let ws = (-(lat.tan()) * decl.tan()).acos();
    let a = ws * lat.sin() * decl.sin();
    let b = lat.cos() * decl.cos() * ws.sin();
    24.0 * 60.0 / pi * 0.0820 * dr * (a + b)
}

pub fn oracle_et0(tmin: f64, tmax: f64, lat: f64, j: u32) -> f64 {
    let tmean = 0.5 * (tmin + tmax);
    let v = 0.0023 * (tmean + 17.8) * (tmax - tmin).sqrt() * 0.408 * oracle_ra(lat, j);
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Four-stage trapezoid; the late ramp ends on the season's last day.
pub fn oracle_kc(len: [u32; 4], ini: f64, mid: f64, end: f64, day: u32) -> f64 {
    let s_dev = len[0];
    let s_mid = s_dev + len[1];
    let s_late = s_mid + len[2];
    let last = s_late + len[3] - 1;
    if day < s_dev {
        ini
    } else if day < s_mid {
        ini + (mid - ini) * (day - s_dev) as f64 / len[1] as f64
    } else if len[3] == 1 && day == last {
        end
    } else if day <= s_late {
        mid
    } else {
        mid + (end - mid) * (day - s_late) as f64 / (len[3] - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEvent {
    pub date: NaiveDate,
    pub net: f64,
    pub gross: f64,
    pub runtime_min: f64,
}

#[derive(Debug, Clone, Default)]
pub struct OracleRun {
    pub events: Vec<OracleEvent>,
    /// End-of-day depletion.
    pub depletion: Vec<f64>,
    pub etc_applied: f64,
    pub rain_applied: f64,
    pub irrigated: f64,
}

pub struct Instance {
    pub crop: CropProfile,
    pub soil: SoilProfile,
    pub plant: NaiveDate,
    pub weather: Vec<WeatherDay>,
    pub lat: f64,
    pub efficiency: f64,
    pub area: f64,
    pub flow: f64,
}

pub fn oracle_balance(inst: &Instance) -> OracleRun {
    let c = &inst.crop;
    let taw = 1000.0 * (inst.soil.fc - inst.soil.wp) * c.root_depth_m;
    let raw = c.depletion_fraction_p * taw;
    let weather: HashMap<NaiveDate, &WeatherDay> = inst.weather.iter().map(|w| (w.date, w)).collect();
    let season: u32 = c.stage_len.iter().sum();
    let mut out = OracleRun::default();
    let mut d = 0.0;
    for day in 0..season {
        let date = inst.plant + Days::new(day as u64);
        let w = weather[&date];
        let et0 = oracle_et0(w.tmin_c, w.tmax_c, inst.lat, date.ordinal());
        let etc = oracle_kc(c.stage_len, c.kc_ini, c.kc_mid, c.kc_end, day) * et0;
        let mut next = d + etc - w.rain_mm;
        let mut etc_used = etc;
        let mut rain_used = w.rain_mm;
        if next < 0.0 {
            rain_used = d + etc;
            next = 0.0;
        }
        if next > taw {
            etc_used = etc - (next - taw);
            next = taw;
        }
        out.etc_applied += etc_used;
        out.rain_applied += rain_used;
        if next >= raw {
            let gross = next / inst.efficiency;
            out.events.push(OracleEvent {
                date,
                net: next,
                gross,
                runtime_min: gross * inst.area / inst.flow * 60.0,
            });
            out.irrigated += next;
            next = 0.0;
        }
        out.depletion.push(next);
        d = next;
    }
    out
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let stage_len = [
        rng.gen_range(1..=30),
        rng.gen_range(1..=30),
        rng.gen_range(1..=30),
        rng.gen_range(1..=30),
    ];
    let crop = CropProfile {
        name: "random".into(),
        stage_len,
        kc_ini: rng.gen_range(0.2..1.0),
        kc_mid: rng.gen_range(0.8..1.3),
        kc_end: rng.gen_range(0.2..1.2),
        root_depth_m: rng.gen_range(0.2..1.5),
        depletion_fraction_p: rng.gen_range(0.2..0.7),
    };
    let wp = rng.gen_range(0.03..0.25);
    let soil = SoilProfile {
        name: "random".into(),
        fc: rng.gen_range(wp + 0.05..0.55),
        wp,
    };
    let plant = NaiveDate::from_ymd_opt(rng.gen_range(2019..=2023), 1, 1).unwrap() + Days::new(rng.gen_range(0..365));
    let season: u32 = stage_len.iter().sum();
    let weather = (0..season)
        .map(|i| {
            let tmin = rng.gen_range(-5.0..25.0);
            WeatherDay {
                date: plant + Days::new(i as u64),
                tmin_c: tmin,
                tmax_c: tmin + rng.gen_range(0.0..18.0),
                rain_mm: if rng.gen_bool(0.3) { rng.gen_range(0.0..40.0) } else { 0.0 },
            }
        })
        .collect();
    Instance {
        crop,
        soil,
        plant,
        weather,
        lat: rng.gen_range(-60.0f64..60.0).to_radians(),
        efficiency: rng.gen_range(0.5..=1.0),
        area: rng.gen_range(1.0..50.0),
        flow: rng.gen_range(50.0..2000.0),
    }
}

/// Rain-free days with the same temperature extremes throughout.
pub fn constant_weather(start: NaiveDate, days: u32, tmin: f64, tmax: f64) -> Vec<WeatherDay> {
    (0..days)
        .map(|i| WeatherDay {
            date: start + Days::new(i as u64),
            tmin_c: tmin,
            tmax_c: tmax,
            rain_mm: 0.0,
        })
        .collect()
}

// ------------------------------------------------------------- devices

pub fn settings(window_s: f64, period_s: f64, scale: f64) -> RuntimeSettings {
    RuntimeSettings {
        config_window: Duration::from_secs_f64(window_s),
        sample_period: Duration::from_secs_f64(period_s),
        time_scale: scale,
        device_id: "pod-test".into(),
        ..Default::default()
    }
}

pub fn run_config(settings: RuntimeSettings, duration_s: f64, dir: &Path, scenario: Scenario, portal: bool) -> RunConfig {
    RunConfig {
        settings,
        duration: Some(Duration::from_secs_f64(duration_s)),
        data_dir: dir.to_path_buf(),
        portal_addr: portal.then(|| "127.0.0.1:0".parse().unwrap()),
        broker: BrokerTarget::Stub,
        scenario,
    }
}

/// Runs a device on a background thread; returns its addresses once up.
pub fn spawn_device(cfg: RunConfig) -> (Ready, JoinHandle<RunReport>) {
    let (tx, rx) = mpsc::channel();
    let handle = std::thread::spawn(move || {
        runner::run(cfg, Arc::new(SystemClock::new()), move |ready| {
            tx.send(ready).unwrap();
        })
        .expect("device run")
    });
    let ready = rx.recv_timeout(Duration::from_secs(10)).expect("device came up");
    (ready, handle)
}

pub fn scenario_from(text: &str, dir: &Path) -> Scenario {
    Scenario::parse(text, dir, Path::new("inline.toml")).expect("scenario parses")
}

// ------------------------------------------------------------------ http

pub fn get_json(url: &str) -> (u16, Value) {
    match ureq::get(url).timeout(Duration::from_secs(5)).call() {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap_or(Value::Null)),
        Err(e) => panic!("GET {url}: {e}"),
    }
}

pub fn post_json(url: &str, body: &Value) -> (u16, Value) {
    match ureq::post(url).timeout(Duration::from_secs(5)).send_json(body.clone()) {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap_or(Value::Null)),
        Err(e) => panic!("POST {url}: {e}"),
    }
}
