//! Command-line front end: `run` boots the simulated device, `plan` prints
//! the stage and irrigation tables.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use crate::clock::SystemClock;
use crate::irrigation::{events_csv, read_weather_csv, simulate_balance, stages_csv, Catalog, DEFAULT_EFFICIENCY};
use crate::portal::DEFAULT_PORT;
use crate::runner::{self, BrokerTarget, Outcome, RunConfig, RunError};
use crate::runtime::{ApplicationInput, RuntimeSettings, DEFAULT_CONFIG_WINDOW, DEFAULT_SAMPLE_PERIOD};
use crate::scenario::Scenario;
use crate::telemetry::{BacklogStore, SyncPolicy, TelemetryRecord, BACKLOG_FILE, DEFAULT_BROKER, DEFAULT_TOPIC_PREFIX};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fieldpod", version, about = "Simulated stand-alone IoT garden device")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Boot the device and run it against a broker.
    Run(RunArgs),
    /// Print the growth-stage table and irrigation events.
    Plan(PlanArgs),
    #[command(hide = true)]
    BacklogStress(StressArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file (TOML). Without one, generated sensor data is used.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Broker host:port, or `stub` for an in-process broker.
    #[arg(long, default_value = DEFAULT_BROKER)]
    pub broker: String,
    /// Configuration window, simulated seconds.
    #[arg(long, default_value_t = DEFAULT_CONFIG_WINDOW.as_secs_f64())]
    pub config_window: f64,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    /// Stop after this many simulated seconds (default: run forever).
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, env = "FIELDPOD_DATA_DIR", default_value = "fieldpod-data")]
    pub data_dir: PathBuf,
    /// Portal port; 0 picks a free one.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Portal bind address.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED))]
    pub bind: IpAddr,
    #[arg(long)]
    pub no_portal: bool,
    /// Simulated seconds between samples (overrides the scenario).
    #[arg(long)]
    pub sample_period: Option<f64>,
    #[arg(long)]
    pub device_id: Option<String>,
    #[arg(long)]
    pub topic_prefix: Option<String>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub crop: String,
    #[arg(long)]
    pub soil: String,
    #[arg(long)]
    pub plant_date: NaiveDate,
    /// Irrigated area, m².
    #[arg(long)]
    pub area: f64,
    /// Pump flow, L/h.
    #[arg(long)]
    pub flow: f64,
    /// Weather history CSV: date,tmin_c,tmax_c,rain_mm.
    #[arg(long)]
    pub weather: PathBuf,
    /// Site latitude in degrees, south negative.
    #[arg(long, allow_hyphen_values = true)]
    pub latitude: f64,
    #[arg(long, default_value_t = DEFAULT_EFFICIENCY)]
    pub efficiency: f64,
    /// Directory holding an agronomy.json that replaces the seeded one.
    #[arg(long, env = "FIELDPOD_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StressArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub count: u64,
}

/// Runs the CLI on the process arguments and returns the exit code.
pub fn main() -> i32 {
    main_with(std::env::args_os())
}

pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Plan(a) => cmd_plan(a),
        Command::BacklogStress(a) => cmd_stress(a),
    }
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn positive(name: &str, v: f64) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("--{name} must be a positive number, got {v}"))
    }
}

fn build_run_config(a: &RunArgs) -> Result<RunConfig, String> {
    let scenario = match &a.scenario {
        Some(p) => Scenario::load(p).map_err(|e| e.to_string())?,
        None => Scenario::default(),
    };
    let sample_s = match a.sample_period.or(scenario.sample_period_s) {
        Some(s) => positive("sample-period", s)?,
        None => DEFAULT_SAMPLE_PERIOD.as_secs_f64(),
    };
    let settings = RuntimeSettings {
        config_window: Duration::from_secs_f64(positive("config-window", a.config_window)?),
        sample_period: Duration::from_secs_f64(sample_s),
        broker_address: a.broker.clone(),
        topic_prefix: a
            .topic_prefix
            .clone()
            .or_else(|| scenario.topic_prefix.clone())
            .unwrap_or_else(|| DEFAULT_TOPIC_PREFIX.to_string()),
        device_id: a
            .device_id
            .clone()
            .or_else(|| scenario.device_id.clone())
            .unwrap_or_else(|| "fieldpod".to_string()),
        time_scale: positive("time-scale", a.time_scale)?,
    };
    settings.validate().map_err(|e| e.to_string())?;
    let duration = a
        .duration
        .map(|d| positive("duration", d).map(Duration::from_secs_f64))
        .transpose()?;
    let broker = if a.broker.eq_ignore_ascii_case("stub") {
        BrokerTarget::Stub
    } else {
        BrokerTarget::Address(a.broker.clone())
    };
    Ok(RunConfig {
        settings,
        duration,
        data_dir: a.data_dir.clone(),
        portal_addr: (!a.no_portal).then_some(SocketAddr::new(a.bind, a.port)),
        broker,
        scenario,
    })
}

fn cmd_run(a: RunArgs) -> i32 {
    let cfg = match build_run_config(&a) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    let started = Instant::now();
    let result = runner::run(cfg, Arc::new(SystemClock::new()), |ready| {
        if let Some(addr) = ready.portal {
            println!("portal: http://{addr}/");
        }
        println!("broker: {}", ready.broker);
    });
    match result {
        Ok(report) => {
            println!(
                "samples={} readings={} rejected={} delivered={} backlog={} pump={} wall={:.2}s",
                report.samples,
                report.readings,
                report.rejected,
                report.delivered,
                report.backlog_remaining,
                report.relay.status_payload(),
                started.elapsed().as_secs_f64()
            );
            if let Some(plan) = &report.plan {
                print!("{}", stages_csv(&plan.stage_plan));
                print!("{}", events_csv(&plan.events));
            }
            match report.outcome {
                Outcome::Clean => EXIT_OK,
                Outcome::Fault(reason) => {
                    eprintln!("fault: {reason}");
                    EXIT_FAULT
                }
            }
        }
        Err(e @ (RunError::Backlog(_) | RunError::DataDir { .. })) => {
            eprintln!("fault: {e}");
            EXIT_FAULT
        }
        Err(e) => usage(e),
    }
}

/// The two tables exactly as exported, stage table first.
pub fn plan_tables(a: &PlanArgs) -> Result<String, String> {
    let catalog = Catalog::load_or_seeded(a.data_dir.as_deref()).map_err(|e| e.to_string())?;
    let crop = catalog.crop(&a.crop).map_err(|e| e.to_string())?;
    let soil = catalog.soil(&a.soil).map_err(|e| e.to_string())?;
    let weather = read_weather(&a.weather)?;
    let input = ApplicationInput {
        crop_name: crop.name.clone(),
        soil_name: soil.name.clone(),
        plant_date: a.plant_date,
        area_m2: positive("area", a.area)?,
        flow_lph: positive("flow", a.flow)?,
    };
    let plan = simulate_balance(&input, crop, soil, &weather, a.efficiency, a.latitude.to_radians())
        .map_err(|e| e.to_string())?;
    Ok(format!("{}{}", stages_csv(&plan.stage_plan), events_csv(&plan.events)))
}

fn read_weather(path: &Path) -> Result<Vec<crate::irrigation::WeatherDay>, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    read_weather_csv(f).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_plan(a: PlanArgs) -> i32 {
    match plan_tables(&a) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => usage(e),
    }
}

/// Appends single-record frames and reports each one after `append`
/// returns, so a parent can kill the process at any point.
fn cmd_stress(a: StressArgs) -> i32 {
    let store = match BacklogStore::open(a.data_dir.join(BACKLOG_FILE), SyncPolicy::Fsync) {
        Ok((s, _)) => s,
        Err(e) => return usage(e),
    };
    let origin = crate::scenario::default_start();
    let stdout = std::io::stdout();
    for i in 0..a.count {
        let seq = match store.next_seq() {
            Ok(s) => s,
            Err(e) => return usage(e),
        };
        let rec = TelemetryRecord {
            seq,
            topic: crate::telemetry::Topic::from_raw("/usp/sm"),
            payload: crate::telemetry::format_one_decimal((i % 1000) as f64 / 10.0).into_bytes(),
            timestamp: origin + chrono::Duration::seconds(i as i64),
        };
        if let Err(e) = store.append(&rec) {
            eprintln!("append failed: {e}");
            return EXIT_FAULT;
        }
        let mut out = stdout.lock();
        if writeln!(out, "appended {seq}").and_then(|_| out.flush()).is_err() {
            return EXIT_FAULT;
        }
    }
    EXIT_OK
}
