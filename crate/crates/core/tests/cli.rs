use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldpod"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn plan(extra: &[&str]) -> Output {
    bin()
        .args(["plan", "--crop", "beans", "--soil", "loam", "--plant-date", "2021-03-01"])
        .args(["--area", "4", "--flow", "120", "--latitude", "-20"])
        .args(extra)
        .output()
        .unwrap()
}

fn run(scenario: &str, dir: &Path, extra: &[&str]) -> (Output, Duration) {
    let started = Instant::now();
    let out = bin()
        .arg("run")
        .arg("--scenario")
        .arg(scenarios().join(scenario))
        .args(["--broker", "stub", "--no-portal", "--data-dir"])
        .arg(dir)
        .args(extra)
        .output()
        .unwrap();
    (out, started.elapsed())
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(bin().output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn plan_is_deterministic() {
    let weather = scenarios().join("weather.csv");
    let w = weather.to_str().unwrap();
    let a = plan(&["--weather", w]);
    let b = plan(&["--weather", w]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("date,net_depth_mm,gross_depth_mm,runtime_min"));
}

#[test]
fn plan_without_weather_is_a_usage_error() {
    let out = plan(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_with_missing_weather_days_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.csv");
    std::fs::write(&p, "date,tmin_c,tmax_c,rain_mm\n2021-03-01,12,25,0\n").unwrap();
    let out = plan(&["--weather", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2021-03-02"));
}

#[test]
fn zero_demand_gives_no_events() {
    // equal extremes mean no evaporative demand at all
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flat.csv");
    let mut csv = String::from("date,tmin_c,tmax_c,rain_mm\n");
    let start = chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
    for i in 0..120 {
        csv.push_str(&format!("{},18,18,0\n", start + chrono::Days::new(i)));
    }
    std::fs::write(&p, csv).unwrap();
    let out = plan(&["--weather", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let events = text.split("date,net_depth_mm").nth(1).unwrap();
    assert_eq!(events.lines().filter(|l| !l.trim().is_empty()).count(), 1, "{text}");
}

#[test]
fn run_is_faster_than_twice_the_scaled_duration() {
    let dir = tempfile::tempdir().unwrap();
    // 1 h nominal at 3600× should take about a second
    let (out, took) = run(
        "demo.toml",
        dir.path(),
        &["--config-window", "60", "--time-scale", "3600", "--duration", "3600"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(took < Duration::from_secs(2), "took {took:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    // window closes at 60 s; the 3600 s end is exclusive
    assert!(text.contains("samples=59"), "{text}");
    assert!(text.contains("backlog=0"));
}

#[test]
fn outage_scenario_loses_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run(
        "outage.toml",
        dir.path(),
        &["--config-window", "10", "--time-scale", "1200", "--duration", "1805"],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("samples=")).unwrap();
    let field = |k: &str| -> u64 {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("readings") > 0);
    assert_eq!(field("readings"), field("delivered"));
    assert_eq!(field("backlog"), 0);
}

#[test]
fn storage_fault_ends_the_run_with_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run(
        "storage-fault.toml",
        dir.path(),
        &["--config-window", "60", "--time-scale", "1200", "--duration", "1800"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("storage"));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run("demo.toml", dir.path(), &["--time-scale", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let (out, _) = run("no-such.toml", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
}
