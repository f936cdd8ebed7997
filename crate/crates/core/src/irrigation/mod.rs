//! Irrigation planning: growth-stage calendar, crop coefficient curve,
//! temperature-based reference evapotranspiration and a daily root-zone
//! water balance that yields dated irrigation events.

mod balance;
mod catalog;
mod crop;
mod export;
mod solar;
mod weather;

use chrono::NaiveDate;
use thiserror::Error;

pub use balance::{
    run_balance, simulate_balance, update_with_observation, BalanceParams, DayBalance, IrrigationEvent,
    IrrigationPlan, DEFAULT_EFFICIENCY,
};
pub use catalog::{Catalog, CatalogEntry, CropProfile, SoilProfile, SEEDED_DATABASE};
pub use crop::{kc_at, kc_on, stage_plan, Stage, StagePlan, StageSpan};
pub use export::{events_csv, stages_csv};
pub use solar::{
    et0_hargreaves, inverse_relative_distance, ra_extraterrestrial, ra_from_geometry, solar_declination,
    sunset_hour_angle, MAX_LATITUDE_DEG,
};
pub use weather::{fold_observed_temperatures, read_weather_csv, weather_csv, WeatherDay};

#[derive(Debug, Error, PartialEq)]
pub enum IrrigationError {
    #[error("day {day} is outside the {season}-day season")]
    OutOfSeason { day: i64, season: u32 },
    #[error("date {date} is outside the season {start}..{end}")]
    DateOutOfSeason {
        date: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("latitude {0:.4} rad is outside the supported ±66.5° band")]
    PolarLatitude(f64),
    #[error("day of year {0} not in 1..=366")]
    DayOfYear(u32),
    #[error("weather history has no entry for {0}")]
    MissingWeather(NaiveDate),
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
    #[error("expected a soil-moisture reading, got {0}")]
    WrongSensor(crate::sensing::SensorKind),
    #[error("weather file: {0}")]
    WeatherFile(String),
    #[error("database: {0}")]
    Database(String),
}

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> IrrigationError {
    IrrigationError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}
