use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{invalid, IrrigationError};
use crate::sensing::{SensorKind, SensorReading};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub date: NaiveDate,
    pub tmin_c: f64,
    pub tmax_c: f64,
    pub rain_mm: f64,
}

impl WeatherDay {
    pub fn validate(&self) -> Result<(), IrrigationError> {
        if !(self.tmin_c.is_finite() && self.tmax_c.is_finite()) || self.tmin_c > self.tmax_c {
            return Err(invalid(
                "tmin_c/tmax_c",
                format!("{}: need tmin ≤ tmax, got {} / {}", self.date, self.tmin_c, self.tmax_c),
            ));
        }
        if !(self.rain_mm >= 0.0 && self.rain_mm.is_finite()) {
            return Err(invalid("rain_mm", format!("{}: {} is negative", self.date, self.rain_mm)));
        }
        Ok(())
    }
}

/// Parses `date,tmin_c,tmax_c,rain_mm`.
pub fn read_weather_csv<R: Read>(reader: R) -> Result<Vec<WeatherDay>, IrrigationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| IrrigationError::WeatherFile(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["date", "tmin_c", "tmax_c", "rain_mm"] {
        return Err(IrrigationError::WeatherFile(format!(
            "expected header date,tmin_c,tmax_c,rain_mm, found {}",
            header.join(",")
        )));
    }
    let mut days = Vec::new();
    for row in rdr.deserialize::<WeatherDay>() {
        let day = row.map_err(|e| IrrigationError::WeatherFile(e.to_string()))?;
        day.validate()?;
        days.push(day);
    }
    Ok(days)
}

pub fn weather_csv(days: &[WeatherDay]) -> String {
    let mut out = String::from("date,tmin_c,tmax_c,rain_mm\n");
    for d in days {
        out.push_str(&format!("{},{},{},{}\n", d.date, d.tmin_c, d.tmax_c, d.rain_mm));
    }
    out
}

/// Replaces Tmin/Tmax with the observed extremes on every date that has
/// temperature readings. Rain is kept from the history (0 for new dates).
pub fn fold_observed_temperatures(history: &[WeatherDay], readings: &[SensorReading]) -> Vec<WeatherDay> {
    let mut by_date: BTreeMap<NaiveDate, WeatherDay> = history.iter().map(|d| (d.date, *d)).collect();
    let mut observed: BTreeMap<NaiveDate, (f64, f64)> = BTreeMap::new();
    for r in readings.iter().filter(|r| r.kind == SensorKind::Temperature) {
        let e = observed
            .entry(r.timestamp.date_naive())
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.value);
        e.1 = e.1.max(r.value);
    }
    for (date, (lo, hi)) in observed {
        let rain_mm = by_date.get(&date).map_or(0.0, |d| d.rain_mm);
        by_date.insert(
            date,
            WeatherDay {
                date,
                tmin_c: lo,
                tmax_c: hi,
                rain_mm,
            },
        );
    }
    by_date.into_values().collect()
}
