//! Extraterrestrial radiation and Hargreaves-Samani reference ET.

use std::f64::consts::PI;

use super::{IrrigationError, WeatherDay};

/// Solar constant, MJ·m⁻²·min⁻¹.
const GSC: f64 = 0.0820;
pub const MAX_LATITUDE_DEG: f64 = 66.5;

pub fn inverse_relative_distance(day_of_year: u32) -> f64 {
    1.0 + 0.033 * (2.0 * PI * f64::from(day_of_year) / 365.0).cos()
}

pub fn solar_declination(day_of_year: u32) -> f64 {
    0.409 * (2.0 * PI * f64::from(day_of_year) / 365.0 - 1.39).sin()
}

pub fn sunset_hour_angle(latitude_rad: f64, declination: f64) -> f64 {
    (-latitude_rad.tan() * declination.tan()).clamp(-1.0, 1.0).acos()
}

/// Daily extraterrestrial radiation from latitude, declination and the
/// inverse relative Earth–Sun distance. MJ·m⁻²·day⁻¹.
pub fn ra_from_geometry(latitude_rad: f64, declination: f64, dr: f64) -> f64 {
    let ws = sunset_hour_angle(latitude_rad, declination);
    (24.0 * 60.0 / PI)
        * GSC
        * dr
        * (ws * latitude_rad.sin() * declination.sin()
            + latitude_rad.cos() * declination.cos() * ws.sin())
}

/// Daily extraterrestrial radiation for a latitude and day of year.
pub fn ra_extraterrestrial(latitude_rad: f64, day_of_year: u32) -> Result<f64, IrrigationError> {
    if latitude_rad.is_nan() || latitude_rad.abs() >= MAX_LATITUDE_DEG.to_radians() {
        return Err(IrrigationError::PolarLatitude(latitude_rad));
    }
    if !(1..=366).contains(&day_of_year) {
        return Err(IrrigationError::DayOfYear(day_of_year));
    }
    Ok(ra_from_geometry(
        latitude_rad,
        solar_declination(day_of_year),
        inverse_relative_distance(day_of_year),
    ))
}

/// Hargreaves-Samani reference evapotranspiration, mm/day, never negative.
pub fn et0_hargreaves(day: &WeatherDay, latitude_rad: f64) -> Result<f64, IrrigationError> {
    use chrono::Datelike;
    day.validate()?;
    let ra = ra_extraterrestrial(latitude_rad, day.date.ordinal())?;
    let tmean = (day.tmax_c + day.tmin_c) / 2.0;
    let et0 = 0.0023 * (tmean + 17.8) * (day.tmax_c - day.tmin_c).sqrt() * (0.408 * ra);
    Ok(et0.max(0.0))
}
