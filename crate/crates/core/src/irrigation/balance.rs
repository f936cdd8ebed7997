//! Daily root-zone water balance with refill-to-field-capacity events.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::crop::{kc_on, stage_plan, StagePlan};
use super::solar::et0_hargreaves;
use super::{invalid, CropProfile, IrrigationError, SoilProfile, WeatherDay};
use crate::runtime::ApplicationInput;
use crate::sensing::{SensorKind, SensorReading};

/// Drip application efficiency.
pub const DEFAULT_EFFICIENCY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceParams {
    pub taw_mm: f64,
    pub raw_mm: f64,
    pub efficiency: f64,
    pub area_m2: f64,
    pub flow_lph: f64,
}

impl BalanceParams {
    pub fn validate(&self) -> Result<(), IrrigationError> {
        if !(self.taw_mm > 0.0 && self.raw_mm > 0.0 && self.raw_mm <= self.taw_mm) {
            return Err(invalid("taw_mm/raw_mm", "need 0 < RAW ≤ TAW"));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid("efficiency", format!("{} not in (0, 1]", self.efficiency)));
        }
        if !(self.area_m2 > 0.0 && self.area_m2.is_finite()) {
            return Err(invalid("area_m2", "must be positive"));
        }
        if !(self.flow_lph > 0.0 && self.flow_lph.is_finite()) {
            return Err(invalid("flow_lph", "must be positive"));
        }
        Ok(())
    }

    /// Minutes of pump time to deliver `gross_mm` over the plot
    /// (1 mm over 1 m² is 1 L).
    pub fn runtime_min(&self, gross_mm: f64) -> f64 {
        gross_mm * self.area_m2 * 60.0 / self.flow_lph
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrrigationEvent {
    pub date: NaiveDate,
    pub net_depth_mm: f64,
    pub gross_depth_mm: f64,
    pub runtime_min: f64,
}

/// One day of the ledger. Depletions are in mm below field capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayBalance {
    pub date: NaiveDate,
    pub et0_mm: f64,
    pub kc: f64,
    pub etc_mm: f64,
    pub rain_mm: f64,
    /// Crop demand actually drawn from the root zone (less than `etc_mm`
    /// only when the zone is already empty).
    pub etc_applied_mm: f64,
    /// Rain that refilled the root zone; the rest drains.
    pub rain_applied_mm: f64,
    pub depletion_start_mm: f64,
    pub depletion_pre_irrigation_mm: f64,
    pub irrigation_mm: f64,
    pub depletion_end_mm: f64,
    /// Depletion observed by the soil-moisture probe, when it replaced the
    /// modelled value.
    pub observed_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrigationPlan {
    pub stage_plan: StagePlan,
    pub events: Vec<IrrigationEvent>,
    pub taw_mm: f64,
    pub raw_mm: f64,
    pub params: BalanceParams,
    pub days: Vec<DayBalance>,
}

impl IrrigationPlan {
    pub fn day(&self, date: NaiveDate) -> Option<&DayBalance> {
        self.days.iter().find(|d| d.date == date)
    }
}

/// Steps the balance over `days` starting from depletion `d_prev`. If
/// `observed_first` is set it replaces the first day's pre-irrigation
/// depletion. Inputs carry date, ET0, Kc, ETc and rain; the outputs fill
/// in the rest of each [`DayBalance`].
pub fn run_balance(
    days: &[DayBalance],
    mut d_prev: f64,
    observed_first: Option<f64>,
    params: &BalanceParams,
) -> (Vec<DayBalance>, Vec<IrrigationEvent>) {
    let mut ledger = Vec::with_capacity(days.len());
    let mut events = Vec::new();
    for (i, input) in days.iter().enumerate() {
        let mut day = *input;
        day.depletion_start_mm = d_prev;
        day.observed_mm = None;
        let raw = d_prev + day.etc_mm - day.rain_mm;
        let (pre, etc_applied, rain_applied) = if raw < 0.0 {
            // surplus rain drains below the root zone
            (0.0, day.etc_mm, d_prev + day.etc_mm)
        } else if raw > params.taw_mm {
            (params.taw_mm, day.etc_mm - (raw - params.taw_mm), day.rain_mm)
        } else {
            (raw, day.etc_mm, day.rain_mm)
        };
        day.etc_applied_mm = etc_applied;
        day.rain_applied_mm = rain_applied;
        day.depletion_pre_irrigation_mm = pre;
        if i == 0 {
            if let Some(obs) = observed_first {
                day.depletion_pre_irrigation_mm = obs;
                day.observed_mm = Some(obs);
            }
        }
        let pre = day.depletion_pre_irrigation_mm;
        if pre >= params.raw_mm {
            let gross = pre / params.efficiency;
            events.push(IrrigationEvent {
                date: day.date,
                net_depth_mm: pre,
                gross_depth_mm: gross,
                runtime_min: params.runtime_min(gross),
            });
            day.irrigation_mm = pre;
            day.depletion_end_mm = 0.0;
        } else {
            day.irrigation_mm = 0.0;
            day.depletion_end_mm = pre;
        }
        d_prev = day.depletion_end_mm;
        ledger.push(day);
    }
    (ledger, events)
}

fn blank_day(date: NaiveDate, et0_mm: f64, kc: f64, rain_mm: f64) -> DayBalance {
    DayBalance {
        date,
        et0_mm,
        kc,
        etc_mm: kc * et0_mm,
        rain_mm,
        etc_applied_mm: 0.0,
        rain_applied_mm: 0.0,
        depletion_start_mm: 0.0,
        depletion_pre_irrigation_mm: 0.0,
        irrigation_mm: 0.0,
        depletion_end_mm: 0.0,
        observed_mm: None,
    }
}

/// Builds the season plan: stage calendar, daily ledger and irrigation
/// events, starting from a full root zone the day before planting.
pub fn simulate_balance(
    input: &ApplicationInput,
    crop: &CropProfile,
    soil: &SoilProfile,
    weather: &[WeatherDay],
    efficiency: f64,
    latitude_rad: f64,
) -> Result<IrrigationPlan, IrrigationError> {
    crop.validate()?;
    soil.validate()?;
    let taw_mm = soil.taw_mm(crop.root_depth_m);
    let params = BalanceParams {
        taw_mm,
        raw_mm: crop.depletion_fraction_p * taw_mm,
        efficiency,
        area_m2: input.area_m2,
        flow_lph: input.flow_lph,
    };
    params.validate()?;

    let by_date: BTreeMap<NaiveDate, &WeatherDay> = weather.iter().map(|d| (d.date, d)).collect();
    let season = crop.season_len();
    let mut inputs = Vec::with_capacity(season as usize);
    for i in 0..season {
        let date = input.plant_date + Days::new(u64::from(i));
        let w = by_date.get(&date).ok_or(IrrigationError::MissingWeather(date))?;
        let et0 = et0_hargreaves(w, latitude_rad)?;
        let kc = kc_on(crop, i64::from(i))?;
        inputs.push(blank_day(date, et0, kc, w.rain_mm));
    }
    let (days, events) = run_balance(&inputs, 0.0, None, &params);
    Ok(IrrigationPlan {
        stage_plan: stage_plan(crop, input.plant_date),
        events,
        taw_mm,
        raw_mm: params.raw_mm,
        params,
        days,
    })
}

/// Replaces the modelled depletion on `today` with the one implied by a
/// soil-moisture reading and re-plans from `today` onward. Events before
/// `today` are kept.
pub fn update_with_observation(
    plan: &IrrigationPlan,
    sm: &SensorReading,
    today: NaiveDate,
    soil: &SoilProfile,
    crop: &CropProfile,
) -> Result<IrrigationPlan, IrrigationError> {
    if sm.kind != SensorKind::SoilMoisture {
        return Err(IrrigationError::WrongSensor(sm.kind));
    }
    let start = plan.stage_plan.plant_date();
    let end = plan.stage_plan.season_end();
    let idx = plan
        .days
        .iter()
        .position(|d| d.date == today)
        .ok_or(IrrigationError::DateOutOfSeason { date: today, start, end })?;

    let d_obs = ((soil.fc - sm.value / 100.0) * crop.root_depth_m * 1000.0).clamp(0.0, plan.taw_mm);
    let d_prev = if idx == 0 {
        0.0
    } else {
        plan.days[idx - 1].depletion_end_mm
    };
    let (tail, new_events) = run_balance(&plan.days[idx..], d_prev, Some(d_obs), &plan.params);

    let mut days = plan.days[..idx].to_vec();
    days.extend(tail);
    let mut events: Vec<_> = plan.events.iter().copied().filter(|e| e.date < today).collect();
    events.extend(new_events);
    Ok(IrrigationPlan {
        stage_plan: plan.stage_plan.clone(),
        events,
        taw_mm: plan.taw_mm,
        raw_mm: plan.raw_mm,
        params: plan.params,
        days,
    })
}
