use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{CropProfile, IrrigationError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Development,
    Mid,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Initial, Stage::Development, Stage::Mid, Stage::Late];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Development => "development",
            Stage::Mid => "mid",
            Stage::Late => "late",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: Stage,
    pub start: NaiveDate,
    pub length_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: [StageSpan; 4],
}

impl StagePlan {
    pub fn plant_date(&self) -> NaiveDate {
        self.stages[0].start
    }

    pub fn season_len(&self) -> u32 {
        self.stages.iter().map(|s| s.length_days).sum()
    }

    /// First day after the season.
    pub fn season_end(&self) -> NaiveDate {
        self.plant_date() + Days::new(u64::from(self.season_len()))
    }
}

/// Growth-stage calendar starting on `plant_date`.
pub fn stage_plan(crop: &CropProfile, plant_date: NaiveDate) -> StagePlan {
    let mut start = plant_date;
    let stages = std::array::from_fn(|i| {
        let span = StageSpan {
            stage: Stage::ALL[i],
            start,
            length_days: crop.stage_len[i],
        };
        start = start + Days::new(u64::from(crop.stage_len[i]));
        span
    });
    StagePlan { stages }
}

/// Crop coefficient on a continuous day axis. The trapezoid's corners are
/// the development start (`kc_ini`), mid-season start and end (`kc_mid`),
/// and the season's last day (`kc_end`).
pub fn kc_at(crop: &CropProfile, t: f64) -> f64 {
    let [l1, l2, l3, l4] = crop.stage_len.map(f64::from);
    let dev_start = l1;
    let mid_start = l1 + l2;
    let late_start = mid_start + l3;
    let last_day = late_start + l4 - 1.0;
    if t < dev_start {
        crop.kc_ini
    } else if t < mid_start {
        crop.kc_ini + (t - dev_start) / l2 * (crop.kc_mid - crop.kc_ini)
    } else if t <= late_start {
        crop.kc_mid
    } else if last_day > late_start {
        let f = ((t - late_start) / (last_day - late_start)).min(1.0);
        crop.kc_mid + f * (crop.kc_end - crop.kc_mid)
    } else {
        crop.kc_end
    }
}

/// Crop coefficient on a given day after planting (day 0 = plant date).
pub fn kc_on(crop: &CropProfile, days_after_planting: i64) -> Result<f64, IrrigationError> {
    let season = crop.season_len();
    if days_after_planting < 0 || days_after_planting >= i64::from(season) {
        return Err(IrrigationError::OutOfSeason {
            day: days_after_planting,
            season,
        });
    }
    let t = days_after_planting as f64;
    // a one-day late stage is its own endpoint
    if crop.stage_len[3] == 1 && days_after_planting == i64::from(season) - 1 {
        return Ok(crop.kc_end);
    }
    Ok(kc_at(crop, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn crop(stage_len: [u32; 4], ini: f64, mid: f64, end: f64) -> CropProfile {
        CropProfile {
            name: "t".into(),
            stage_len,
            kc_ini: ini,
            kc_mid: mid,
            kc_end: end,
            root_depth_m: 0.5,
            depletion_fraction_p: 0.5,
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn stage_starts_accumulate() {
        let p = stage_plan(&crop([20, 30, 30, 10], 0.5, 1.05, 0.9), d("2021-03-01"));
        let starts: Vec<_> = p.stages.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![d("2021-03-01"), d("2021-03-21"), d("2021-04-20"), d("2021-05-20")]);
        assert_eq!(p.season_end(), d("2021-05-30"));
    }

    #[test]
    fn unit_stages() {
        let p = stage_plan(&crop([1, 1, 1, 1], 0.5, 1.0, 0.5), d("2022-07-10"));
        let starts: Vec<_> = p.stages.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![d("2022-07-10"), d("2022-07-11"), d("2022-07-12"), d("2022-07-13")]);
    }

    #[test]
    fn leap_year_boundary() {
        let p = stage_plan(&crop([10, 5, 5, 5], 0.5, 1.0, 0.5), d("2020-02-20"));
        assert_eq!(p.stages[1].start, d("2020-03-01"));
    }

    #[test]
    fn kc_examples() {
        let c = crop([20, 30, 30, 10], 0.5, 1.05, 0.9);
        assert_eq!(kc_on(&c, 5).unwrap(), 0.5);
        assert!((kc_on(&c, 35).unwrap() - 0.775).abs() < 1e-12);
        assert!((kc_on(&c, 89).unwrap() - 0.9).abs() < 1e-9);
        assert_eq!(kc_on(&c, 60).unwrap(), 1.05);
        assert!(matches!(kc_on(&c, 90), Err(IrrigationError::OutOfSeason { day: 90, season: 90 })));
        assert!(kc_on(&c, -1).is_err());
    }

    #[test]
    fn kc_one_day_late_stage_ends_on_kc_end() {
        let c = crop([2, 2, 2, 1], 0.4, 1.0, 0.7);
        assert_eq!(kc_on(&c, 6).unwrap(), 0.7);
        assert_eq!(kc_on(&c, 5).unwrap(), 1.0);
    }

    fn arb_crop() -> impl Strategy<Value = CropProfile> {
        (
            [1u32..40, 1u32..40, 1u32..40, 2u32..40],
            0.1f64..2.0,
            0.1f64..2.0,
            0.1f64..2.0,
        )
            .prop_map(|(l, a, b, c)| crop(l, a, b, c))
    }

    proptest! {
        #[test]
        fn kc_continuous_at_boundaries(c in arb_crop()) {
            let [l1, l2, l3, _] = c.stage_len.map(f64::from);
            for b in [l1, l1 + l2, l1 + l2 + l3] {
                let eps = 1e-9;
                prop_assert!((kc_at(&c, b - eps) - kc_at(&c, b)).abs() < 1e-6);
            }
        }

        #[test]
        fn kc_monotone_in_transitions(c in arb_crop()) {
            let [l1, l2, l3, l4] = c.stage_len.map(i64::from);
            let dev: Vec<f64> = (l1..l1 + l2).map(|d| kc_on(&c, d).unwrap()).collect();
            let late: Vec<f64> = (l1 + l2 + l3..l1 + l2 + l3 + l4).map(|d| kc_on(&c, d).unwrap()).collect();
            for seg in [dev, late] {
                let up = seg.windows(2).all(|w| w[1] >= w[0] - 1e-12);
                let down = seg.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                prop_assert!(up || down);
            }
        }

        #[test]
        fn stage_invariant(c in arb_crop(), offset in 0u64..3000) {
            let plant = d("2015-01-01") + Days::new(offset);
            let p = stage_plan(&c, plant);
            prop_assert_eq!(p.stages[0].start, plant);
            for w in p.stages.windows(2) {
                prop_assert_eq!(w[1].start, w[0].start + Days::new(u64::from(w[0].length_days)));
            }
            prop_assert_eq!(p.season_end(), plant + Days::new(u64::from(c.season_len())));
        }
    }
}
