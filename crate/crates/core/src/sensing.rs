//! Sensor set abstraction: readings, range checks, and scenario streams
//! that stand in for the physical temperature, humidity and soil-moisture
//! probes.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensor catalogue. Only the first three are wired in the garden
/// application; the rest are listed so scenarios can name them, and are
/// rejected when sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    /// Ambient temperature, °C.
    Temperature,
    /// Ambient relative humidity, %RH.
    Humidity,
    /// Volumetric soil water content, %VWC.
    SoilMoisture,
    SoilPh,
    SoilNutrients,
    Rain,
    LightIntensity,
}

impl SensorKind {
    pub const ACTIVE: [SensorKind; 3] = [
        SensorKind::Temperature,
        SensorKind::Humidity,
        SensorKind::SoilMoisture,
    ];

    pub fn is_active(self) -> bool {
        matches!(
            self,
            SensorKind::Temperature | SensorKind::Humidity | SensorKind::SoilMoisture
        )
    }

    /// Short code used in replay files and topic leaves.
    pub fn code(self) -> &'static str {
        match self {
            SensorKind::Temperature => "temp",
            SensorKind::Humidity => "humid",
            SensorKind::SoilMoisture => "sm",
            SensorKind::SoilPh => "ph",
            SensorKind::SoilNutrients => "npk",
            SensorKind::Rain => "rain",
            SensorKind::LightIntensity => "lux",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            SensorKind::Temperature => "°C",
            SensorKind::Humidity => "%RH",
            SensorKind::SoilMoisture => "%VWC",
            SensorKind::SoilPh => "pH",
            SensorKind::SoilNutrients => "mg/kg",
            SensorKind::Rain => "mm",
            SensorKind::LightIntensity => "lx",
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SensorKind {
    type Err = SensingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "temp" => SensorKind::Temperature,
            "humid" => SensorKind::Humidity,
            "sm" => SensorKind::SoilMoisture,
            "ph" => SensorKind::SoilPh,
            "npk" => SensorKind::SoilNutrients,
            "rain" => SensorKind::Rain,
            "lux" => SensorKind::LightIntensity,
            other => return Err(SensingError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("{kind} reading {value} outside [{min}, {max}] {unit}")]
    OutOfRange {
        kind: SensorKind,
        value: f64,
        min: f64,
        max: f64,
        unit: &'static str,
    },
    #[error("sensor kind {0} is not active in this application")]
    InactiveKind(SensorKind),
    #[error("unknown sensor kind {0:?}")]
    UnknownKind(String),
    #[error("{kind} offsets must be strictly increasing (offset {offset} after {previous})")]
    NonIncreasingOffset {
        kind: SensorKind,
        offset: f64,
        previous: f64,
    },
    #[error("invalid offset {0}")]
    InvalidOffset(f64),
    #[error("replay file: {0}")]
    Replay(String),
}

/// Inclusive physical range for a sensor kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Accepted spans for the active kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRanges {
    pub temperature: Range,
    pub humidity: Range,
    pub soil_moisture: Range,
}

impl Default for SensorRanges {
    fn default() -> Self {
        SensorRanges {
            temperature: Range { min: -40.0, max: 85.0 },
            humidity: Range { min: 0.0, max: 100.0 },
            soil_moisture: Range { min: 0.0, max: 100.0 },
        }
    }
}

impl SensorRanges {
    pub fn for_kind(&self, kind: SensorKind) -> Option<Range> {
        match kind {
            SensorKind::Temperature => Some(self.temperature),
            SensorKind::Humidity => Some(self.humidity),
            SensorKind::SoilMoisture => Some(self.soil_moisture),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub kind: SensorKind,
    pub value: f64,
    pub timestamp: DateTime<Utc>,
    pub device_id: String,
}

/// Checks a reading against the default ranges.
pub fn validate(reading: &SensorReading) -> Result<(), SensingError> {
    validate_with(reading, &SensorRanges::default())
}

pub fn validate_with(reading: &SensorReading, ranges: &SensorRanges) -> Result<(), SensingError> {
    let range = ranges
        .for_kind(reading.kind)
        .ok_or(SensingError::InactiveKind(reading.kind))?;
    if range.contains(reading.value) {
        Ok(())
    } else {
        Err(SensingError::OutOfRange {
            kind: reading.kind,
            value: reading.value,
            min: range.min,
            max: range.max,
            unit: reading.kind.unit(),
        })
    }
}

/// One row of a scenario: value of `kind` from `offset_s` onward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamRecord {
    pub offset_s: f64,
    pub kind: SensorKind,
    pub value: f64,
}

/// Time-indexed sensor values, either generated or replayed from CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioStream {
    // (offset, value) per active kind, offsets strictly increasing
    series: [Vec<(f64, f64)>; 3],
}

fn slot(kind: SensorKind) -> Result<usize, SensingError> {
    match kind {
        SensorKind::Temperature => Ok(0),
        SensorKind::Humidity => Ok(1),
        SensorKind::SoilMoisture => Ok(2),
        other => Err(SensingError::InactiveKind(other)),
    }
}

impl ScenarioStream {
    pub fn new(records: impl IntoIterator<Item = StreamRecord>) -> Result<Self, SensingError> {
        let mut series: [Vec<(f64, f64)>; 3] = Default::default();
        for r in records {
            if !r.offset_s.is_finite() || r.offset_s < 0.0 {
                return Err(SensingError::InvalidOffset(r.offset_s));
            }
            let s = &mut series[slot(r.kind)?];
            if let Some(&(prev, _)) = s.last() {
                if r.offset_s <= prev {
                    return Err(SensingError::NonIncreasingOffset {
                        kind: r.kind,
                        offset: r.offset_s,
                        previous: prev,
                    });
                }
            }
            s.push((r.offset_s, r.value));
        }
        Ok(ScenarioStream { series })
    }

    pub fn is_empty(&self) -> bool {
        self.series.iter().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.series.iter().map(Vec::len).sum()
    }

    /// Latest record per kind with offset ≤ `sim_time`, as `(offset, value)`.
    pub fn latest(&self, kind: SensorKind, sim_time: f64) -> Option<(f64, f64)> {
        let s = &self.series[slot(kind).ok()?];
        let idx = s.partition_point(|&(off, _)| off <= sim_time);
        idx.checked_sub(1).map(|i| s[i])
    }

    /// Readings visible at `sim_time` seconds after `origin`. Kinds with no
    /// record yet are omitted.
    pub fn sample(&self, sim_time: f64, origin: DateTime<Utc>, device_id: &str) -> Vec<SensorReading> {
        if sim_time.is_nan() || sim_time < 0.0 {
            return Vec::new();
        }
        SensorKind::ACTIVE
            .iter()
            .filter_map(|&kind| {
                self.latest(kind, sim_time).map(|(offset, value)| SensorReading {
                    kind,
                    value,
                    timestamp: origin + ChronoDuration::seconds(offset.floor() as i64),
                    device_id: device_id.to_string(),
                })
            })
            .collect()
    }

    pub fn records(&self) -> Vec<StreamRecord> {
        let mut out: Vec<StreamRecord> = SensorKind::ACTIVE
            .iter()
            .enumerate()
            .flat_map(|(i, &kind)| {
                self.series[i].iter().map(move |&(offset_s, value)| StreamRecord {
                    offset_s,
                    kind,
                    value,
                })
            })
            .collect();
        out.sort_by(|a, b| a.offset_s.total_cmp(&b.offset_s));
        out
    }

    /// Parses the `offset_s,kind,value` replay format.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, SensingError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| SensingError::Replay(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["offset_s", "kind", "value"] {
            return Err(SensingError::Replay(format!(
                "expected header offset_s,kind,value, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| SensingError::Replay(e.to_string()))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let bad = |what: &str| SensingError::Replay(format!("row {}: bad {what}", line + 2));
            records.push(StreamRecord {
                offset_s: field(0).parse().map_err(|_| bad("offset_s"))?,
                kind: field(1).parse()?,
                value: field(2).parse().map_err(|_| bad("value"))?,
            });
        }
        Self::new(records)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, SensingError> {
        let file = std::fs::File::open(path)
            .map_err(|e| SensingError::Replay(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "offset_s,kind,value")?;
        for r in self.records() {
            writeln!(w, "{},{},{}", r.offset_s, r.kind.code(), r.value)?;
        }
        Ok(())
    }
}

/// Sinusoid plus bounded uniform noise for one sensor kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub baseline: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default)]
    pub noise: f64,
}

fn default_period() -> f64 {
    86_400.0
}

/// Omitted channels take the default waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub temp: Option<Waveform>,
    pub humid: Option<Waveform>,
    pub sm: Option<Waveform>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            temp: Some(Waveform {
                baseline: 24.0,
                amplitude: 6.0,
                period_s: 86_400.0,
                noise: 0.5,
            }),
            humid: Some(Waveform {
                baseline: 60.0,
                amplitude: 15.0,
                period_s: 86_400.0,
                noise: 2.0,
            }),
            sm: Some(Waveform {
                baseline: 30.0,
                amplitude: 8.0,
                period_s: 43_200.0,
                noise: 1.0,
            }),
        }
    }
}

impl GeneratorSpec {
    /// Materializes records at `0, step, 2·step, …` up to `duration_s`.
    /// Values are clamped into each kind's range.
    pub fn generate(&self, duration_s: f64, step_s: f64) -> ScenarioStream {
        let ranges = SensorRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let waves = [
            (SensorKind::Temperature, self.temp),
            (SensorKind::Humidity, self.humid),
            (SensorKind::SoilMoisture, self.sm),
        ];
        let mut series: [Vec<(f64, f64)>; 3] = Default::default();
        let steps = if step_s > 0.0 {
            (duration_s / step_s).floor().max(0.0) as u64
        } else {
            0
        };
        for k in 0..=steps {
            let t = k as f64 * step_s;
            for (i, (kind, wave)) in waves.iter().enumerate() {
                let Some(w) = wave else { continue };
                let phase = if w.period_s > 0.0 {
                    2.0 * std::f64::consts::PI * t / w.period_s
                } else {
                    0.0
                };
                let noise = if w.noise > 0.0 {
                    rng.gen_range(-w.noise..=w.noise)
                } else {
                    0.0
                };
                let range = ranges.for_kind(*kind).expect("active kind");
                let v = (w.baseline + w.amplitude * phase.sin() + noise).clamp(range.min, range.max);
                series[i].push((t, v));
            }
        }
        ScenarioStream { series }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn origin() -> DateTime<Utc> {
        "2021-03-01T06:00:00Z".parse().unwrap()
    }

    fn rec(offset_s: f64, kind: SensorKind, value: f64) -> StreamRecord {
        StreamRecord { offset_s, kind, value }
    }

    fn reading(kind: SensorKind, value: f64) -> SensorReading {
        SensorReading {
            kind,
            value,
            timestamp: origin(),
            device_id: "d".into(),
        }
    }

    #[test]
    fn sample_all_three_at_zero() {
        let s = ScenarioStream::new([
            rec(0.0, SensorKind::Temperature, 24.5),
            rec(0.0, SensorKind::Humidity, 60.0),
            rec(0.0, SensorKind::SoilMoisture, 35.0),
        ])
        .unwrap();
        let r = s.sample(0.0, origin(), "d");
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].value, 24.5);
        assert_eq!(r[2].kind, SensorKind::SoilMoisture);
    }

    #[test]
    fn sample_empty_stream() {
        assert!(ScenarioStream::default().sample(100.0, origin(), "d").is_empty());
    }

    #[test]
    fn sample_picks_latest_not_future() {
        let s = ScenarioStream::new([
            rec(0.0, SensorKind::Temperature, 20.0),
            rec(10.0, SensorKind::Temperature, 22.0),
        ])
        .unwrap();
        let r = s.sample(9.0, origin(), "d");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].value, 20.0);
        assert_eq!(s.sample(10.0, origin(), "d")[0].value, 22.0);
        assert_eq!(
            s.sample(10.0, origin(), "d")[0].timestamp,
            origin() + ChronoDuration::seconds(10)
        );
    }

    #[test]
    fn validate_examples() {
        assert!(validate(&reading(SensorKind::Temperature, 24.5)).is_ok());
        let err = validate(&reading(SensorKind::Humidity, 120.0)).unwrap_err();
        assert!(matches!(err, SensingError::OutOfRange { kind: SensorKind::Humidity, .. }));
        let msg = err.to_string();
        assert!(msg.contains("humid") && msg.contains("120") && msg.contains("100"));
        assert!(validate(&reading(SensorKind::SoilMoisture, 0.0)).is_ok());
        assert!(validate(&reading(SensorKind::Temperature, f64::NAN)).is_err());
    }

    #[test]
    fn inactive_kinds_rejected() {
        assert_eq!(
            validate(&reading(SensorKind::Rain, 1.0)),
            Err(SensingError::InactiveKind(SensorKind::Rain))
        );
        assert!(ScenarioStream::new([rec(0.0, SensorKind::SoilPh, 6.5)]).is_err());
    }

    #[test]
    fn non_increasing_offsets_rejected() {
        let err = ScenarioStream::new([
            rec(5.0, SensorKind::Temperature, 1.0),
            rec(5.0, SensorKind::Temperature, 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, SensingError::NonIncreasingOffset { .. }));
        // other kinds may share offsets
        assert!(ScenarioStream::new([
            rec(5.0, SensorKind::Temperature, 1.0),
            rec(5.0, SensorKind::Humidity, 2.0),
        ])
        .is_ok());
    }

    #[test]
    fn csv_replay_parses_and_roundtrips() {
        let text = "offset_s,kind,value\n0,temp,24.5\n0,humid,60\n30,sm,35.25\n";
        let s = ScenarioStream::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert_eq!(ScenarioStream::from_csv_reader(out.as_slice()).unwrap(), s);
    }

    #[test]
    fn csv_replay_rejects_bad_header_and_kind() {
        assert!(ScenarioStream::from_csv_reader("t,k,v\n".as_bytes()).is_err());
        let err = ScenarioStream::from_csv_reader("offset_s,kind,value\n0,co2,400\n".as_bytes());
        assert_eq!(err.unwrap_err(), SensingError::UnknownKind("co2".into()));
    }

    #[test]
    fn generator_is_seeded_and_in_range() {
        let spec = GeneratorSpec { seed: 42, ..Default::default() };
        let a = spec.generate(3600.0, 60.0);
        let b = spec.generate(3600.0, 60.0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 61);
        let other = GeneratorSpec { seed: 43, ..Default::default() }.generate(3600.0, 60.0);
        assert_ne!(a, other);
        for r in a.records() {
            assert!(validate(&reading(r.kind, r.value)).is_ok());
        }
    }

    fn arb_stream() -> impl Strategy<Value = ScenarioStream> {
        let per_kind = || proptest::collection::vec((0.1f64..100.0, 0.0f64..100.0), 0..20);
        (per_kind(), per_kind(), per_kind()).prop_map(|(t, h, s)| {
            let mut recs = Vec::new();
            for (kind, series) in [
                (SensorKind::Temperature, t),
                (SensorKind::Humidity, h),
                (SensorKind::SoilMoisture, s),
            ] {
                let mut off = 0.0;
                for (gap, v) in series {
                    off += gap;
                    recs.push(rec(off, kind, v));
                }
            }
            ScenarioStream::new(recs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn sample_is_pure(s in arb_stream(), t in 0.0f64..2500.0) {
            prop_assert_eq!(s.sample(t, origin(), "d"), s.sample(t, origin(), "d"));
        }

        #[test]
        fn sample_is_prefix_consistent(s in arb_stream(), a in 0.0f64..2500.0, b in 0.0f64..2500.0) {
            let (t1, t2) = if a <= b { (a, b) } else { (b, a) };
            for kind in SensorKind::ACTIVE {
                if let Some((o1, _)) = s.latest(kind, t1) {
                    let (o2, _) = s.latest(kind, t2).expect("later sample sees the kind");
                    prop_assert!(o1 <= o2);
                    prop_assert!(o1 <= t1);
                }
            }
        }

        #[test]
        fn validated_readings_are_in_range(v in -200.0f64..200.0, k in 0usize..3) {
            let kind = SensorKind::ACTIVE[k];
            let r = reading(kind, v);
            if validate(&r).is_ok() {
                prop_assert!(SensorRanges::default().for_kind(kind).unwrap().contains(v));
            }
        }
    }
}
