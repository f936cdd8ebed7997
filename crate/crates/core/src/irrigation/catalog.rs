use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{invalid, IrrigationError};

/// Default crop and soil parameters, midpoints of the usual agronomy
/// tables. Replaceable by an `agronomy.json` in the data directory.
pub const SEEDED_DATABASE: &str = include_str!("../../data/agronomy.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropProfile {
    pub name: String,
    /// Days in the initial, development, mid-season and late stages.
    pub stage_len: [u32; 4],
    pub kc_ini: f64,
    pub kc_mid: f64,
    pub kc_end: f64,
    pub root_depth_m: f64,
    pub depletion_fraction_p: f64,
}

impl CropProfile {
    pub fn season_len(&self) -> u32 {
        self.stage_len.iter().sum()
    }

    pub fn validate(&self) -> Result<(), IrrigationError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "empty crop name"));
        }
        if self.stage_len.contains(&0) {
            return Err(invalid("stage_len", format!("{}: every stage needs ≥ 1 day", self.name)));
        }
        for (field, kc) in [("kc_ini", self.kc_ini), ("kc_mid", self.kc_mid), ("kc_end", self.kc_end)] {
            if !(kc > 0.0 && kc <= 2.0) {
                return Err(invalid(field, format!("{}: {kc} not in (0, 2]", self.name)));
            }
        }
        if !(self.root_depth_m > 0.0 && self.root_depth_m.is_finite()) {
            return Err(invalid("root_depth_m", format!("{}: must be positive", self.name)));
        }
        if !(self.depletion_fraction_p > 0.0 && self.depletion_fraction_p < 1.0) {
            return Err(invalid("depletion_fraction_p", format!("{}: not in (0, 1)", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoilProfile {
    pub name: String,
    /// Field capacity, volumetric fraction.
    pub fc: f64,
    /// Wilting point, volumetric fraction.
    pub wp: f64,
}

impl SoilProfile {
    pub fn validate(&self) -> Result<(), IrrigationError> {
        if !(0.0 < self.wp && self.wp < self.fc && self.fc < 1.0) {
            return Err(invalid(
                "fc/wp",
                format!("{}: need 0 < wp < fc < 1, got wp={} fc={}", self.name, self.wp, self.fc),
            ));
        }
        Ok(())
    }

    /// Total available water in the root zone, mm.
    pub fn taw_mm(&self, root_depth_m: f64) -> f64 {
        1000.0 * (self.fc - self.wp) * root_depth_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CatalogEntry {
    Crop(CropProfile),
    Soil(SoilProfile),
}

/// Crop and soil lookup tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalog {
    crops: Vec<CropProfile>,
    soils: Vec<SoilProfile>,
}

impl Catalog {
    pub fn new(crops: Vec<CropProfile>, soils: Vec<SoilProfile>) -> Result<Self, IrrigationError> {
        for c in &crops {
            c.validate()?;
        }
        for s in &soils {
            s.validate()?;
        }
        Ok(Catalog { crops, soils })
    }

    pub fn seeded() -> Self {
        Self::from_json(SEEDED_DATABASE).expect("seeded database is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, IrrigationError> {
        let entries: Vec<CatalogEntry> =
            serde_json::from_str(text).map_err(|e| IrrigationError::Database(e.to_string()))?;
        let (mut crops, mut soils) = (Vec::new(), Vec::new());
        for e in entries {
            match e {
                CatalogEntry::Crop(c) => crops.push(c),
                CatalogEntry::Soil(s) => soils.push(s),
            }
        }
        Self::new(crops, soils)
    }

    /// Loads `agronomy.json` from `dir` when present, else the seeded table.
    pub fn load_or_seeded(dir: Option<&Path>) -> Result<Self, IrrigationError> {
        if let Some(path) = dir.map(|d| d.join("agronomy.json")).filter(|p| p.exists()) {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| IrrigationError::Database(format!("{}: {e}", path.display())))?;
            return Self::from_json(&text);
        }
        Ok(Self::seeded())
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<CatalogEntry> = self
            .crops
            .iter()
            .cloned()
            .map(CatalogEntry::Crop)
            .chain(self.soils.iter().cloned().map(CatalogEntry::Soil))
            .collect();
        serde_json::to_string_pretty(&entries).expect("catalog serializes")
    }

    pub fn crop(&self, name: &str) -> Result<&CropProfile, IrrigationError> {
        self.crops
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| IrrigationError::Unknown {
                kind: "crop",
                name: name.to_string(),
            })
    }

    pub fn soil(&self, name: &str) -> Result<&SoilProfile, IrrigationError> {
        self.soils
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| IrrigationError::Unknown {
                kind: "soil",
                name: name.to_string(),
            })
    }

    pub fn crop_names(&self) -> Vec<String> {
        self.crops.iter().map(|c| c.name.clone()).collect()
    }

    pub fn soil_names(&self) -> Vec<String> {
        self.soils.iter().map(|s| s.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_has_beans_and_three_soils() {
        let c = Catalog::seeded();
        assert!(c.crop_names().len() >= 4);
        let beans = c.crop("beans").unwrap();
        assert_eq!(beans.stage_len, [20, 30, 30, 10]);
        assert_eq!(c.soil_names(), vec!["sand", "loam", "clay"]);
        assert!(matches!(c.crop("dragonfruit"), Err(IrrigationError::Unknown { kind: "crop", .. })));
    }

    #[test]
    fn json_roundtrip() {
        let c = Catalog::seeded();
        assert_eq!(Catalog::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_profiles() {
        let soil = SoilProfile { name: "odd".into(), fc: 0.1, wp: 0.2 };
        assert!(soil.validate().is_err());
        let mut crop = Catalog::seeded().crop("beans").unwrap().clone();
        crop.kc_mid = 2.5;
        assert!(crop.validate().is_err());
        crop.kc_mid = 1.0;
        crop.stage_len[2] = 0;
        assert!(crop.validate().is_err());
    }

    #[test]
    fn taw_formula() {
        let loam = Catalog::seeded().soil("loam").unwrap().clone();
        assert!((loam.taw_mm(0.6) - 78.0).abs() < 1e-9);
    }
}
