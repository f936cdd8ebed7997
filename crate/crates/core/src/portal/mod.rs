//! Configuration portal: simulated Wi-Fi scan and selection, application
//! input, and device status. [`DevicePortal`] is the device-side handler
//! owned by the control loop; [`http`] exposes it as a JSON API.

pub mod http;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::irrigation::Catalog;
use crate::runtime::{ApplicationInput, DataStore, DeviceData, DeviceState, NetworkRecord, RuntimeError, Security};

pub use http::{PortalHandle, PortalServer, StreamEvent};

pub const DEFAULT_PORT: u16 = 8266;
pub const WPA2_MIN_PASSPHRASE: usize = 8;

/// One entry of the simulated scan table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub ssid: String,
    pub rssi_dbm: i32,
    #[serde(default)]
    pub security: Security,
    /// Already associated at boot.
    #[serde(default)]
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetworkInfo {
    pub ssid: String,
    pub rssi_dbm: i32,
    pub security: Security,
    pub connected: bool,
}

#[derive(Clone, PartialEq, Eq, Deserialize)]
pub struct NetworkConfig {
    pub ssid: String,
    #[serde(default)]
    pub passphrase: String,
}

impl std::fmt::Debug for NetworkConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkConfig")
            .field("ssid", &self.ssid)
            .field("passphrase", &"<redacted>")
            .finish()
    }
}

/// Application form as posted by the UI. Field names follow the device
/// data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationForm {
    #[serde(alias = "crop_name")]
    pub crop: String,
    #[serde(alias = "soil_name")]
    pub soil: String,
    pub plant_date: chrono::NaiveDate,
    pub area_m2: f64,
    pub flow_lph: f64,
}

impl From<ApplicationForm> for ApplicationInput {
    fn from(f: ApplicationForm) -> Self {
        ApplicationInput {
            crop_name: f.crop,
            soil_name: f.soil,
            plant_date: f.plant_date,
            area_m2: f.area_m2,
            flow_lph: f.flow_lph,
        }
    }
}

/// Error body `{"error": code, "detail": text}` plus the HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortalError {
    pub status: u16,
    pub code: &'static str,
    pub detail: String,
    pub field: Option<&'static str>,
}

impl PortalError {
    pub const WINDOW_CLOSED: &'static str = "config_window_closed";

    pub fn window_closed(phase: &str) -> Self {
        PortalError {
            status: 403,
            code: Self::WINDOW_CLOSED,
            detail: format!("configuration window closed (device is {phase})"),
            field: None,
        }
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        PortalError {
            status: 404,
            code: "not_found",
            detail: detail.into(),
            field: None,
        }
    }

    pub fn validation(field: &'static str, detail: impl Into<String>) -> Self {
        PortalError {
            status: 422,
            code: "validation",
            detail: detail.into(),
            field: Some(field),
        }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        PortalError {
            status: 400,
            code: "bad_request",
            detail: detail.into(),
            field: None,
        }
    }

    pub fn not_operational(phase: &str) -> Self {
        PortalError {
            status: 409,
            code: "not_operational",
            detail: format!("pump control needs the operational phase (device is {phase})"),
            field: None,
        }
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        PortalError {
            status: 500,
            code: "internal",
            detail: detail.into(),
            field: None,
        }
    }

    pub fn body(&self) -> Value {
        let mut v = json!({ "error": self.code, "detail": self.detail });
        if let Some(f) = self.field {
            v["field"] = json!(f);
        }
        v
    }
}

impl From<RuntimeError> for PortalError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::ModeViolation(phase) => PortalError::window_closed(phase),
            RuntimeError::Validation { field, reason } => PortalError::validation(field, reason),
            other => PortalError::internal(other.to_string()),
        }
    }
}

pub type PortalReply = Result<Value, PortalError>;

/// Requests carried from HTTP handlers to the control loop.
#[derive(Debug, Clone)]
pub enum PortalRequest {
    ListNetworks,
    ApplyNetwork(NetworkConfig),
    NetworkInfo,
    ApplicationOptions,
    SubmitApplication(ApplicationForm),
    State,
    Pump(crate::actuation::Action),
}

/// Device-side state behind the portal. All mutation happens on the
/// control loop; nothing here is shared.
#[derive(Debug)]
pub struct DevicePortal {
    scan: Vec<ScanEntry>,
    connected: Option<String>,
    catalog: Catalog,
    data: DeviceData,
    store: DataStore,
}

impl DevicePortal {
    /// At most one scan entry may be flagged connected; otherwise a
    /// persisted selection that is still in range is reconnected.
    pub fn new(scan: Vec<ScanEntry>, catalog: Catalog, data: DeviceData, store: DataStore) -> Result<Self, String> {
        let flagged: Vec<_> = scan.iter().filter(|n| n.connected).map(|n| n.ssid.clone()).collect();
        if flagged.len() > 1 {
            return Err(format!("more than one network marked connected: {}", flagged.join(", ")));
        }
        let connected = flagged.into_iter().next().or_else(|| {
            data.network
                .ssid
                .clone()
                .filter(|s| scan.iter().any(|n| &n.ssid == s))
        });
        Ok(DevicePortal {
            scan,
            connected,
            catalog,
            data,
            store,
        })
    }

    pub fn data(&self) -> &DeviceData {
        &self.data
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn connected_ssid(&self) -> Option<&str> {
        self.connected.as_deref()
    }

    /// Scan table, strongest first.
    pub fn list_networks(&self) -> Vec<NetworkInfo> {
        let mut out: Vec<_> = self
            .scan
            .iter()
            .map(|n| NetworkInfo {
                ssid: n.ssid.clone(),
                rssi_dbm: n.rssi_dbm,
                security: n.security,
                connected: self.connected.as_deref() == Some(n.ssid.as_str()),
            })
            .collect();
        out.sort_by(|a, b| b.rssi_dbm.cmp(&a.rssi_dbm).then_with(|| a.ssid.cmp(&b.ssid)));
        out
    }

    pub fn apply_network(&mut self, state: &DeviceState, cfg: &NetworkConfig) -> Result<NetworkInfo, PortalError> {
        if !state.is_config_mode() {
            return Err(PortalError::window_closed(state.phase.name()));
        }
        if cfg.ssid.trim().is_empty() {
            return Err(PortalError::validation("ssid", "ssid must not be empty"));
        }
        let entry = self
            .scan
            .iter()
            .find(|n| n.ssid == cfg.ssid)
            .ok_or_else(|| PortalError::not_found(format!("no network named {:?} in range", cfg.ssid)))?;
        if entry.security == Security::Wpa2 && cfg.passphrase.chars().count() < WPA2_MIN_PASSPHRASE {
            return Err(PortalError::validation(
                "passphrase",
                format!("WPA2 passphrase needs at least {WPA2_MIN_PASSPHRASE} characters"),
            ));
        }
        let security = entry.security;
        let mut updated = self.data.clone();
        updated.network = NetworkRecord {
            ssid: Some(cfg.ssid.clone()),
            security: Some(security),
            passphrase: (!cfg.passphrase.is_empty()).then(|| cfg.passphrase.clone()),
        };
        self.store
            .save(&updated)
            .map_err(|e| PortalError::internal(e.to_string()))?;
        self.data = updated;
        self.connected = Some(cfg.ssid.clone());
        log::info!("network set to {:?} ({security:?})", cfg.ssid);
        Ok(self
            .list_networks()
            .into_iter()
            .find(|n| n.connected)
            .expect("just connected"))
    }

    pub fn network_info(&self) -> Value {
        let neighbors = self.list_networks();
        let connected = neighbors.iter().find(|n| n.connected).cloned();
        json!({ "connected": connected, "neighbors": neighbors })
    }

    /// Crop and soil choices plus any saved input to prefill the form.
    pub fn application_options(&self) -> Value {
        let current = self.data.application().map(|a| ApplicationForm {
            crop: a.crop_name,
            soil: a.soil_name,
            plant_date: a.plant_date,
            area_m2: a.area_m2,
            flow_lph: a.flow_lph,
        });
        json!({
            "crops": self.catalog.crop_names(),
            "soils": self.catalog.soil_names(),
            "current": current,
        })
    }

    pub fn submit_application(&mut self, state: &DeviceState, form: ApplicationForm) -> Result<Value, PortalError> {
        let input: ApplicationInput = form.into();
        state.commit_application(&input, &self.catalog, &mut self.data, &self.store)?;
        log::info!(
            "application saved: {} on {} planted {}",
            input.crop_name,
            input.soil_name,
            input.plant_date
        );
        Ok(json!({ "ok": true }))
    }

    /// Handles every request that doesn't need the pump or the clock.
    pub fn handle(&mut self, state: &DeviceState, req: PortalRequest) -> Option<PortalReply> {
        Some(match req {
            PortalRequest::ListNetworks => Ok(json!(self.list_networks())),
            PortalRequest::ApplyNetwork(cfg) => self.apply_network(state, &cfg).map(|n| json!({ "ok": true, "network": n })),
            PortalRequest::NetworkInfo => Ok(self.network_info()),
            PortalRequest::ApplicationOptions => Ok(self.application_options()),
            PortalRequest::SubmitApplication(form) => self.submit_application(state, form),
            PortalRequest::State | PortalRequest::Pump(_) => return None,
        })
    }
}
