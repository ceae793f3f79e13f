//! Pipeline configuration: one JSON document, partially specified files are
//! merged over the defaults, and `key.path=value` overrides are applied last.

use super::PipelineError;
use crate::calibration::CalibParams;
use crate::matching::CostOptions;
use crate::simulator::{default_anchor, CameraSetup};
use crate::tracking::{InitPolicy, NoiseModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// How camera frames are grouped into assignment windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Consecutive non-overlapping windows, each solved once when complete.
    /// Every frame of a window gets that window's solution.
    Clip,
    /// Solved at every frame over the trailing window, using only data up
    /// to that frame.
    Sliding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub calibration: CalibParams,
    pub camera: CameraSetup,
    pub noise: NoiseModel,
    pub init: InitPolicy,
    /// Pairs costlier than this are never assigned.
    pub c_th: f64,
    /// Tag beliefs less certain than this are ignored in the costs.
    pub u_th: f64,
    pub align_tolerance: f64,
    pub window_s: f64,
    pub mode: WindowMode,
    pub seed: u64,
    /// Saved NLoS detector. Without one every sample is treated as LoS.
    pub detector: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let cost = CostOptions::default();
        Self {
            calibration: CalibParams {
                anchor: default_anchor(),
                w_r: 0.30,
                h_tag: 1.17,
            },
            camera: CameraSetup::default(),
            noise: NoiseModel::default(),
            init: InitPolicy::default(),
            c_th: 1.5,
            u_th: cost.u_th,
            align_tolerance: cost.align_tolerance,
            window_s: 10.0,
            mode: WindowMode::Clip,
            seed: 0,
            detector: None,
        }
    }
}

impl PipelineConfig {
    pub fn cost_options(&self) -> CostOptions {
        CostOptions {
            u_th: self.u_th,
            align_tolerance: self.align_tolerance,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.calibration.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !self.noise.is_valid() {
            return Err(PipelineError::Config("noise model has negative or non-finite entries".into()));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(PipelineError::Config(format!("window_s {}", self.window_s)));
        }
        if !(self.c_th >= 0.0) || !(self.u_th > 0.0) || !(self.align_tolerance >= 0.0) {
            return Err(PipelineError::Config("thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Defaults, then `file` merged over them, then each override.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut doc = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let user: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, user, "")?;
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<(), PipelineError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(PipelineError::Config(format!("unknown key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Sets `a.b.c` (array elements by index) to `raw`, read as JSON when it
/// parses and as a plain string otherwise.
pub fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<(), PipelineError> {
    let mut slot = doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| PipelineError::Config(format!("unknown key {key}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), PipelineError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| PipelineError::Config(format!("override `{s}` is not key=value")))
}
