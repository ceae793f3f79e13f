//! End-to-end replay: file formats, configuration, per-frame keep/mask
//! decisions, metrics and the simulated experiment harness.

pub mod config;
pub mod experiment;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod replay;

use crate::calibration::CalibrationError;
use crate::geometry::GeometryError;
use crate::matching::MatchingError;
use crate::nlos::NlosError;
use crate::simulator::SimulatorError;
use crate::tracking::TrackingError;
use thiserror::Error;

pub use config::{PipelineConfig, WindowMode};
pub use io::{TrackletRecord, UwbRecord};
pub use mask::{compose_mask, Image};
pub use metrics::{evaluate_recall, MetricsRow, RunMetrics};
pub use replay::{run_replay, BoxDecision, FrameDecision, ReplayOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{source_name} line {line}: {message}")]
    Schema {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{stream} stream goes back in time from {prev} to {next}")]
    ClockSkew { stream: String, prev: f64, next: f64 },
    #[error("no ground truth for tracklet {tracklet_id} at t={t}")]
    MissingGroundTruth { t: f64, tracklet_id: u64 },
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("bad image: {0}")]
    Image(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Detector(#[from] NlosError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Whether the error is about malformed input rather than a failure.
    pub fn is_schema(&self) -> bool {
        matches!(self, Self::Schema { .. } | Self::ClockSkew { .. } | Self::Image(_) | Self::Config(_))
    }
}
