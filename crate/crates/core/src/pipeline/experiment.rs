//! Simulated experiments: calibrate a system from a simulated walk, run it
//! on simulated scenes, and score the decisions.

use super::config::{PipelineConfig, WindowMode};
use super::metrics::{evaluate_recall, with_latency, RunMetrics, SweepPoint};
use super::replay::{decide, prepare_replay, PreparedReplay};
use super::PipelineError;
use crate::calibration::{
    calibrate_extrinsics, label_nlos, tune_noise, CalibParams, CalibrationDataset, CalibrationError, CameraModel, ExtrinsicConfig,
    ExtrinsicFit, TuneConfig, TunedNoise, DEFAULT_PAIRING_GAP,
};
use crate::geometry::{AnchorPose, HeadDetection};
use crate::nlos::{train_detector, AlwaysLos, NlosClassifier, NlosDetectorModel, NlosError, SignalFeatures, TrainConfig};
use crate::simulator::{
    default_anchor, derive_seed, generate_scene, simulate_detections, simulate_uwb, CameraNoiseConfig, CameraSetup, SceneConfig,
    SimulatedDetections, SimulatedUwb, UwbNoiseConfig,
};
use crate::tracking::NoiseModel;
use serde::{Deserialize, Serialize};

/// Which parts of the calibrated system are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Calibrated extrinsics, trained detector, tuned covariances.
    Proposed,
    /// Every sample treated as LoS, with one covariance tuned for all.
    NoNlosDetector,
    /// Hand-designed covariances instead of tuned ones.
    HandDesignedNoise,
    /// Hand-measured anchor pose, head width and tag height.
    UncalibratedExtrinsics,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Proposed,
        Variant::NoNlosDetector,
        Variant::HandDesignedNoise,
        Variant::UncalibratedExtrinsics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::NoNlosDetector => "no_nlos_detector",
            Variant::HandDesignedNoise => "hand_designed_noise",
            Variant::UncalibratedExtrinsics => "uncalibrated_extrinsics",
        }
    }
}

/// Everything the replay needs beyond the thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub params: CalibParams,
    pub noise: NoiseModel,
    pub detector: Option<NlosDetectorModel>,
}

impl SystemModel {
    /// Hand-measured installation and hand-designed covariances, no detector.
    pub fn uncalibrated() -> Self {
        Self {
            params: CalibParams::measured_guess(),
            noise: NoiseModel::hand_designed(),
            detector: None,
        }
    }

    pub fn classifier(&self) -> &dyn NlosClassifier {
        match &self.detector {
            Some(d) => d,
            None => &AlwaysLos,
        }
    }

    /// `base` with this system's calibration and noise.
    pub fn configure(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            calibration: self.params,
            noise: self.noise,
            ..base.clone()
        }
    }
}

/// Share of calibration samples turned into gross NLoS errors.
pub const CALIBRATION_NLOS_FRACTION: f64 = 0.2;

/// A simulated calibration recording and how it is processed. The
/// demonstrator carries the tag facing the anchor, so NLoS samples come from
/// scattered blockage rather than their own body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSetup {
    pub duration: f64,
    pub seed: u64,
    pub self_occlusion: bool,
    pub uwb_noise: UwbNoiseConfig,
    pub camera_noise: CameraNoiseConfig,
    pub init: CalibParams,
    pub extrinsics: ExtrinsicConfig,
    pub train: TrainConfig,
    pub tune: TuneConfig,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        Self {
            duration: 60.0,
            seed: 0,
            self_occlusion: false,
            uwb_noise: UwbNoiseConfig {
                forced_nlos_fraction: CALIBRATION_NLOS_FRACTION,
                ..UwbNoiseConfig::default()
            },
            camera_noise: CameraNoiseConfig::default(),
            init: CalibParams::measured_guess(),
            extrinsics: ExtrinsicConfig::default(),
            train: TrainConfig::default(),
            tune: TuneConfig::default(),
        }
    }
}

/// Results of the calibration stages, from which each variant's system is
/// assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub fit: ExtrinsicFit,
    pub n_pairs: usize,
    pub detector: Option<NlosDetectorModel>,
    pub tuned: TunedNoise,
    /// Tuned with every sample treated as LoS, when requested.
    pub tuned_los_only: Option<TunedNoise>,
}

impl CalibrationOutcome {
    pub fn system(&self, variant: Variant) -> SystemModel {
        let base = NoiseModel::default();
        match variant {
            Variant::Proposed => SystemModel {
                params: self.fit.params,
                noise: self.tuned.apply(&base),
                detector: self.detector.clone(),
            },
            Variant::NoNlosDetector => {
                let tuned = self.tuned_los_only.expect("calibrated with the LoS-only tuning");
                SystemModel {
                    params: self.fit.params,
                    noise: NoiseModel {
                        r_los: tuned.r_los,
                        r_nlos: tuned.r_los,
                        ..base
                    },
                    detector: None,
                }
            }
            Variant::HandDesignedNoise => SystemModel {
                params: self.fit.params,
                noise: NoiseModel::hand_designed(),
                detector: self.detector.clone(),
            },
            Variant::UncalibratedExtrinsics => SystemModel {
                params: CalibParams::measured_guess(),
                noise: self.tuned.apply(&base),
                detector: self.detector.clone(),
            },
        }
    }
}

/// The demonstrator's walk behind a calibration recording.
pub fn calibration_scene(setup: &CalibrationSetup) -> SceneConfig {
    SceneConfig {
        self_occlusion: setup.self_occlusion,
        ..SceneConfig::calibration_walk(setup.duration, setup.seed)
    }
}

/// Simulated calibration walk as paired UWB and camera data.
pub fn calibration_dataset(setup: &CalibrationSetup, camera: &CameraSetup, anchor: &AnchorPose) -> Result<CalibrationDataset, PipelineError> {
    let gt = generate_scene(&calibration_scene(setup))?;
    let uwb = simulate_uwb(&gt, anchor, &setup.uwb_noise, derive_seed(setup.seed, 1));
    let det = simulate_detections(&gt, camera, &setup.camera_noise, derive_seed(setup.seed, 2));
    let demonstrator: Vec<HeadDetection> = det
        .detections
        .iter()
        .zip(&det.truth)
        .filter(|(_, r)| r.carries_tag)
        .map(|(d, _)| *d)
        .collect();
    Ok(CalibrationDataset::pair_streams(&uwb.samples, &demonstrator, DEFAULT_PAIRING_GAP)?)
}

/// Extrinsics, NLoS detector and covariances from one dataset. A detector
/// is only trained when the outlier labels contain both classes.
pub fn calibrate_dataset(
    data: &CalibrationDataset,
    camera: &CameraSetup,
    setup: &CalibrationSetup,
    with_los_only: bool,
) -> Result<CalibrationOutcome, PipelineError> {
    let model = CameraModel {
        intrinsics: &camera.intrinsics,
        extrinsics: &camera.extrinsics,
    };
    let fit = calibrate_extrinsics(data, &model, &setup.init, &setup.extrinsics)?;
    let labels = label_nlos(&fit.outliers);
    let features: Vec<SignalFeatures> = data.pairs.iter().map(|p| p.sample.features.clone()).collect();
    let detector = match train_detector(&features, &labels, &setup.train, setup.seed) {
        Ok(d) => Some(d),
        Err(NlosError::DegenerateLabels | NlosError::TooFewSamples(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let start = NoiseModel::default();
    let classifier: &dyn NlosClassifier = match &detector {
        Some(d) => d,
        None => &AlwaysLos,
    };
    let tuned = tune_noise(data, &fit.params, &model, classifier, &start, &setup.tune)?;
    let tuned_los_only = if with_los_only {
        Some(tune_noise(data, &fit.params, &model, &AlwaysLos, &start, &setup.tune)?)
    } else {
        None
    };
    Ok(CalibrationOutcome {
        fit,
        n_pairs: data.len(),
        detector,
        tuned,
        tuned_los_only,
    })
}

/// Simulates the walk and calibrates from it.
pub fn run_calibration(
    setup: &CalibrationSetup,
    camera: &CameraSetup,
    anchor: &AnchorPose,
    with_los_only: bool,
) -> Result<CalibrationOutcome, PipelineError> {
    let data = calibration_dataset(setup, camera, anchor)?;
    calibrate_dataset(&data, camera, setup, with_los_only)
}

/// The proposed system, or the uncalibrated one when the recording is too
/// short to calibrate from.
pub fn calibrate_or_fallback(setup: &CalibrationSetup, camera: &CameraSetup, anchor: &AnchorPose) -> Result<SystemModel, PipelineError> {
    match run_calibration(setup, camera, anchor, false) {
        Ok(outcome) => Ok(outcome.system(Variant::Proposed)),
        Err(PipelineError::Calibration(CalibrationError::InsufficientData { .. })) => Ok(SystemModel::uncalibrated()),
        Err(e) => Err(e),
    }
}

/// A simulated scene: who walks where and how the sensors see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSetup {
    pub scene: SceneConfig,
    pub uwb_noise: UwbNoiseConfig,
    pub camera_noise: CameraNoiseConfig,
    pub camera: CameraSetup,
    pub anchor: AnchorPose,
}

impl Default for SceneSetup {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            uwb_noise: UwbNoiseConfig::default(),
            camera_noise: CameraNoiseConfig::default(),
            camera: CameraSetup::default(),
            anchor: default_anchor(),
        }
    }
}

impl SceneSetup {
    pub fn crowd(n_people: usize, n_tags: usize, seed: u64) -> Self {
        Self {
            scene: SceneConfig {
                n_people,
                n_tags,
                seed,
                ..SceneConfig::default()
            },
            ..Self::default()
        }
    }

    /// No sensor noise, identical heads, the tag on the body axis and no
    /// self-occlusion.
    pub fn noiseless(n_people: usize, n_tags: usize, seed: u64) -> Self {
        Self {
            scene: SceneConfig {
                n_people,
                n_tags,
                seed,
                head_width_sd: 0.0,
                tag_offset: 0.0,
                self_occlusion: false,
                ..SceneConfig::default()
            },
            uwb_noise: UwbNoiseConfig::noiseless(),
            camera_noise: CameraNoiseConfig::noiseless(),
            ..Self::default()
        }
    }

    /// The exact installation and head model of this scene.
    pub fn true_params(&self) -> CalibParams {
        CalibParams {
            anchor: self.anchor,
            w_r: self.scene.head_width_mean,
            h_tag: self.scene.tag_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScene {
    pub uwb: SimulatedUwb,
    pub detections: SimulatedDetections,
}

pub fn simulate_scene(setup: &SceneSetup) -> Result<SimulatedScene, PipelineError> {
    let gt = generate_scene(&setup.scene)?;
    let seed = setup.scene.seed;
    Ok(SimulatedScene {
        uwb: simulate_uwb(&gt, &setup.anchor, &setup.uwb_noise, derive_seed(seed, 1)),
        detections: simulate_detections(&gt, &setup.camera, &setup.camera_noise, derive_seed(seed, 2)),
    })
}

/// Replay configuration for a system on a scene's camera.
pub fn scene_config(system: &SystemModel, setup: &SceneSetup, base: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        camera: setup.camera,
        ..system.configure(base)
    }
}

pub fn prepare_scene(system: &SystemModel, setup: &SceneSetup, scene: &SimulatedScene, base: &PipelineConfig) -> Result<PreparedReplay, PipelineError> {
    let cfg = scene_config(system, setup, base);
    prepare_replay(&scene.uwb.samples, &scene.detections.detections, &cfg, system.classifier())
}

/// Replays a simulated scene and scores it.
pub fn evaluate_scene(system: &SystemModel, setup: &SceneSetup, scene: &SimulatedScene, base: &PipelineConfig) -> Result<RunMetrics, PipelineError> {
    let prep = prepare_scene(system, setup, scene, base)?;
    let out = decide(&prep, base.c_th, base.window_s, base.mode)?;
    let m = evaluate_recall(&out.decisions, &scene.detections.truth)?;
    Ok(with_latency(m, &out.latency_ms))
}

/// Recall and misidentification rate at each cost threshold, reusing the
/// filtered tags and distances.
pub fn sweep_threshold(
    prep: &PreparedReplay,
    truth: &[crate::simulator::TruthRecord],
    c_values: &[f64],
    window_s: f64,
    mode: WindowMode,
) -> Result<Vec<SweepPoint>, PipelineError> {
    if c_values.len() < 2 {
        return Err(PipelineError::Config("a sweep needs at least two thresholds".into()));
    }
    c_values
        .iter()
        .map(|&c_th| {
            let out = decide(prep, c_th, window_s, mode)?;
            let m = evaluate_recall(&out.decisions, truth)?;
            Ok(SweepPoint {
                c_th,
                recall: m.recall,
                misid_rate: m.misid_rate,
            })
        })
        .collect()
}
