//! Auto-calibration from one person walking with a tag.
//!
//! Stage one fits the anchor pose, the mean head width and the tag height so
//! that UWB positions and camera ground points agree, robustly with RANSAC.
//! Its outliers become NLoS training labels. Stage two picks the LoS and
//! NLoS observation covariances with the smallest total trace that keep the
//! filtered trajectory within a Mahalanobis bound of the camera points.

use crate::geometry::{anchor_polar_to_world, head_box_to_tag_plane, AnchorPose, CameraExtrinsics, CameraIntrinsics, GeometryError, HeadDetection, Vec3};
use crate::matching::{mahalanobis, MatchingError};
use crate::nlos::{LinkCondition, NlosClassifier, NlosError};
use crate::optimize::{cma_es, nelder_mead, ransac, CmaesConfig, NelderMeadOptions, OptimizeError, RansacConfig};
use crate::tracking::{track_tag_with_links, InitPolicy, NoiseModel, TrackingError, UwbSample};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MIN_PAIRS: usize = 30;
pub const DEFAULT_PAIRING_GAP: f64 = 0.25;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least {needed} pairs, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("calibration data must come from a single tag")]
    MixedTags,
    #[error("calibration parameters out of range: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Detector(#[from] NlosError),
    #[error("report file: {0}")]
    Io(#[from] std::io::Error),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    pub anchor: AnchorPose,
    /// Mean head width in meters.
    pub w_r: f64,
    /// Tag height above the ground in meters.
    pub h_tag: f64,
}

impl CalibParams {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.anchor.is_finite() {
            return Err(CalibrationError::InvalidParams("anchor pose not finite".into()));
        }
        if !(self.w_r > 0.1 && self.w_r < 0.6) {
            return Err(CalibrationError::InvalidParams(format!("head width {}", self.w_r)));
        }
        if !(self.h_tag > 0.0 && self.h_tag < 2.5) {
            return Err(CalibrationError::InvalidParams(format!("tag height {}", self.h_tag)));
        }
        Ok(())
    }

    /// Hand-measured installation used as the starting point of the fit.
    pub fn measured_guess() -> Self {
        Self {
            anchor: AnchorPose::new(Vec3::new(0.50, -3.21, 2.56), [3.00, 0.37, 1.55]),
            w_r: 0.295,
            h_tag: 1.27,
        }
    }
}

/// One UWB sample with the head detection closest in time.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibPair {
    pub sample: UwbSample,
    pub detection: HeadDetection,
}

impl CalibPair {
    pub fn timestamp(&self) -> f64 {
        self.sample.timestamp
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationDataset {
    pub pairs: Vec<CalibPair>,
}

impl CalibrationDataset {
    /// Pairs every UWB sample with a detection at the same instant. When the
    /// sample falls between two detections of the same tracklet no more than
    /// `max_gap` apart from it, the box is interpolated linearly; otherwise the
    /// nearest detection within `max_gap` is used. Samples without a close
    /// detection are dropped.
    pub fn pair_streams(samples: &[UwbSample], detections: &[HeadDetection], max_gap: f64) -> Result<Self, CalibrationError> {
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.tag_id != first.tag_id) {
                return Err(CalibrationError::MixedTags);
            }
        }
        let mut dets = detections.to_vec();
        dets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut pairs = Vec::new();
        for s in samples {
            let t = s.timestamp;
            let k = dets.partition_point(|d| d.timestamp < t);
            let before = k.checked_sub(1).map(|i| &dets[i]).filter(|d| t - d.timestamp <= max_gap);
            let after = dets.get(k).filter(|d| d.timestamp - t <= max_gap);
            let detection = match (before, after) {
                (Some(a), Some(b)) if a.tracklet_id == b.tracklet_id && b.timestamp > a.timestamp => Some(interpolate(a, b, t)),
                (Some(a), Some(b)) => Some(if t - a.timestamp <= b.timestamp - t { *a } else { *b }),
                (Some(d), None) | (None, Some(d)) => Some(*d),
                (None, None) => None,
            };
            if let Some(detection) = detection {
                pairs.push(CalibPair {
                    sample: s.clone(),
                    detection,
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs with timestamps below `start + seconds`.
    pub fn truncated(&self, seconds: f64) -> Self {
        let Some(first) = self.pairs.first() else {
            return self.clone();
        };
        let end = first.timestamp() + seconds;
        Self {
            pairs: self.pairs.iter().filter(|p| p.timestamp() < end).cloned().collect(),
        }
    }
}

fn interpolate(a: &HeadDetection, b: &HeadDetection, t: f64) -> HeadDetection {
    let f = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let lerp = |x: f64, y: f64| x + f * (y - x);
    HeadDetection {
        tracklet_id: a.tracklet_id,
        timestamp: t,
        u: lerp(a.u, b.u),
        v: lerp(a.v, b.v),
        width: lerp(a.width, b.width),
        height: lerp(a.height, b.height),
    }
}

/// Camera intrinsics and extrinsics, fixed during calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub extrinsics: &'a CameraExtrinsics,
}

/// Camera point minus UWB point for one pair.
pub fn pair_offset(pair: &CalibPair, params: &CalibParams, camera: &CameraModel) -> Option<Vec3> {
    let uwb = anchor_polar_to_world(&pair.sample.z, &params.anchor);
    let cam = head_box_to_tag_plane(&pair.detection, camera.intrinsics, camera.extrinsics, params.w_r, params.h_tag).ok()?;
    Some(cam - uwb)
}

/// Distance between the UWB position and the camera point of one pair.
pub fn pair_residual(pair: &CalibPair, params: &CalibParams, camera: &CameraModel) -> f64 {
    pair_offset(pair, params, camera).map_or(f64::INFINITY, |d| d.norm())
}

/// Mean pair residual.
pub fn mean_residual<'p>(pairs: impl IntoIterator<Item = &'p CalibPair>, params: &CalibParams, camera: &CameraModel) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        sum += pair_residual(p, params, camera);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicConfig {
    pub ransac: RansacConfig,
    /// Keep the anchor height at its initial value. The fit cannot tell a
    /// raised anchor from an equally raised tag, so one of them has to be
    /// pinned.
    pub fix_anchor_height: bool,
    /// Nelder-Mead restarts from the previous optimum.
    pub restarts: usize,
    pub max_evals: usize,
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig {
                sample_size: 8,
                iterations: 200,
                threshold: 0.75,
                seed: 0,
            },
            fix_anchor_height: true,
            restarts: 2,
            max_evals: 4000,
        }
    }
}

fn pack(p: &CalibParams, fix_z: bool) -> Vec<f64> {
    let a = &p.anchor;
    let mut v = vec![a.position.x, a.position.y];
    if !fix_z {
        v.push(a.position.z);
    }
    v.extend_from_slice(&a.orientation);
    v.push(p.w_r);
    v.push(p.h_tag);
    v
}

fn unpack(v: &[f64], template: &CalibParams, fix_z: bool) -> CalibParams {
    let (z, rest) = if fix_z { (template.anchor.position.z, &v[2..]) } else { (v[2], &v[3..]) };
    CalibParams {
        anchor: AnchorPose::new(Vec3::new(v[0], v[1], z), [rest[0], rest[1], rest[2]]),
        w_r: rest[3],
        h_tag: rest[4],
    }
}

fn initial_steps(fix_z: bool) -> Vec<f64> {
    let mut s = vec![0.2, 0.2];
    if !fix_z {
        s.push(0.2);
    }
    s.extend_from_slice(&[0.1, 0.1, 0.1, 0.02, 0.1]);
    s
}

/// Minimizes the mean pair residual over `pairs`, starting from `init`.
pub fn fit_params(pairs: &[&CalibPair], init: &CalibParams, camera: &CameraModel, cfg: &ExtrinsicConfig) -> Option<CalibParams> {
    let fix_z = cfg.fix_anchor_height;
    let objective = |v: &[f64]| {
        let p = unpack(v, init, fix_z);
        if p.validate().is_err() {
            return f64::INFINITY;
        }
        mean_residual(pairs.iter().copied(), &p, camera)
    };
    let mut x = pack(init, fix_z);
    let mut opts = NelderMeadOptions {
        initial_step: initial_steps(fix_z),
        max_evals: cfg.max_evals,
        x_tol: 1e-9,
        f_tol: 0.0,
    };
    let mut best = f64::INFINITY;
    for round in 0..=cfg.restarts {
        let m = nelder_mead(objective, &x, &opts).ok()?;
        let improved = m.f < best - 1e-12;
        x = m.x;
        best = best.min(m.f);
        if round > 0 && !improved {
            break;
        }
        opts.initial_step = opts.initial_step.iter().map(|s| s * 0.5).collect();
    }
    let p = unpack(&x, init, fix_z);
    p.anchor.is_finite().then_some(p)
}

/// Local refinement of the mean pair residual by iteratively reweighted
/// Levenberg-Marquardt. Much tighter than Nelder-Mead on the long, narrow
/// valleys that couple anchor translation with yaw.
pub fn refine_params(pairs: &[&CalibPair], start: &CalibParams, camera: &CameraModel, fix_anchor_height: bool) -> CalibParams {
    let template = *start;
    let mut x = pack(start, fix_anchor_height);
    let n = x.len();
    let offsets = |v: &[f64]| -> Option<Vec<Vec3>> {
        let p = unpack(v, &template, fix_anchor_height);
        p.validate().ok()?;
        pairs.iter().map(|q| pair_offset(q, &p, camera)).collect()
    };
    let cost = |r: &[Vec3]| r.iter().map(|d| d.norm()).sum::<f64>() / r.len().max(1) as f64;
    let Some(mut r) = offsets(&x) else { return *start };
    let mut f = cost(&r);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut cols: Vec<Vec<Vec3>> = Vec::with_capacity(n);
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let (Some(rp), Some(rm)) = (offsets(&xp), offsets(&xm)) else { return unpack(&x, &template, fix_anchor_height) };
            cols.push(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
        }
        let mut jtj = DMatrix::<f64>::zeros(n, n);
        let mut jtr = DVector::<f64>::zeros(n);
        for (i, ri) in r.iter().enumerate() {
            let w = 1.0 / ri.norm().max(1e-6);
            for a in 0..n {
                jtr[a] += w * cols[a][i].dot(ri);
                for b in a..n {
                    jtj[(a, b)] += w * cols[a][i].dot(&cols[b][i]);
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut m = jtj.clone();
            for a in 0..n {
                m[(a, a)] += lambda * jtj[(a, a)].max(1e-12);
            }
            let Some(step) = m.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if let Some(rc) = offsets(&cand) {
                let fc = cost(&rc);
                if fc < f {
                    let gain = f - fc;
                    x = cand;
                    r = rc;
                    f = fc;
                    lambda = (lambda * 0.3).max(1e-9);
                    improved = gain > 1e-14 * f.max(1e-300);
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    unpack(&x, &template, fix_anchor_height)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrinsicFit {
    pub params: CalibParams,
    /// `true` marks pairs rejected as outliers.
    pub outliers: Vec<bool>,
    pub inlier_ratio: f64,
    /// Mean residual over the inliers at the initial and fitted parameters.
    pub inlier_residual_init: f64,
    pub inlier_residual: f64,
}

/// Robust fit of anchor pose, head width and tag height.
pub fn calibrate_extrinsics(
    data: &CalibrationDataset,
    camera: &CameraModel,
    init: &CalibParams,
    cfg: &ExtrinsicConfig,
) -> Result<ExtrinsicFit, CalibrationError> {
    if data.len() < MIN_PAIRS {
        return Err(CalibrationError::InsufficientData {
            needed: MIN_PAIRS,
            got: data.len(),
        });
    }
    let result = ransac(
        &data.pairs,
        |subset| fit_params(subset, init, camera, cfg),
        |p, pair| pair_residual(pair, p, camera),
        &cfg.ransac,
    )?;
    // hypotheses start from `init`; the consensus set deserves a fit that
    // starts from the winning hypothesis instead
    let mut params = result.model;
    let mut inlier_mask = result.inliers;
    for _ in 0..5 {
        let inliers: Vec<&CalibPair> = select(&data.pairs, &inlier_mask);
        let refit = refine_params(&inliers, &params, camera, cfg.fix_anchor_height);
        if !(mean_residual(inliers.iter().copied(), &refit, camera) < mean_residual(inliers.iter().copied(), &params, camera)) {
            break;
        }
        params = refit;
        let mask: Vec<bool> = data.pairs.iter().map(|p| pair_residual(p, &params, camera) < cfg.ransac.threshold).collect();
        if mask.iter().filter(|m| **m).count() < MIN_PAIRS {
            break;
        }
        let unchanged = mask == inlier_mask;
        inlier_mask = mask;
        if unchanged {
            break;
        }
    }
    let inliers = select(&data.pairs, &inlier_mask);
    let n_inliers = inliers.len();
    Ok(ExtrinsicFit {
        params,
        outliers: inlier_mask.iter().map(|m| !m).collect(),
        inlier_ratio: n_inliers as f64 / data.len() as f64,
        inlier_residual_init: mean_residual(inliers.iter().copied(), init, camera),
        inlier_residual: mean_residual(inliers.iter().copied(), &params, camera),
    })
}

fn select<'a>(pairs: &'a [CalibPair], mask: &[bool]) -> Vec<&'a CalibPair> {
    pairs.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| p).collect()
}

/// Outliers are NLoS, inliers LoS.
pub fn label_nlos(outliers: &[bool]) -> Vec<LinkCondition> {
    outliers
        .iter()
        .map(|o| if *o { LinkCondition::Nlos } else { LinkCondition::Los })
        .collect()
}

/// Outlier mask from plain residuals, without any fitting.
pub fn residual_outliers(data: &CalibrationDataset, params: &CalibParams, camera: &CameraModel, threshold: f64) -> Vec<bool> {
    data.pairs.iter().map(|p| !(pair_residual(p, params, camera) < threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub d_th: f64,
    /// The penalty starts at `d_th * (1 - margin)`. A quadratic penalty lets
    /// optimal points sit just past the bound, the margin keeps them inside.
    pub margin: f64,
    /// Penalty weight per stage; each stage restarts from the previous best.
    pub penalties: Vec<f64>,
    pub cmaes: CmaesConfig,
    pub init: InitPolicy,
}

impl Default for TuneConfig {
    fn default() -> Self {
        let lo = 1e-4f64.ln();
        let hi = 1e4f64.ln();
        Self {
            d_th: 1.0,
            margin: 0.02,
            penalties: vec![1e3, 1e5],
            cmaes: CmaesConfig {
                sigma0: 1.0,
                max_evals: 1200,
                tol_fun: 1e-10,
                lower: Some(vec![lo; 6]),
                upper: Some(vec![hi; 6]),
                ..CmaesConfig::default()
            },
            init: InitPolicy::default(),
        }
    }
}

/// Covariances chosen by `tune_noise` and how well they meet the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedNoise {
    pub r_los: [f64; 3],
    pub r_nlos: [f64; 3],
    pub d_th: f64,
    /// Calibration timestamps with `D_t >= d_th`.
    pub violations: usize,
    pub n_constraints: usize,
    pub max_distance: f64,
    pub penalized_objective: f64,
    pub evals: usize,
}

impl TunedNoise {
    pub fn trace_los(&self) -> f64 {
        self.r_los.iter().sum()
    }

    pub fn trace_nlos(&self) -> f64 {
        self.r_nlos.iter().sum()
    }

    pub fn violation_fraction(&self) -> f64 {
        self.violations as f64 / self.n_constraints.max(1) as f64
    }

    pub fn apply(&self, base: &NoiseModel) -> NoiseModel {
        NoiseModel {
            r_los: self.r_los,
            r_nlos: self.r_nlos,
            ..*base
        }
    }
}

/// Mahalanobis distance between the filtered tag and the camera point at
/// every calibration pair, for a given noise model.
pub fn constraint_distances(
    data: &CalibrationDataset,
    params: &CalibParams,
    camera: &CameraModel,
    links: &[LinkCondition],
    noise: &NoiseModel,
    init: &InitPolicy,
) -> Result<Vec<f64>, CalibrationError> {
    let samples: Vec<UwbSample> = data.pairs.iter().map(|p| p.sample.clone()).collect();
    let traj = track_tag_with_links(&samples, links, &params.anchor, noise, init, f64::INFINITY)?;
    let mut out = Vec::with_capacity(data.len());
    for pair in &data.pairs {
        let cam: Vec3 = head_box_to_tag_plane(&pair.detection, camera.intrinsics, camera.extrinsics, params.w_r, params.h_tag)?;
        let belief = traj.query_at(pair.detection.timestamp);
        out.push(mahalanobis(&(belief.position() - cam), &belief.position_cov())?);
    }
    Ok(out)
}

fn noise_from_logs(v: &[f64], base: &NoiseModel) -> NoiseModel {
    NoiseModel {
        r_los: [v[0].exp(), v[1].exp(), v[2].exp()],
        r_nlos: [v[3].exp(), v[4].exp(), v[5].exp()],
        ..*base
    }
}

/// Smallest `tr(R_LoS) + tr(R_NLoS)` keeping every `D_t` below `d_th`,
/// searched with CMA-ES over log-diagonals under an exterior quadratic
/// penalty. Returns the evaluated point with the lowest objective at the
/// final penalty weight; the starting covariances are among the candidates.
pub fn tune_noise<D: NlosClassifier + ?Sized>(
    data: &CalibrationDataset,
    params: &CalibParams,
    camera: &CameraModel,
    detector: &D,
    start: &NoiseModel,
    cfg: &TuneConfig,
) -> Result<TunedNoise, CalibrationError> {
    if data.len() < 2 {
        return Err(CalibrationError::InsufficientData { needed: 2, got: data.len() });
    }
    let links: Vec<LinkCondition> = data
        .pairs
        .iter()
        .map(|p| detector.classify(&p.sample.features))
        .collect::<Result<_, _>>()?;
    let final_penalty = cfg.penalties.last().copied().unwrap_or(0.0);
    let evaluate = |v: &[f64]| -> Option<(f64, f64, usize, f64)> {
        let noise = noise_from_logs(v, start);
        let d = constraint_distances(data, params, camera, &links, &noise, &cfg.init).ok()?;
        let bound = cfg.d_th * (1.0 - cfg.margin);
        let excess: f64 = d.iter().map(|x| (x - bound).max(0.0).powi(2)).sum();
        let violations = d.iter().filter(|x| !(**x < cfg.d_th)).count();
        let trace: f64 = noise.r_los.iter().chain(&noise.r_nlos).sum();
        Some((trace, excess, violations, d.iter().cloned().fold(0.0, f64::max)))
    };

    let x0: Vec<f64> = start.r_los.iter().chain(&start.r_nlos).map(|v| v.max(1e-300).ln()).collect();
    let mut best: Option<(f64, Vec<f64>, usize, f64)> = None;
    let mut consider = |v: &[f64], trace: f64, excess: f64, violations: usize, max_d: f64| {
        let score = trace + final_penalty * excess;
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, v.to_vec(), violations, max_d));
        }
    };
    if let Some((t, e, n, m)) = evaluate(&x0) {
        consider(&x0, t, e, n, m);
    }

    let mut x = x0.clone();
    let mut evals = 1;
    for (stage, &penalty) in cfg.penalties.iter().enumerate() {
        let mut cma = cfg.cmaes.clone();
        cma.seed = cfg.cmaes.seed.wrapping_add(stage as u64);
        let result = cma_es(
            |v| match evaluate(v) {
                Some((t, e, n, m)) => {
                    consider(v, t, e, n, m);
                    t + penalty * e
                }
                None => f64::INFINITY,
            },
            &x,
            &cma,
        )?;
        evals += result.evals;
        x = result.x;
    }

    let (score, v, violations, max_distance) = best.ok_or(CalibrationError::InvalidParams("no finite noise candidate".into()))?;
    let noise = noise_from_logs(&v, start);
    Ok(TunedNoise {
        r_los: noise.r_los,
        r_nlos: noise.r_nlos,
        d_th: cfg.d_th,
        violations,
        n_constraints: data.len(),
        max_distance,
        penalized_objective: score,
        evals,
    })
}

/// Summary written after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: CalibParams,
    pub n_pairs: usize,
    pub inlier_ratio: f64,
    pub inlier_residual_m: f64,
    pub r_los: [f64; 3],
    pub r_nlos: [f64; 3],
    pub d_th: f64,
    pub violations: usize,
    pub violation_fraction: f64,
    pub max_distance: f64,
}

impl CalibrationReport {
    pub fn new(fit: &ExtrinsicFit, tuned: &TunedNoise, n_pairs: usize) -> Self {
        Self {
            params: fit.params,
            n_pairs,
            inlier_ratio: fit.inlier_ratio,
            inlier_residual_m: fit.inlier_residual,
            r_los: tuned.r_los,
            r_nlos: tuned.r_nlos,
            d_th: tuned.d_th,
            violations: tuned.violations,
            violation_fraction: tuned.violation_fraction(),
            max_distance: tuned.max_distance,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlos::AlwaysLos;
    use crate::simulator::{default_anchor, generate_scene, simulate_detections, simulate_uwb, CameraNoiseConfig, CameraSetup, SceneConfig, UwbNoiseConfig};

    struct Walk {
        data: CalibrationDataset,
        camera: CameraSetup,
        truth: CalibParams,
        nlos: Vec<bool>,
    }

    fn walk(cfg: &SceneConfig, uwb: &UwbNoiseConfig, cam_noise: &CameraNoiseConfig) -> Walk {
        let gt = generate_scene(cfg).unwrap();
        let camera = CameraSetup::default();
        let u = simulate_uwb(&gt, &default_anchor(), uwb, cfg.seed + 1);
        let d = simulate_detections(&gt, &camera, cam_noise, cfg.seed + 2);
        let data = CalibrationDataset::pair_streams(&u.samples, &d.detections, DEFAULT_PAIRING_GAP).unwrap();
        let nlos = data
            .pairs
            .iter()
            .map(|p| u.nlos[u.samples.iter().position(|s| s.timestamp == p.sample.timestamp).unwrap()])
            .collect();
        let truth = CalibParams {
            anchor: default_anchor(),
            w_r: gt.people[0].head_width,
            h_tag: cfg.tag_height,
        };
        Walk {
            data,
            camera,
            truth,
            nlos,
        }
    }

    fn noiseless(seconds: f64, seed: u64) -> Walk {
        let cfg = SceneConfig {
            tag_offset: 0.0,
            ..SceneConfig::calibration_walk(seconds, seed)
        };
        walk(&cfg, &UwbNoiseConfig::noiseless(), &CameraNoiseConfig::noiseless())
    }

    fn model(cam: &CameraSetup) -> CameraModel<'_> {
        CameraModel {
            intrinsics: &cam.intrinsics,
            extrinsics: &cam.extrinsics,
        }
    }

    fn perturbed(truth: &CalibParams) -> CalibParams {
        let mut p = *truth;
        p.anchor.position += Vec3::new(0.3, -0.35, 0.0);
        p.anchor.orientation[0] -= 0.2;
        p.anchor.orientation[1] += 0.15;
        p.anchor.orientation[2] -= 0.2;
        p.w_r += 0.02;
        p.h_tag -= 0.15;
        p
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_nlos(&[false, false]), vec![LinkCondition::Los; 2]);
        assert_eq!(
            label_nlos(&[false, true, false]),
            vec![LinkCondition::Los, LinkCondition::Nlos, LinkCondition::Los]
        );
        let mask: Vec<bool> = (0..37).map(|k| k % 3 == 0).collect();
        let labels = label_nlos(&mask);
        assert_eq!(labels.len(), mask.len());
        assert!(labels.iter().zip(&mask).all(|(l, m)| l.is_nlos() == *m));
    }

    #[test]
    fn too_few_pairs() {
        let w = noiseless(4.0, 1);
        assert!(matches!(
            calibrate_extrinsics(&w.data, &model(&w.camera), &w.truth, &ExtrinsicConfig::default()),
            Err(CalibrationError::InsufficientData { .. })
        ));
    }

    #[test]
    fn noiseless_walk_is_recovered() {
        let w = noiseless(30.0, 3);
        let cfg = ExtrinsicConfig {
            ransac: RansacConfig {
                iterations: 20,
                ..ExtrinsicConfig::default().ransac
            },
            ..Default::default()
        };
        let fit = calibrate_extrinsics(&w.data, &model(&w.camera), &perturbed(&w.truth), &cfg).unwrap();
        assert!((fit.params.anchor.position - w.truth.anchor.position).norm() < 1e-3, "{:?}", fit.params);
        assert!((fit.params.w_r - w.truth.w_r).abs() < 1e-3);
        assert!(fit.outliers.iter().all(|o| !o));
        assert!(fit.inlier_residual <= fit.inlier_residual_init);
    }

    #[test]
    fn gross_outliers_are_rejected() {
        let uwb = UwbNoiseConfig {
            forced_nlos_fraction: 0.2,
            nlos_bias_range: [1.0, 5.0],
            ..Default::default()
        };
        let w = walk(&SceneConfig::calibration_walk(60.0, 7), &uwb, &CameraNoiseConfig::default());
        assert_eq!(w.data.len(), w.nlos.len());
        let camera = model(&w.camera);
        let fit = calibrate_extrinsics(&w.data, &camera, &CalibParams::measured_guess(), &ExtrinsicConfig::default()).unwrap();
        assert!((fit.params.anchor.position - w.truth.anchor.position).norm() < 0.15, "{:?}", fit.params);
        assert!((fit.params.w_r - w.truth.w_r).abs() < 0.02);
        let planted: Vec<usize> = (0..w.nlos.len()).filter(|&k| w.nlos[k]).collect();
        let caught = planted.iter().filter(|&&k| fit.outliers[k]).count();
        assert!(caught as f64 >= 0.8 * planted.len() as f64, "{caught}/{}", planted.len());
        assert!(fit.inlier_residual <= fit.inlier_residual_init);
        let again = calibrate_extrinsics(&w.data, &camera, &CalibParams::measured_guess(), &ExtrinsicConfig::default()).unwrap();
        assert_eq!(fit, again);
    }

    #[test]
    fn generous_bound_drives_covariances_to_floor() {
        let w = noiseless(10.0, 5);
        let cfg = TuneConfig {
            d_th: 10.0,
            ..Default::default()
        };
        let tuned = tune_noise(&w.data, &w.truth, &model(&w.camera), &AlwaysLos, &NoiseModel::default(), &cfg).unwrap();
        assert!(tuned.r_los.iter().chain(&tuned.r_nlos).all(|v| *v < 1e-3), "{tuned:?}");
        assert_eq!(tuned.violations, 0);
    }

    #[test]
    fn tuned_point_beats_start() {
        let w = walk(&SceneConfig::calibration_walk(20.0, 11), &UwbNoiseConfig::default(), &CameraNoiseConfig::default());
        let camera = model(&w.camera);
        let cfg = TuneConfig::default();
        let start = NoiseModel::default();
        let tuned = tune_noise(&w.data, &w.truth, &camera, &AlwaysLos, &start, &cfg).unwrap();
        let links = vec![LinkCondition::Los; w.data.len()];
        let penalized = |noise: &NoiseModel| {
            let d = constraint_distances(&w.data, &w.truth, &camera, &links, noise, &cfg.init).unwrap();
            let bound = cfg.d_th * (1.0 - cfg.margin);
            let excess: f64 = d.iter().map(|x| (x - bound).max(0.0).powi(2)).sum();
            noise.r_los.iter().chain(&noise.r_nlos).sum::<f64>() + 1e5 * excess
        };
        assert!(penalized(&tuned.apply(&start)) <= penalized(&start));
        let replay = constraint_distances(&w.data, &w.truth, &camera, &links, &tuned.apply(&start), &cfg.init).unwrap();
        let bad = replay.iter().filter(|d| !(**d < cfg.d_th)).count();
        assert_eq!(bad, tuned.violations);
    }

    #[test]
    fn pairing_interpolates_inside_tracklets() {
        let w = noiseless(10.0, 2);
        for p in &w.data.pairs {
            assert!((p.detection.timestamp - p.sample.timestamp).abs() <= 0.05 + 1e-9);
        }
        assert!(w.data.pairs.iter().filter(|p| p.detection.timestamp == p.sample.timestamp).count() >= w.data.len() - 2);
        assert_eq!(w.data.truncated(5.0).pairs.len(), 25);
    }

    #[test]
    fn mixed_tags_rejected() {
        let w = noiseless(10.0, 2);
        let mut samples: Vec<UwbSample> = w.data.pairs.iter().map(|p| p.sample.clone()).collect();
        samples[3].tag_id = "other".into();
        assert!(matches!(
            CalibrationDataset::pair_streams(&samples, &[], 0.25),
            Err(CalibrationError::MixedTags)
        ));
    }

    #[test]
    fn report_round_trip() {
        let fit = ExtrinsicFit {
            params: CalibParams::measured_guess(),
            outliers: vec![false, true],
            inlier_ratio: 0.5,
            inlier_residual_init: 0.3,
            inlier_residual: 0.2,
        };
        let tuned = TunedNoise {
            r_los: [9.06, 0.10, 0.28],
            r_nlos: [28.99, 0.37, 0.63],
            d_th: 1.0,
            violations: 1,
            n_constraints: 2,
            max_distance: 1.3,
            penalized_objective: 40.0,
            evals: 10,
        };
        let report = CalibrationReport::new(&fit, &tuned, 2);
        let dir = std::env::temp_dir().join(format!("calib-report-{}", std::process::id()));
        report.save(&dir).unwrap();
        assert_eq!(CalibrationReport::load(&dir).unwrap(), report);
        std::fs::remove_file(&dir).unwrap();
    }
}
