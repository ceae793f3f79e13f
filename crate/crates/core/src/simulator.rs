//! Seeded crowd scenes with UWB and camera sensor models.
//!
//! People follow random-waypoint walks inside a convex area. Carriers hold a
//! tag beside their body axis; UWB measurements through any body cylinder
//! (the carrier's own included) get NLoS errors and NLoS-looking signal
//! features. The camera sees head boxes, drops heads hidden behind nearer
//! heads, and starts a new tracklet after a long drop or an id switch.

use crate::geometry::{world_to_anchor_polar, wrap_angle, AnchorPose, CameraExtrinsics, CameraIntrinsics, HeadDetection, PolarMeasurement, Vec3};
use crate::nlos::SignalFeatures;
use crate::tracking::UwbSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Half-width of the tolerance sphere around the tag in occlusion tests.
pub const TAG_CLEARANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("area polygon must be simple, convex and have at least 3 vertices")]
    InvalidPolygon,
    #[error("invalid scene: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Convex walking area on the ground plane (z ignored).
    pub area: Vec<Vec3>,
    pub n_people: usize,
    pub n_tags: usize,
    pub duration: f64,
    pub camera_rate: f64,
    pub uwb_rate: f64,
    pub speed_range: [f64; 2],
    /// Sampled speeds below this become a pause instead of a walk.
    pub pause_below: f64,
    pub pause_range: [f64; 2],
    /// Largest change of walking velocity in m/s². People slow down into
    /// each waypoint and turn there. A non-positive value gives instant
    /// turns at full speed.
    pub max_accel: f64,
    /// Time resolution of the smoothed paths.
    pub motion_step: f64,
    pub body_radius: f64,
    /// Height of the head center.
    pub head_height_range: [f64; 2],
    pub head_width_mean: f64,
    pub head_width_sd: f64,
    pub tag_height: f64,
    /// Lateral distance of the tag from the body axis, to the right of the
    /// walking direction.
    pub tag_offset: f64,
    /// Whether a carrier's own body can block their tag.
    pub self_occlusion: bool,
    pub seed: u64,
}

impl SceneConfig {
    /// One demonstrator walking at a steady pace, the kind of recording used
    /// for calibration.
    pub fn calibration_walk(duration: f64, seed: u64) -> Self {
        Self {
            n_people: 1,
            n_tags: 1,
            duration,
            speed_range: [0.5, 1.5],
            self_occlusion: false,
            seed,
            ..Default::default()
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            area: default_area(),
            n_people: 8,
            n_tags: 1,
            duration: 60.0,
            camera_rate: 10.0,
            uwb_rate: 5.0,
            speed_range: [0.0, 2.0],
            pause_below: 0.2,
            pause_range: [1.0, 5.0],
            max_accel: 1.0,
            motion_step: 0.1,
            body_radius: 0.25,
            head_height_range: [1.5, 1.8],
            head_width_mean: 0.30,
            head_width_sd: 0.02,
            tag_height: 1.17,
            tag_offset: 0.15,
            self_occlusion: true,
            seed: 0,
        }
    }
}

/// Trapezoid filling the default camera's view of the floor: 1.8 m wide
/// near, 4.4 m wide far, 5 m deep.
pub fn default_area() -> Vec<Vec3> {
    vec![
        Vec3::new(-0.9, -1.9, 0.0),
        Vec3::new(0.9, -1.9, 0.0),
        Vec3::new(2.2, 3.1, 0.0),
        Vec3::new(-2.2, 3.1, 0.0),
    ]
}

/// Anchor pose used by default scenes.
#[allow(clippy::approx_constant)]
pub fn default_anchor() -> AnchorPose {
    AnchorPose::new(Vec3::new(0.29, -3.29, 2.57), [3.14, 0.28, 1.56])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSetup {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSetup {
    /// 1280x720 camera beside the anchor, looking along +y and tilted 10 deg
    /// down.
    fn default() -> Self {
        let center = Vec3::new(0.0, -3.3, 2.5);
        let pitch = 10f64.to_radians();
        let target = center + Vec3::new(0.0, pitch.cos(), -pitch.sin());
        Self {
            intrinsics: CameraIntrinsics {
                fx: 900.0,
                fy: 900.0,
                cx: 640.0,
                cy: 360.0,
            },
            extrinsics: CameraExtrinsics::look_at(center, target).expect("valid default camera"),
            width: 1280,
            height: 720,
        }
    }
}

fn cross2(o: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

pub fn validate_polygon(poly: &[Vec3]) -> Result<(), SimulatorError> {
    let n = poly.len();
    if n < 3 || poly.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(SimulatorError::InvalidPolygon);
    }
    let mut sign = 0.0;
    for k in 0..n {
        let c = cross2(&poly[k], &poly[(k + 1) % n], &poly[(k + 2) % n]);
        if c == 0.0 {
            return Err(SimulatorError::InvalidPolygon);
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return Err(SimulatorError::InvalidPolygon);
        }
    }
    // a convex turn sequence can still wind twice (a pentagram)
    let mut angle = 0.0;
    for k in 0..n {
        let (a, b, c) = (&poly[k], &poly[(k + 1) % n], &poly[(k + 2) % n]);
        let e1 = (b.y - a.y).atan2(b.x - a.x);
        let e2 = (c.y - b.y).atan2(c.x - b.x);
        angle += wrap_angle(e2 - e1);
    }
    if (angle.abs() - 2.0 * PI).abs() > 1e-6 {
        return Err(SimulatorError::InvalidPolygon);
    }
    Ok(())
}

/// Inside-or-on test for a convex polygon.
pub fn point_in_convex(poly: &[Vec3], x: f64, y: f64) -> bool {
    let p = Vec3::new(x, y, 0.0);
    let n = poly.len();
    let mut sign = 0.0;
    for k in 0..n {
        let c = cross2(&poly[k], &poly[(k + 1) % n], &p);
        if c.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

fn sample_in_polygon(poly: &[Vec3], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in poly {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    loop {
        let x = rng.random_range(x0..=x1);
        let y = rng.random_range(y0..=y1);
        if point_in_convex(poly, x, y) {
            return (x, y);
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonTruth {
    pub person_id: u64,
    /// Piecewise-linear path; consecutive equal positions are pauses.
    pub waypoints: Vec<Waypoint>,
    pub head_width: f64,
    pub head_height: f64,
    pub carries_tag: bool,
    /// Facing direction before the first move.
    pub initial_heading: f64,
}

impl PersonTruth {
    fn segment(&self, t: f64) -> usize {
        let k = self.waypoints.partition_point(|w| w.t <= t);
        k.clamp(1, self.waypoints.len().max(2) - 1)
    }

    pub fn ground_at(&self, t: f64) -> (f64, f64) {
        let w = &self.waypoints;
        if w.len() == 1 || t <= w[0].t {
            return (w[0].x, w[0].y);
        }
        let last = w[w.len() - 1];
        if t >= last.t {
            return (last.x, last.y);
        }
        let k = self.segment(t);
        let (a, b) = (w[k - 1], w[k]);
        let span = b.t - a.t;
        let s = if span > 0.0 { (t - a.t) / span } else { 1.0 };
        (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y))
    }

    /// Direction of the most recent movement at or before `t`.
    pub fn heading_at(&self, t: f64) -> f64 {
        let w = &self.waypoints;
        if w.len() < 2 {
            return self.initial_heading;
        }
        let mut k = self.segment(t.min(w[w.len() - 1].t));
        loop {
            let (a, b) = (w[k - 1], w[k]);
            if (b.x - a.x).abs() > 1e-12 || (b.y - a.y).abs() > 1e-12 {
                return (b.y - a.y).atan2(b.x - a.x);
            }
            if k == 1 {
                return self.initial_heading;
            }
            k -= 1;
        }
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let w = &self.waypoints;
        if w.len() < 2 || t < w[0].t || t >= w[w.len() - 1].t {
            return 0.0;
        }
        let k = self.segment(t);
        let (a, b) = (w[k - 1], w[k]);
        ((b.x - a.x).hypot(b.y - a.y)) / (b.t - a.t)
    }

    pub fn head_at(&self, t: f64) -> Vec3 {
        let (x, y) = self.ground_at(t);
        Vec3::new(x, y, self.head_height)
    }

    pub fn tag_at(&self, t: f64, offset: f64, height: f64) -> Vec3 {
        let (x, y) = self.ground_at(t);
        let h = self.heading_at(t);
        Vec3::new(x + offset * h.sin(), y - offset * h.cos(), height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SceneConfig,
    pub people: Vec<PersonTruth>,
}

/// Vertical body cylinder standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Body {
    pub center: Vec3,
    pub radius: f64,
    pub height: f64,
}

impl GroundTruth {
    pub fn carriers(&self) -> impl Iterator<Item = &PersonTruth> {
        self.people.iter().filter(|p| p.carries_tag)
    }

    pub fn tag_position(&self, person: &PersonTruth, t: f64) -> Vec3 {
        person.tag_at(t, self.config.tag_offset, self.config.tag_height)
    }

    /// Body cylinders at `t`, with the carrier's own body thinned so that it
    /// does not swallow the tag it holds.
    pub fn bodies_at(&self, t: f64, carrier: Option<u64>) -> Vec<Body> {
        let own_radius = (self.config.tag_offset - TAG_CLEARANCE).max(0.0);
        self.people
            .iter()
            .filter_map(|p| {
                let (x, y) = p.ground_at(t);
                let own = carrier == Some(p.person_id);
                if own && !self.config.self_occlusion {
                    return None;
                }
                Some(Body {
                    center: Vec3::new(x, y, 0.0),
                    radius: if own { own_radius.min(self.config.body_radius) } else { self.config.body_radius },
                    height: p.head_height + 0.1,
                })
            })
            .collect()
    }
}

pub fn validate_scene(cfg: &SceneConfig) -> Result<(), SimulatorError> {
    validate_polygon(&cfg.area)?;
    let bad = |m: &str| Err(SimulatorError::InvalidConfig(m.to_string()));
    if cfg.n_people == 0 {
        return bad("need at least one person");
    }
    if cfg.n_tags > cfg.n_people {
        return bad("more tags than people");
    }
    if !(cfg.duration > 0.0 && cfg.camera_rate > 0.0 && cfg.uwb_rate > 0.0) {
        return bad("duration and rates must be positive");
    }
    if !(cfg.speed_range[0] >= 0.0 && cfg.speed_range[1] >= cfg.speed_range[0]) {
        return bad("speed range must be ordered and non-negative");
    }
    if !(cfg.pause_range[0] > 0.0 && cfg.pause_range[1] >= cfg.pause_range[0]) {
        return bad("pause range must be ordered and positive");
    }
    if cfg.max_accel > 0.0 && !(cfg.motion_step > 0.0) {
        return bad("motion step must be positive");
    }
    Ok(())
}

fn straight_walk(cfg: &SceneConfig, start: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Waypoint> {
    let mut waypoints = vec![Waypoint { t: 0.0, x: start.0, y: start.1 }];
    let mut t = 0.0;
    let (mut cx, mut cy) = start;
    while t < cfg.duration {
        let speed = uniform(rng, cfg.speed_range);
        if speed < cfg.pause_below {
            t += uniform(rng, cfg.pause_range);
            waypoints.push(Waypoint { t, x: cx, y: cy });
            continue;
        }
        let (nx, ny) = sample_in_polygon(&cfg.area, rng);
        let dist = (nx - cx).hypot(ny - cy);
        if dist < 1e-9 {
            continue;
        }
        t += dist / speed;
        waypoints.push(Waypoint { t, x: nx, y: ny });
        (cx, cy) = (nx, ny);
    }
    waypoints
}

/// Random waypoints walked with bounded acceleration, sampled every
/// `motion_step` seconds.
fn steered_walk(cfg: &SceneConfig, start: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<Waypoint> {
    let dt = cfg.motion_step;
    let dv_max = cfg.max_accel * dt;
    let mut waypoints = vec![Waypoint { t: 0.0, x: start.0, y: start.1 }];
    let (mut px, mut py) = start;
    let (mut vx, mut vy) = (0.0f64, 0.0f64);
    let mut k = 0u64;
    let step = |vx: f64, vy: f64, px: &mut f64, py: &mut f64, k: &mut u64, out: &mut Vec<Waypoint>| {
        let (nx, ny) = (*px + vx * dt, *py + vy * dt);
        if point_in_convex(&cfg.area, nx, ny) {
            (*px, *py) = (nx, ny);
        }
        *k += 1;
        out.push(Waypoint {
            t: *k as f64 * dt,
            x: *px,
            y: *py,
        });
    };
    while (k as f64) * dt < cfg.duration {
        let speed = uniform(rng, cfg.speed_range);
        if speed < cfg.pause_below {
            while vx.hypot(vy) > 0.0 && (k as f64) * dt < cfg.duration {
                let v = vx.hypot(vy);
                let scale = (v - dv_max).max(0.0) / v;
                (vx, vy) = (vx * scale, vy * scale);
                step(vx, vy, &mut px, &mut py, &mut k, &mut waypoints);
            }
            let hold = uniform(rng, cfg.pause_range);
            let t = k as f64 * dt + hold;
            waypoints.push(Waypoint { t, x: px, y: py });
            k = (t / dt).ceil() as u64;
            continue;
        }
        let (tx, ty) = sample_in_polygon(&cfg.area, rng);
        for _ in 0..100_000 {
            let (dx, dy) = (tx - px, ty - py);
            let dist = dx.hypot(dy);
            if dist <= (vx.hypot(vy) * dt).max(0.05) || (k as f64) * dt >= cfg.duration {
                break;
            }
            let want = speed.min((2.0 * cfg.max_accel * dist).sqrt());
            let (ex, ey) = (dx / dist * want - vx, dy / dist * want - vy);
            let e = ex.hypot(ey);
            let s = if e > dv_max { dv_max / e } else { 1.0 };
            (vx, vy) = (vx + ex * s, vy + ey * s);
            step(vx, vy, &mut px, &mut py, &mut k, &mut waypoints);
        }
    }
    waypoints
}

/// Random-waypoint crowd. People `0..n_tags` carry tags.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruth, SimulatorError> {
    validate_scene(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = Normal::new(cfg.head_width_mean, cfg.head_width_sd.max(0.0))
        .map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
    let mut people = Vec::with_capacity(cfg.n_people);
    for id in 0..cfg.n_people {
        let head_width = width.sample(&mut rng).clamp(0.24, 0.36);
        let head_height = uniform(&mut rng, cfg.head_height_range);
        let initial_heading = rng.random_range(-PI..PI);
        let (x, y) = sample_in_polygon(&cfg.area, &mut rng);
        let waypoints = if cfg.max_accel > 0.0 {
            steered_walk(cfg, (x, y), &mut rng)
        } else {
            straight_walk(cfg, (x, y), &mut rng)
        };
        people.push(PersonTruth {
            person_id: id as u64,
            waypoints,
            head_width,
            head_height,
            carries_tag: id < cfg.n_tags,
            initial_heading,
        });
    }
    Ok(GroundTruth {
        config: cfg.clone(),
        people,
    })
}

fn segment_distance(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-18 && e <= 1e-18 {
        return r.norm();
    }
    if a <= 1e-18 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-18 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-18 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

/// True iff the anchor-to-tag segment, minus the last `TAG_CLEARANCE`
/// meters at the tag, comes closer than a body radius to its axis.
pub fn occlusion_test(anchor: &Vec3, tag: &Vec3, bodies: &[Body]) -> bool {
    let span = tag - anchor;
    let len = span.norm();
    if len <= TAG_CLEARANCE {
        return false;
    }
    let end = anchor + span * ((len - TAG_CLEARANCE) / len);
    bodies.iter().any(|b| {
        let base = Vec3::new(b.center.x, b.center.y, 0.0);
        let top = Vec3::new(b.center.x, b.center.y, b.height);
        segment_distance(anchor, &end, &base, &top) < b.radius
    })
}

/// Class-conditional Gaussian model for the signal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub los_mean: Vec<f64>,
    pub los_sd: Vec<f64>,
    pub nlos_mean: Vec<f64>,
    pub nlos_sd: Vec<f64>,
}

impl Default for FeatureModel {
    /// delay (ns), peak amplitude, energy, SNR (dB), RSSI (dBm), first-path
    /// amplitude.
    fn default() -> Self {
        Self {
            los_mean: vec![1.0, 1.0, 1.0, 20.0, -80.0, 0.9],
            los_sd: vec![0.5, 0.2, 0.2, 4.0, 3.0, 0.15],
            nlos_mean: vec![3.0, 0.6, 0.7, 8.0, -88.0, 0.4],
            nlos_sd: vec![1.5, 0.2, 0.25, 4.0, 4.0, 0.2],
        }
    }
}

impl FeatureModel {
    pub fn dim(&self) -> usize {
        self.los_mean.len()
    }

    pub fn sample(&self, nlos: bool, rng: &mut ChaCha8Rng) -> SignalFeatures {
        let (mean, sd) = if nlos { (&self.nlos_mean, &self.nlos_sd) } else { (&self.los_mean, &self.los_sd) };
        SignalFeatures::new(
            mean.iter()
                .zip(sd)
                .map(|(m, s)| {
                    let z: f64 = rand_distr::StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UwbNoiseConfig {
    pub los_radial_sd: f64,
    pub los_angle_sd_deg: f64,
    pub nlos_bias_range: [f64; 2],
    pub nlos_radial_sd: f64,
    pub nlos_angle_sd_deg: f64,
    /// Probability that a sample is NLoS regardless of geometry.
    pub forced_nlos_fraction: f64,
    pub features: FeatureModel,
}

impl Default for UwbNoiseConfig {
    fn default() -> Self {
        Self {
            los_radial_sd: 0.1,
            los_angle_sd_deg: 2.0,
            nlos_bias_range: [0.5, 5.0],
            nlos_radial_sd: 1.0,
            nlos_angle_sd_deg: 45.0,
            forced_nlos_fraction: 0.0,
            features: FeatureModel::default(),
        }
    }
}

impl UwbNoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            los_radial_sd: 0.0,
            los_angle_sd_deg: 0.0,
            nlos_bias_range: [0.0, 0.0],
            nlos_radial_sd: 0.0,
            nlos_angle_sd_deg: 0.0,
            forced_nlos_fraction: 0.0,
            features: FeatureModel::default(),
        }
    }
}

/// UWB stream plus the true link condition of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedUwb {
    pub samples: Vec<UwbSample>,
    pub nlos: Vec<bool>,
}

fn perturb(z: PolarMeasurement, dr: f64, da: f64, de: f64) -> PolarMeasurement {
    if dr == 0.0 && da == 0.0 && de == 0.0 {
        return z;
    }
    let mut az = z.azimuth + da;
    let mut el = z.elevation + de;
    // fold elevation back over the pole
    if el > PI / 2.0 {
        el = PI - el;
        az += PI;
    } else if el < -PI / 2.0 {
        el = -PI - el;
        az += PI;
    }
    let el = el.clamp(-PI / 2.0, PI / 2.0);
    let az = if az > -PI && az <= PI { az } else { wrap_angle(az) };
    PolarMeasurement::new((z.radial + dr).max(0.05), az, el)
}

/// Tag id used for a carrier.
pub fn tag_id_of(person_id: u64) -> String {
    person_id.to_string()
}

pub fn simulate_uwb(gt: &GroundTruth, anchor: &AnchorPose, noise: &UwbNoiseConfig, seed: u64) -> SimulatedUwb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deg = PI / 180.0;
    let gauss = |sd: f64| Normal::new(0.0, sd.max(0.0)).expect("finite sd");
    let (los_r, los_a) = (gauss(noise.los_radial_sd), gauss(noise.los_angle_sd_deg * deg));
    let (nlos_r, nlos_a) = (gauss(noise.nlos_radial_sd), gauss(noise.nlos_angle_sd_deg * deg));
    let period = 1.0 / gt.config.uwb_rate;

    let mut out: Vec<(f64, u64, UwbSample, bool)> = Vec::new();
    for person in gt.carriers() {
        let phase = rng.random_range(0.0..period);
        let mut k = 0u64;
        loop {
            let t = phase + k as f64 / gt.config.uwb_rate;
            if t >= gt.config.duration {
                break;
            }
            k += 1;
            let tag = gt.tag_position(person, t);
            let Ok(truth) = world_to_anchor_polar(&tag, anchor) else { continue };
            let forced = noise.forced_nlos_fraction > 0.0 && rng.random_bool(noise.forced_nlos_fraction.min(1.0));
            let nlos = forced || occlusion_test(&anchor.position, &tag, &gt.bodies_at(t, Some(person.person_id)));
            let z = if nlos {
                let bias = uniform(&mut rng, noise.nlos_bias_range);
                perturb(truth, bias + nlos_r.sample(&mut rng), nlos_a.sample(&mut rng), nlos_a.sample(&mut rng))
            } else {
                perturb(truth, los_r.sample(&mut rng), los_a.sample(&mut rng), los_a.sample(&mut rng))
            };
            let features = noise.features.sample(nlos, &mut rng);
            out.push((
                t,
                person.person_id,
                UwbSample {
                    tag_id: tag_id_of(person.person_id),
                    timestamp: t,
                    z,
                    features,
                },
                nlos,
            ));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    SimulatedUwb {
        samples: out.iter().map(|o| o.2.clone()).collect(),
        nlos: out.iter().map(|o| o.3).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraNoiseConfig {
    pub center_sd_px: f64,
    pub width_sd_px: f64,
    /// Heads overlapping a nearer head by more than this IoU are hidden.
    pub occlusion_iou: f64,
    /// A person unseen for at least this long comes back as a new tracklet.
    pub fragment_gap: f64,
    /// Expected id switches per second of visibility.
    pub id_switch_rate: f64,
}

impl Default for CameraNoiseConfig {
    fn default() -> Self {
        Self {
            center_sd_px: 2.0,
            width_sd_px: 1.0,
            occlusion_iou: 0.5,
            fragment_gap: 0.5,
            id_switch_rate: 0.02,
        }
    }
}

impl CameraNoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            center_sd_px: 0.0,
            width_sd_px: 0.0,
            id_switch_rate: 0.0,
            ..Self::default()
        }
    }
}

/// Which person a tracklet belongs to at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t: f64,
    pub tracklet_id: u64,
    pub person_id: u64,
    pub carries_tag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDetections {
    pub detections: Vec<HeadDetection>,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, Copy)]
struct BoxPx {
    u: f64,
    v: f64,
    w: f64,
    h: f64,
}

fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let ix = ((a.u + a.w / 2.0).min(b.u + b.w / 2.0) - (a.u - a.w / 2.0).max(b.u - b.w / 2.0)).max(0.0);
    let iy = ((a.v + a.h / 2.0).min(b.v + b.h / 2.0) - (a.v - a.h / 2.0).max(b.v - b.h / 2.0)).max(0.0);
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Ratio of head-box height to width.
pub const HEAD_BOX_ASPECT: f64 = 1.2;

/// Frame timestamps `k / rate` below `duration`.
pub fn frame_times(duration: f64, rate: f64) -> Vec<f64> {
    (0u64..)
        .map(|k| k as f64 / rate)
        .take_while(|t| *t < duration)
        .collect()
}

pub fn simulate_detections(gt: &GroundTruth, camera: &CameraSetup, noise: &CameraNoiseConfig, seed: u64) -> SimulatedDetections {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, noise.center_sd_px.max(0.0)).expect("finite sd");
    let width = Normal::new(0.0, noise.width_sd_px.max(0.0)).expect("finite sd");
    let dt = 1.0 / gt.config.camera_rate;
    let switch_p = (noise.id_switch_rate * dt).clamp(0.0, 1.0);
    let intr = &camera.intrinsics;

    let mut next_id = 0u64;
    let mut current: Vec<Option<u64>> = vec![None; gt.people.len()];
    let mut last_seen: Vec<f64> = vec![f64::NEG_INFINITY; gt.people.len()];
    let mut detections = Vec::new();
    let mut truth = Vec::new();

    for t in frame_times(gt.config.duration, gt.config.camera_rate) {
        let mut boxes: Vec<Option<(BoxPx, f64)>> = Vec::with_capacity(gt.people.len());
        for p in &gt.people {
            let pc = camera.extrinsics.world_to_camera(&p.head_at(t));
            if pc.z < 0.2 {
                boxes.push(None);
                continue;
            }
            let (u, v) = intr.project(&pc);
            let inside = u >= 0.0 && u < camera.width as f64 && v >= 0.0 && v < camera.height as f64;
            let w = intr.fx * p.head_width / pc.z;
            boxes.push(inside.then_some((
                BoxPx {
                    u,
                    v,
                    w,
                    h: HEAD_BOX_ASPECT * w,
                },
                pc.z,
            )));
        }
        let mut frame: Vec<(u64, HeadDetection, TruthRecord)> = Vec::new();
        for (k, p) in gt.people.iter().enumerate() {
            let Some((b, depth)) = boxes[k] else { continue };
            let hidden = boxes.iter().enumerate().any(|(m, o)| {
                m != k && o.is_some_and(|(ob, od)| od < depth && iou(&b, &ob) > noise.occlusion_iou)
            });
            let du = center.sample(&mut rng);
            let dv = center.sample(&mut rng);
            let dw = width.sample(&mut rng);
            let switch = switch_p > 0.0 && rng.random_bool(switch_p);
            if hidden {
                continue;
            }
            let missed = t - last_seen[k] - dt;
            if current[k].is_none() || missed >= noise.fragment_gap - 1e-9 || switch {
                current[k] = Some(next_id);
                next_id += 1;
            }
            last_seen[k] = t;
            let id = current[k].expect("assigned above");
            let w = (b.w + dw).max(1.0);
            frame.push((
                id,
                HeadDetection {
                    tracklet_id: id,
                    timestamp: t,
                    u: b.u + du,
                    v: b.v + dv,
                    width: w,
                    height: HEAD_BOX_ASPECT * w,
                },
                TruthRecord {
                    t,
                    tracklet_id: id,
                    person_id: p.person_id,
                    carries_tag: p.carries_tag,
                },
            ));
        }
        frame.sort_by_key(|f| f.0);
        for (_, d, r) in frame {
            detections.push(d);
            truth.push(r);
        }
    }
    SimulatedDetections { detections, truth }
}

/// Seed for the `k`-th generator derived from a scene seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
