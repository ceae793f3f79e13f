//! Unscented Kalman filter over the tag state `(x, v_x, y, v_y, z)`.
//!
//! Motion is constant-velocity on the ground plane and constant-position in
//! height, so prediction is linear and done in closed form. The measurement
//! update pushes scaled sigma points through the anchor observation model
//! and switches the observation noise between the LoS and NLoS covariances
//! according to an NLoS classifier.

use crate::geometry::{anchor_polar_to_world, world_to_anchor_polar, wrap_angle, AnchorPose, GeometryError, PolarMeasurement, Vec3};
use crate::nlos::{LinkCondition, NlosClassifier, NlosError, SignalFeatures};
use nalgebra::{Cholesky, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type StateVector = SVector<f64, 5>;
pub type StateMatrix = SMatrix<f64, 5, 5>;

const STATE_DIM: usize = 5;
const JITTER: f64 = 1e-9;
const JITTER_RETRIES: usize = 3;
/// Timestamps closer than this are treated as the same instant.
pub const TIME_EPS: f64 = 1e-9;

/// Indices of the position components inside the state vector.
pub const POS_IDX: [usize; 3] = [0, 2, 4];

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("covariance is not positive definite after jitter")]
    CovarianceNotPD,
    #[error("no samples to track")]
    EmptyInput,
    #[error("timestamps must be strictly increasing ({prev} then {next})")]
    NonMonotonicTimestamps { prev: f64, next: f64 },
    #[error("samples from several tags passed to a single-tag filter")]
    MixedTags,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Detector(#[from] NlosError),
}

/// Filtered belief over one tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UkfState {
    pub mean: StateVector,
    pub cov: StateMatrix,
    pub timestamp: f64,
}

impl UkfState {
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.mean[0], self.mean[2], self.mean[4])
    }

    pub fn position_cov(&self) -> Matrix3<f64> {
        position_marginal(&self.cov)
    }
}

pub fn position_marginal(cov: &StateMatrix) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| cov[(POS_IDX[r], POS_IDX[c])])
}

/// Observation and process noise of the filter.
///
/// `r_los`/`r_nlos` hold the diagonals of the observation covariances in
/// (m², rad², rad²) for (radial, azimuth, elevation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub r_los: [f64; 3],
    pub r_nlos: [f64; 3],
    pub q_velocity_var: f64,
    pub q_height_var: f64,
}

impl NoiseModel {
    /// 0.5 m / 10 deg for LoS and 5 m / 45 deg for NLoS, squared.
    pub fn hand_designed() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            r_los: [0.5 * 0.5, (10.0 * deg).powi(2), (10.0 * deg).powi(2)],
            r_nlos: [5.0 * 5.0, (45.0 * deg).powi(2), (45.0 * deg).powi(2)],
            q_velocity_var: 4.0,
            q_height_var: 0.25,
        }
    }

    pub fn r_los_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.r_los))
    }

    pub fn r_nlos_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.r_nlos))
    }

    pub fn observation_cov(&self, link: LinkCondition) -> Matrix3<f64> {
        match link {
            LinkCondition::Los => self.r_los_matrix(),
            LinkCondition::Nlos => self.r_nlos_matrix(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.r_los.iter().chain(self.r_nlos.iter()).all(|v| v.is_finite() && *v >= 0.0)
            && self.q_velocity_var >= 0.0
            && self.q_height_var >= 0.0
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::hand_designed()
    }
}

/// One UWB observation of one tag.
#[derive(Debug, Clone, PartialEq)]
pub struct UwbSample {
    pub tag_id: String,
    pub timestamp: f64,
    pub z: PolarMeasurement,
    pub features: SignalFeatures,
}

/// Scaled unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Discrete white-noise acceleration model for the two ground axes plus a
/// random-walk height.
pub fn process_noise(dt: f64, q_velocity_var: f64, q_height_var: f64) -> Result<StateMatrix, TrackingError> {
    if !(dt > 0.0) {
        return Err(TrackingError::NonPositiveDt(dt));
    }
    let mut q = StateMatrix::zeros();
    let (a, b, c) = (dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt * dt);
    for base in [0usize, 2] {
        q[(base, base)] = q_velocity_var * a;
        q[(base, base + 1)] = q_velocity_var * b;
        q[(base + 1, base)] = q_velocity_var * b;
        q[(base + 1, base + 1)] = q_velocity_var * c;
    }
    q[(4, 4)] = q_height_var * c;
    Ok(q)
}

pub fn transition(dt: f64) -> StateMatrix {
    let mut f = StateMatrix::identity();
    f[(0, 1)] = dt;
    f[(2, 3)] = dt;
    f
}

pub fn predict(state: &UkfState, dt: f64, noise: &NoiseModel) -> Result<UkfState, TrackingError> {
    let q = process_noise(dt, noise.q_velocity_var, noise.q_height_var)?;
    Ok(predict_with_q(state, dt, &q))
}

fn predict_with_q(state: &UkfState, dt: f64, q: &StateMatrix) -> UkfState {
    let f = transition(dt);
    let mut mean = state.mean;
    mean[0] += mean[1] * dt;
    mean[2] += mean[3] * dt;
    let cov = symmetrize(&(f * state.cov * f.transpose() + q));
    UkfState {
        mean,
        cov,
        timestamp: state.timestamp + dt,
    }
}

fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

fn cholesky_with_jitter<const N: usize>(
    m: &SMatrix<f64, N, N>,
) -> Result<Cholesky<f64, nalgebra::Const<N>>, TrackingError> {
    let mut work = *m;
    let mut jitter = JITTER * (work.trace() / N as f64).abs().max(1.0);
    for attempt in 0..=JITTER_RETRIES {
        if let Some(ch) = Cholesky::new(work) {
            return Ok(ch);
        }
        if attempt < JITTER_RETRIES {
            work += SMatrix::<f64, N, N>::identity() * jitter;
            jitter *= 100.0;
        }
    }
    Err(TrackingError::CovarianceNotPD)
}

/// Returns `m` symmetrized, with jitter added if it does not factorize.
fn ensure_pd(m: StateMatrix) -> Result<StateMatrix, TrackingError> {
    let ch = cholesky_with_jitter(&symmetrize(&m))?;
    Ok(ch.l() * ch.l().transpose())
}

/// Measurement residual with the flagged components wrapped into `(-pi, pi]`.
pub fn innovation(measured: &Vector3<f64>, predicted: &Vector3<f64>, angular: [bool; 3]) -> Vector3<f64> {
    let mut d = measured - predicted;
    for (k, wrap) in angular.iter().enumerate() {
        if *wrap {
            d[k] = wrap_angle(d[k]);
        }
    }
    d
}

/// Angular components of a polar measurement vector.
pub const POLAR_ANGULAR: [bool; 3] = [false, true, true];

/// Generic unscented measurement update for a 3-dimensional observation.
pub fn update_with<H>(
    state: &UkfState,
    z: &Vector3<f64>,
    r: &Matrix3<f64>,
    h: H,
    angular: [bool; 3],
    params: SigmaParams,
) -> Result<UkfState, TrackingError>
where
    H: Fn(&StateVector) -> Result<Vector3<f64>, TrackingError>,
{
    let n = STATE_DIM as f64;
    let lambda = params.alpha * params.alpha * (n + params.kappa) - n;
    let spread = n + lambda;
    let chol = cholesky_with_jitter(&(state.cov * spread))?;
    let l = chol.l();

    let wm0 = lambda / spread;
    let wc0 = wm0 + (1.0 - params.alpha * params.alpha + params.beta);
    let wi = 1.0 / (2.0 * spread);

    let mut sigmas = [state.mean; 2 * STATE_DIM + 1];
    for k in 0..STATE_DIM {
        let col = l.column(k);
        sigmas[1 + k] += col;
        sigmas[1 + STATE_DIM + k] -= col;
    }
    let mut zs = [Vector3::zeros(); 2 * STATE_DIM + 1];
    for (zi, s) in zs.iter_mut().zip(sigmas.iter()) {
        *zi = h(s)?;
    }

    // deviations are taken from the central point, wrapped once, and never
    // re-wrapped, so the weighted sums stay a consistent covariance even when
    // the predicted mean sits far from the central point
    let devs: Vec<Vector3<f64>> = zs.iter().map(|zi| innovation(zi, &zs[0], angular)).collect();
    let mut z_mean_offset = Vector3::zeros();
    for d in devs.iter().skip(1) {
        z_mean_offset += d * wi;
    }

    let mut s = *r;
    let mut pxz = SMatrix::<f64, 5, 3>::zeros();
    for (i, (d, xi)) in devs.iter().zip(sigmas.iter()).enumerate() {
        let w = if i == 0 { wc0 } else { wi };
        let dz = d - z_mean_offset;
        let dx = xi - state.mean;
        s += dz * dz.transpose() * w;
        pxz += dx * dz.transpose() * w;
    }
    let s = symmetrize(&s);
    let s_chol = cholesky_with_jitter(&s)?;
    // K = Pxz S^-1  <=>  S K^T = Pxz^T
    let gain = s_chol.solve(&pxz.transpose()).transpose();
    let nu = innovation(z, &zs[0], angular) - z_mean_offset;
    let mean = state.mean + gain * nu;
    let cov = ensure_pd(symmetrize(&(state.cov - gain * s * gain.transpose())))?;
    Ok(UkfState {
        mean,
        cov,
        timestamp: state.timestamp,
    })
}

/// Polar observation model applied to a state vector.
pub fn observe(state: &StateVector, pose: &AnchorPose) -> Result<Vector3<f64>, GeometryError> {
    let p = Vec3::new(state[0], state[2], state[4]);
    world_to_anchor_polar(&p, pose).map(PolarMeasurement::to_vector)
}

/// UKF update with a polar anchor measurement.
pub fn update(state: &UkfState, z: &PolarMeasurement, pose: &AnchorPose, r: &Matrix3<f64>) -> Result<UkfState, TrackingError> {
    update_with(
        state,
        &z.to_vector(),
        r,
        |s| observe(s, pose).map_err(TrackingError::from),
        POLAR_ANGULAR,
        SigmaParams::default(),
    )
}

/// Predict to the sample time, then update with the covariance picked by the
/// detector. Returns the link condition that was used.
pub fn step<D: NlosClassifier + ?Sized>(
    state: &UkfState,
    sample: &UwbSample,
    pose: &AnchorPose,
    noise: &NoiseModel,
    detector: &D,
) -> Result<(UkfState, LinkCondition), TrackingError> {
    let link = detector.classify(&sample.features)?;
    let next = step_with_link(state, sample, pose, noise, link)?;
    Ok((next, link))
}

/// `step` with the link condition already decided.
pub fn step_with_link(
    state: &UkfState,
    sample: &UwbSample,
    pose: &AnchorPose,
    noise: &NoiseModel,
    link: LinkCondition,
) -> Result<UkfState, TrackingError> {
    let dt = sample.timestamp - state.timestamp;
    let prior = predict(state, dt, noise)?;
    let mut post = update(&prior, &sample.z, pose, &noise.observation_cov(link))?;
    post.timestamp = sample.timestamp;
    Ok(post)
}

pub fn max_eigenvalue(m: &Matrix3<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// True when the largest eigenvalue of the position covariance exceeds `u_th`.
pub fn uncertainty_flag(state: &UkfState, u_th: f64) -> bool {
    max_eigenvalue(&state.position_cov()) > u_th
}

/// How a track is started from its first sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    /// Diagonal of the initial covariance in state order.
    pub variances: [f64; 5],
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            variances: [1.0, 4.0, 1.0, 4.0, 0.25],
        }
    }
}

impl InitPolicy {
    /// Starts at the first sample's position. Its covariance is the policy's
    /// diagonal plus the observation covariance `obs_cov` carried into world
    /// coordinates, so a track opened on a poor sample is not overconfident.
    pub fn initialize(&self, sample: &UwbSample, pose: &AnchorPose, obs_cov: &Matrix3<f64>) -> UkfState {
        let p = anchor_polar_to_world(&sample.z, pose);
        let z = sample.z.to_vector();
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let h = 1e-6 * z[k].abs().max(1.0);
            let mut hi = z;
            let mut lo = z;
            hi[k] += h;
            lo[k] -= h;
            let d = (anchor_polar_to_world(&PolarMeasurement::from_vector(&hi), pose)
                - anchor_polar_to_world(&PolarMeasurement::from_vector(&lo), pose))
                / (2.0 * h);
            jac.set_column(k, &d);
        }
        let pos_cov = jac * obs_cov * jac.transpose();
        let mut cov = StateMatrix::from_diagonal(&StateVector::from(self.variances));
        for (a, &i) in POS_IDX.iter().enumerate() {
            for (b, &j) in POS_IDX.iter().enumerate() {
                cov[(i, j)] += pos_cov[(a, b)];
            }
        }
        UkfState {
            mean: StateVector::from([p.x, 0.0, p.y, 0.0, p.z]),
            cov,
            timestamp: sample.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub timestamp: f64,
    pub position: Vec3,
    pub position_cov: Matrix3<f64>,
    pub uncertain: bool,
    pub nlos: bool,
}

/// Filtered trajectory of one tag, with the posterior at every sample kept
/// so the belief can be queried at arbitrary times.
#[derive(Debug, Clone, PartialEq)]
pub struct TagTrajectory {
    pub tag_id: String,
    pub points: Vec<TrajectoryPoint>,
    states: Vec<UkfState>,
    q_velocity_var: f64,
    q_height_var: f64,
}

impl TagTrajectory {
    pub fn states(&self) -> &[UkfState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.states[0].timestamp
    }

    pub fn end_time(&self) -> f64 {
        self.states[self.states.len() - 1].timestamp
    }

    /// Belief at time `t`: the posterior of the last sample at or before `t`,
    /// predicted forward without a measurement. Times before the first sample
    /// return the first posterior.
    pub fn query_at(&self, t: f64) -> UkfState {
        let idx = self.states.partition_point(|s| s.timestamp <= t + TIME_EPS);
        if idx == 0 {
            return self.states[0].clone();
        }
        let base = &self.states[idx - 1];
        let dt = t - base.timestamp;
        if dt <= TIME_EPS {
            return base.clone();
        }
        let q = process_noise(dt, self.q_velocity_var, self.q_height_var).expect("dt checked positive");
        let mut s = predict_with_q(base, dt, &q);
        s.timestamp = t;
        s
    }

    /// Distance in time from `t` to the closest sample.
    pub fn nearest_sample_gap(&self, t: f64) -> f64 {
        let idx = self.states.partition_point(|s| s.timestamp < t);
        let mut best = f64::INFINITY;
        if idx < self.states.len() {
            best = best.min((self.states[idx].timestamp - t).abs());
        }
        if idx > 0 {
            best = best.min((t - self.states[idx - 1].timestamp).abs());
        }
        best
    }
}

fn check_monotonic(samples: &[UwbSample]) -> Result<(), TrackingError> {
    for w in samples.windows(2) {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(TrackingError::NonMonotonicTimestamps {
                prev: w[0].timestamp,
                next: w[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Runs the filter over one tag's samples.
pub fn track_tag<D: NlosClassifier + ?Sized>(
    samples: &[UwbSample],
    pose: &AnchorPose,
    noise: &NoiseModel,
    detector: &D,
    init: &InitPolicy,
    u_th: f64,
) -> Result<TagTrajectory, TrackingError> {
    let links = samples
        .iter()
        .map(|s| detector.classify(&s.features))
        .collect::<Result<Vec<_>, _>>()?;
    track_tag_with_links(samples, &links, pose, noise, init, u_th)
}

/// `track_tag` with per-sample link conditions decided up front.
pub fn track_tag_with_links(
    samples: &[UwbSample],
    links: &[LinkCondition],
    pose: &AnchorPose,
    noise: &NoiseModel,
    init: &InitPolicy,
    u_th: f64,
) -> Result<TagTrajectory, TrackingError> {
    let first = samples.first().ok_or(TrackingError::EmptyInput)?;
    assert_eq!(samples.len(), links.len(), "one link condition per sample");
    if samples.iter().any(|s| s.tag_id != first.tag_id) {
        return Err(TrackingError::MixedTags);
    }
    check_monotonic(samples)?;

    let mut states = Vec::with_capacity(samples.len());
    let mut state = init.initialize(first, pose, &noise.observation_cov(links[0]));
    states.push(state.clone());
    for (sample, link) in samples.iter().zip(links).skip(1) {
        state = step_with_link(&state, sample, pose, noise, *link)?;
        states.push(state.clone());
    }
    let nlos: Vec<bool> = links.iter().map(|l| l.is_nlos()).collect();
    TagTrajectory::from_states(&first.tag_id, states, &nlos, noise, u_th)
}

impl TagTrajectory {
    /// Wraps already-filtered posteriors. `noise` supplies the process noise
    /// used when querying between samples.
    pub fn from_states(
        tag_id: &str,
        states: Vec<UkfState>,
        nlos: &[bool],
        noise: &NoiseModel,
        u_th: f64,
    ) -> Result<Self, TrackingError> {
        if states.is_empty() {
            return Err(TrackingError::EmptyInput);
        }
        assert_eq!(states.len(), nlos.len(), "one link flag per state");
        for w in states.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(TrackingError::NonMonotonicTimestamps {
                    prev: w[0].timestamp,
                    next: w[1].timestamp,
                });
            }
        }
        let points = states
            .iter()
            .zip(nlos)
            .map(|(s, n)| TrajectoryPoint {
                timestamp: s.timestamp,
                position: s.position(),
                position_cov: s.position_cov(),
                uncertain: uncertainty_flag(s, u_th),
                nlos: *n,
            })
            .collect();
        Ok(Self {
            tag_id: tag_id.to_string(),
            points,
            states,
            q_velocity_var: noise.q_velocity_var,
            q_height_var: noise.q_height_var,
        })
    }
}
