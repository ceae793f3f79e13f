//! Derivative-free optimizers and robust fitting: Nelder-Mead, CMA-ES and
//! RANSAC. All of them are deterministic for a fixed seed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("every RANSAC hypothesis failed to fit")]
    NoValidHypothesis,
}

/// Best point found by a minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Per-coordinate offsets of the initial simplex; a single value is
    /// broadcast.
    pub initial_step: Vec<f64>,
    pub max_evals: usize,
    /// Stop once every vertex lies within this distance of the best one.
    pub x_tol: f64,
    /// Stop once the spread of vertex values drops below this (0 disables).
    pub f_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: vec![0.1],
            max_evals: 20_000,
            x_tol: 1e-10,
            f_tol: 0.0,
        }
    }
}

/// Downhill simplex with the usual reflection/expansion/contraction/shrink
/// coefficients (1, 2, 1/2, 1/2).
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<Minimum, OptimizeError>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(OptimizeError::InvalidConfig("empty parameter vector".into()));
    }
    let steps: Vec<f64> = match opts.initial_step.len() {
        1 => vec![opts.initial_step[0]; n],
        m if m == n => opts.initial_step.clone(),
        m => return Err(OptimizeError::DimensionMismatch { expected: n, got: m }),
    };
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(OptimizeError::NonFiniteObjective);
    }
    let mut evals = 1;
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if steps[i] != 0.0 { steps[i] } else { 1e-4 };
        let v = finite_or_inf(f(&x));
        evals += 1;
        simplex.push((x, v));
    }

    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0];
        let diameter = simplex[1..].iter().map(|(x, _)| dist(x, &best.0)).fold(0.0, f64::max);
        let spread = simplex[n].1 - best.1;
        if diameter < opts.x_tol || (opts.f_tol > 0.0 && spread < opts.f_tol) || evals >= opts.max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let toward = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect()
        };
        let worst = simplex[n].0.clone();
        let f_worst = simplex[n].1;
        let f_second = simplex[n - 1].1;
        let f_best = simplex[0].1;

        let xr = toward(-1.0, &worst);
        let fr = finite_or_inf(f(&xr));
        evals += 1;
        if fr < f_best {
            let xe = toward(-2.0, &worst);
            let fe = finite_or_inf(f(&xe));
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < f_worst {
            let xc = toward(-0.5, &worst);
            (xc.clone(), finite_or_inf(f(&xc)))
        } else {
            let xc = toward(0.5, &worst);
            (xc.clone(), finite_or_inf(f(&xc)))
        };
        evals += 1;
        if fc < fr.min(f_worst) {
            simplex[n] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = anchor.iter().zip(&v.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
            v.1 = finite_or_inf(f(&x));
            v.0 = x;
            evals += 1;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Ok(Minimum { x, f: fx, evals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaesConfig {
    pub sigma0: f64,
    /// Offspring per generation; `None` means `4 + floor(3 ln n)`.
    pub population: Option<usize>,
    pub max_evals: usize,
    /// Stop when recent best values and the current generation all lie
    /// within this range.
    pub tol_fun: f64,
    /// Stop as soon as a value at or below this is found.
    pub f_target: Option<f64>,
    pub seed: u64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            population: None,
            max_evals: 10_000,
            tol_fun: 1e-14,
            f_target: None,
            seed: 0,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub generations: usize,
    /// Best-so-far value after each generation.
    pub history: Vec<f64>,
}

/// Reflects `v` into `[lo, hi]` as if the bounds were mirrors.
pub fn mirror_into(v: f64, lo: f64, hi: f64) -> f64 {
    if v >= lo && v <= hi {
        return v;
    }
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let period = 2.0 * width;
    let r = (v - lo).rem_euclid(period);
    if r <= width {
        lo + r
    } else {
        lo + period - r
    }
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    fn from_config(cfg: &CmaesConfig, n: usize) -> Result<Option<Self>, OptimizeError> {
        if cfg.lower.is_none() && cfg.upper.is_none() {
            return Ok(None);
        }
        let lower = cfg.lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]);
        let upper = cfg.upper.clone().unwrap_or_else(|| vec![f64::INFINITY; n]);
        for b in [&lower, &upper] {
            if b.len() != n {
                return Err(OptimizeError::DimensionMismatch { expected: n, got: b.len() });
            }
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(OptimizeError::InvalidConfig("lower bound above upper bound".into()));
        }
        Ok(Some(Self { lower, upper }))
    }

    fn apply(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            x[i] = if lo.is_finite() && hi.is_finite() {
                mirror_into(x[i], lo, hi)
            } else if lo.is_finite() && x[i] < lo {
                2.0 * lo - x[i]
            } else if hi.is_finite() && x[i] > hi {
                2.0 * hi - x[i]
            } else {
                x[i]
            };
        }
    }
}

/// (mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation and
/// rank-one plus rank-mu covariance updates. Returns the best point ever
/// evaluated, which is never worse than `x0`.
pub fn cma_es<F>(mut f: F, x0: &[f64], cfg: &CmaesConfig) -> Result<CmaesResult, OptimizeError>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(OptimizeError::InvalidConfig("empty parameter vector".into()));
    }
    if !(cfg.sigma0 > 0.0) {
        return Err(OptimizeError::InvalidConfig("sigma0 must be positive".into()));
    }
    let nf = n as f64;
    let lambda = cfg.population.unwrap_or(4 + (3.0 * nf.ln()).floor() as usize);
    if lambda < 2 {
        return Err(OptimizeError::InvalidConfig("population must be at least 2".into()));
    }
    let bounds = Bounds::from_config(cfg, n)?;

    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(OptimizeError::NonFiniteObjective);
    }
    let mut evals = 1usize;
    let mut best_x = x0.to_vec();
    let mut best_f = f0;

    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu).map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = cfg.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);
    let mut history = Vec::new();
    let window = 10 + (30.0 * nf / lambda as f64).ceil() as usize;
    let mut generation = 0usize;

    while evals + lambda <= cfg.max_evals {
        let eig = SymmetricEigen::new(cov.clone());
        let basis = eig.eigenvectors;
        let scales = eig.eigenvalues.map(|v| v.max(1e-300).sqrt());

        let mut offspring: Vec<(DVector<f64>, DVector<f64>, f64, usize)> = Vec::with_capacity(lambda);
        for k in 0..lambda {
            let z = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &basis * scales.component_mul(&z);
            let mut x = &mean + &y * sigma;
            let y = match &bounds {
                Some(b) => {
                    b.apply(&mut x);
                    (&x - &mean) / sigma
                }
                None => y,
            };
            let fx = finite_or_inf(f(x.as_slice()));
            evals += 1;
            if fx < best_f {
                best_f = fx;
                best_x = x.as_slice().to_vec();
            }
            offspring.push((x, y, fx, k));
        }
        offspring.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.3.cmp(&b.3)));
        generation += 1;
        history.push(best_f);

        let mut y_w = DVector::<f64>::zeros(n);
        for (w, o) in weights.iter().zip(&offspring) {
            y_w += &o.1 * *w;
        }
        mean += &y_w * sigma;

        let inv_sqrt = &basis * DMatrix::from_diagonal(&scales.map(|s| 1.0 / s)) * basis.transpose();
        p_sigma = &p_sigma * (1.0 - c_sigma) + inv_sqrt * &y_w * (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt();
        let norm_ps = p_sigma.norm();
        let h_sigma = norm_ps / (1.0 - (1.0 - c_sigma).powi(2 * generation as i32)).sqrt()
            < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        p_c = &p_c * (1.0 - c_c) + &y_w * (h * (c_c * (2.0 - c_c) * mu_eff).sqrt());

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, o) in weights.iter().zip(&offspring) {
            rank_mu += &o.1 * o.1.transpose() * *w;
        }
        let decay = 1.0 - c_1 - c_mu + (1.0 - h) * c_1 * c_c * (2.0 - c_c);
        cov = &cov * decay + &p_c * p_c.transpose() * c_1 + rank_mu * c_mu;
        cov = (&cov + cov.transpose()) * 0.5;
        sigma *= ((c_sigma / d_sigma) * (norm_ps / chi_n - 1.0)).exp();

        if let Some(target) = cfg.f_target {
            if best_f <= target {
                break;
            }
        }
        if !sigma.is_finite() || sigma * scales.max() < 1e-300 {
            break;
        }
        if history.len() >= window {
            let recent = &history[history.len() - window..];
            let mut lo = recent.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut hi = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for o in &offspring {
                lo = lo.min(o.2);
                hi = hi.max(o.2);
            }
            if hi - lo < cfg.tol_fun {
                break;
            }
        }
    }

    Ok(CmaesResult {
        x: best_x,
        f: best_f,
        evals,
        generations: generation,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub sample_size: usize,
    pub iterations: usize,
    /// Residuals strictly below this count as inliers.
    pub threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    pub mean_inlier_residual: f64,
}

fn score<T, M>(model: &M, data: &[T], residual: &impl Fn(&M, &T) -> f64, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(data.len());
    let mut count = 0;
    let mut sum = 0.0;
    for d in data {
        let r = residual(model, d);
        let inlier = r.is_finite() && r < threshold;
        if inlier {
            count += 1;
            sum += r;
        }
        mask.push(inlier);
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (mask, count, mean)
}

fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Random sample consensus: fit hypotheses on random subsets, keep the one
/// with the most inliers (ties go to the lower mean inlier residual), then
/// refit on its inliers. The refit is discarded if it loses inliers.
pub fn ransac<T, M, F, R>(data: &[T], mut fit: F, residual: R, cfg: &RansacConfig) -> Result<RansacResult<M>, OptimizeError>
where
    F: FnMut(&[&T]) -> Option<M>,
    R: Fn(&M, &T) -> f64,
{
    if cfg.sample_size == 0 || cfg.iterations == 0 || !(cfg.threshold > 0.0) {
        return Err(OptimizeError::InvalidConfig(
            "sample size and iterations must be positive, threshold > 0".into(),
        ));
    }
    if data.len() < cfg.sample_size {
        return Err(OptimizeError::InsufficientData {
            needed: cfg.sample_size,
            got: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(M, Vec<bool>, usize, f64)> = None;
    for _ in 0..cfg.iterations {
        let mut picks = index::sample(&mut rng, data.len(), cfg.sample_size).into_vec();
        picks.sort_unstable();
        let subset: Vec<&T> = picks.iter().map(|&i| &data[i]).collect();
        let Some(model) = fit(&subset) else { continue };
        let (mask, count, mean) = score(&model, data, &residual, cfg.threshold);
        if best.as_ref().is_none_or(|b| better((count, mean), (b.2, b.3))) {
            best = Some((model, mask, count, mean));
        }
    }
    let (model, mask, count, mean) = best.ok_or(OptimizeError::NoValidHypothesis)?;
    if count >= cfg.sample_size {
        let subset: Vec<&T> = data.iter().zip(&mask).filter(|(_, m)| **m).map(|(d, _)| d).collect();
        if let Some(refit) = fit(&subset) {
            let (rmask, rcount, rmean) = score(&refit, data, &residual, cfg.threshold);
            if rcount >= count {
                return Ok(RansacResult {
                    model: refit,
                    inliers: rmask,
                    n_inliers: rcount,
                    mean_inlier_residual: rmean,
                });
            }
        }
    }
    Ok(RansacResult {
        model,
        inliers: mask,
        n_inliers: count,
        mean_inlier_residual: mean,
    })
}
