//! Binary NLoS detector over per-measurement signal-quality features.
//!
//! The classifier is a small gradient-boosted ensemble of depth-limited
//! regression trees trained on the logistic loss with second-order
//! (Newton) leaf values. Labels come from calibration: pairs rejected as
//! outliers by the robust extrinsic fit are treated as NLoS.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Delay, peak amplitude, energy, SNR, RSSI, first-path amplitude.
pub const DEFAULT_FEATURE_DIM: usize = 6;
/// Index of the SNR entry in the default feature layout.
pub const SNR_INDEX: usize = 3;
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MIN_TRAINING_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum NlosError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("need at least {MIN_TRAINING_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("features and labels differ in length ({features} vs {labels})")]
    LengthMismatch { features: usize, labels: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Signal-quality summary attached to one UWB measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignalFeatures(Vec<f64>);

impl SignalFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkCondition {
    #[serde(rename = "LoS")]
    Los,
    #[serde(rename = "NLoS")]
    Nlos,
}

impl LinkCondition {
    pub fn is_nlos(self) -> bool {
        self == LinkCondition::Nlos
    }
}

/// Anything that can decide LoS/NLoS from signal features.
pub trait NlosClassifier {
    fn classify(&self, features: &SignalFeatures) -> Result<LinkCondition, NlosError>;
}

/// Detector that never reports NLoS.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysLos;

impl NlosClassifier for AlwaysLos {
    fn classify(&self, _: &SignalFeatures) -> Result<LinkCondition, NlosError> {
        Ok(LinkCondition::Los)
    }
}

/// Detector that always reports NLoS.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysNlos;

impl NlosClassifier for AlwaysNlos {
    fn classify(&self, _: &SignalFeatures) -> Result<LinkCondition, NlosError> {
        Ok(LinkCondition::Nlos)
    }
}

/// Regression tree in flat array form. Node `k` is a leaf when
/// `feature[k] < 0`; otherwise samples with `x[feature] <= threshold` go to
/// `left[k]`, the rest to `right[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RegressionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            let f = self.feature[k];
            if f < 0 {
                return self.value[k];
            }
            k = if x[f as usize] <= self.threshold[k] {
                self.left[k] as usize
            } else {
                self.right[k] as usize
            };
        }
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }

    fn validate(&self, n_features: usize) -> Result<(), NlosError> {
        let n = self.feature.len();
        if n == 0
            || self.threshold.len() != n
            || self.left.len() != n
            || self.right.len() != n
            || self.value.len() != n
        {
            return Err(NlosError::MalformedTree("array lengths differ or tree is empty".into()));
        }
        for k in 0..n {
            let f = self.feature[k];
            if f >= 0 {
                if f as usize >= n_features {
                    return Err(NlosError::MalformedTree(format!("feature index {f} out of range")));
                }
                // children strictly after the parent rules out cycles
                let (l, r) = (self.left[k] as usize, self.right[k] as usize);
                if l <= k || r <= k || l >= n || r >= n {
                    return Err(NlosError::MalformedTree(format!("bad children at node {k}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTree {
    pub weight: f64,
    pub tree: RegressionTree,
}

/// Boosted ensemble: `p(NLoS) = sigmoid(base_score + sum weight_k * tree_k(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlosDetectorModel {
    pub version: u32,
    pub n_features: usize,
    pub threshold: f64,
    pub base_score: f64,
    pub trees: Vec<WeightedTree>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NlosDetectorModel {
    /// Empty ensemble: probability exactly 0.5 everywhere.
    pub fn null(n_features: usize) -> Self {
        Self {
            version: MODEL_FORMAT_VERSION,
            n_features,
            threshold: 0.5,
            base_score: 0.0,
            trees: Vec::new(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), NlosError> {
        if x.len() != self.n_features {
            return Err(NlosError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn raw_score(&self, x: &[f64]) -> f64 {
        self.trees
            .iter()
            .fold(self.base_score, |acc, t| acc + t.weight * t.tree.predict(x))
    }

    pub fn predict_proba(&self, features: &SignalFeatures) -> Result<f64, NlosError> {
        self.check_dim(features.as_slice())?;
        Ok(sigmoid(self.raw_score(features.as_slice())))
    }

    pub fn classify_batch(&self, batch: &[SignalFeatures]) -> Result<Vec<LinkCondition>, NlosError> {
        batch.iter().map(|f| self.classify(f)).collect()
    }

    pub fn to_json(&self) -> Result<String, NlosError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NlosError> {
        let model: Self = serde_json::from_str(text)?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(NlosError::UnsupportedVersion(model.version));
        }
        for t in &model.trees {
            t.tree.validate(model.n_features)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NlosError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NlosError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl NlosClassifier for NlosDetectorModel {
    fn classify(&self, features: &SignalFeatures) -> Result<LinkCondition, NlosError> {
        let p = self.predict_proba(features)?;
        // ties go to LoS
        Ok(if p > self.threshold {
            LinkCondition::Nlos
        } else {
            LinkCondition::Los
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub l2: f64,
    pub min_child_weight: f64,
    /// Row fraction drawn (without replacement) per round.
    pub subsample: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            l2: 1.0,
            min_child_weight: 1e-3,
            subsample: 1.0,
            threshold: 0.5,
        }
    }
}

pub fn log_loss(probs: &[f64], targets: &[f64]) -> f64 {
    let eps = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len().max(1) as f64
}

/// Area under the ROC curve (Mann-Whitney, ties counted half).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

struct TreeBuilder<'a> {
    x: &'a [&'a [f64]],
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a TrainConfig,
    n_features: usize,
    tree: RegressionTree,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.cfg.l2)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.cfg.l2)
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let node = self.tree.push_leaf(self.leaf_value(g, h));
        if depth >= self.cfg.max_depth || rows.len() < 2 {
            return node;
        }

        let parent = self.score(g, h);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in 0..self.n_features {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 1..sorted.len() {
                let prev = sorted[k - 1];
                gl += self.grad[prev];
                hl += self.hess[prev];
                let (lo, hi) = (self.x[prev][f], self.x[sorted[k]][f]);
                if !(lo < hi) {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.cfg.min_child_weight || hr < self.cfg.min_child_weight {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                    let mut thr = 0.5 * (lo + hi);
                    if !(thr >= lo && thr < hi) {
                        thr = lo;
                    }
                    best = Some((gain, f, thr));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return node;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.x[r][feature] <= threshold);
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.tree.feature[node] = feature as i32;
        self.tree.threshold[node] = threshold;
        self.tree.left[node] = left as u32;
        self.tree.right[node] = right as u32;
        node
    }
}

/// Fits the boosted detector. Deterministic for a given seed.
pub fn train_detector(
    features: &[SignalFeatures],
    labels: &[LinkCondition],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NlosDetectorModel, NlosError> {
    if features.len() != labels.len() {
        return Err(NlosError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < MIN_TRAINING_SAMPLES {
        return Err(NlosError::TooFewSamples(features.len()));
    }
    let n_features = features[0].len();
    for f in features {
        if f.len() != n_features {
            return Err(NlosError::DimensionMismatch {
                expected: n_features,
                got: f.len(),
            });
        }
        if f.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(NlosError::NonFinite);
        }
    }
    let y: Vec<f64> = labels.iter().map(|l| if l.is_nlos() { 1.0 } else { 0.0 }).collect();
    let n_pos = y.iter().sum::<f64>();
    if n_pos == 0.0 || n_pos == y.len() as f64 {
        return Err(NlosError::DegenerateLabels);
    }

    let n = y.len();
    let rate = n_pos / n as f64;
    let mut model = NlosDetectorModel {
        version: MODEL_FORMAT_VERSION,
        n_features,
        threshold: cfg.threshold,
        base_score: (rate / (1.0 - rate)).ln(),
        trees: Vec::new(),
    };
    let x: Vec<&[f64]> = features.iter().map(SignalFeatures::as_slice).collect();
    let mut raw = vec![model.base_score; n];
    let probs = |raw: &[f64]| raw.iter().map(|r| sigmoid(*r)).collect::<Vec<_>>();
    let mut loss = log_loss(&probs(&raw), &y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for _ in 0..cfg.rounds {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = p - y[i];
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let rows: Vec<usize> = if cfg.subsample < 1.0 {
            let m = ((n as f64 * cfg.subsample).round() as usize).clamp(1, n);
            let mut r = index::sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let mut builder = TreeBuilder {
            x: &x,
            grad: &grad,
            hess: &hess,
            cfg,
            n_features,
            tree: RegressionTree::default(),
        };
        builder.build(&rows, 0);
        let tree = builder.tree;

        let candidate: Vec<f64> = raw
            .iter()
            .zip(&x)
            .map(|(r, xi)| r + cfg.learning_rate * tree.predict(xi))
            .collect();
        let next_loss = log_loss(&probs(&candidate), &y);
        if next_loss > loss {
            break;
        }
        loss = next_loss;
        raw = candidate;
        model.trees.push(WeightedTree {
            weight: cfg.learning_rate,
            tree,
        });
    }
    Ok(model)
}
