//! Association of tag trajectories with camera tracklets.
//!
//! The cost between a tag and a tracklet is the mean Mahalanobis distance
//! between the tracklet's ground points and the tag belief queried at the
//! same camera timestamps. Assignment maximizes the summed inverse cost
//! under three constraints: a tracklet belongs to at most one tag, a tag
//! never owns two tracklets that are visible at the same time, and pairs
//! above the cost threshold are forbidden. It is solved exactly by
//! depth-first branch and bound.

use crate::geometry::Vec3;
use crate::tracking::{max_eigenvalue, TagTrajectory};
use nalgebra::{Cholesky, Matrix3};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Costs are clamped below at this value before inversion.
pub const MIN_COST: f64 = 1e-6;
/// Frame timestamps closer than this are the same frame.
pub const FRAME_EPS: f64 = 1e-6;
const JITTER: f64 = 1e-9;
const OBJECTIVE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MatchingError {
    #[error("position covariance is singular")]
    SingularCovariance,
    #[error("tracklet {0} is empty")]
    EmptyTracklet(u64),
    #[error("tracklet {id} timestamps not strictly increasing at {t}")]
    NonMonotonicTracklet { id: u64, t: f64 },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackletPoint {
    pub timestamp: f64,
    pub position: Vec3,
}

/// Ground-plane track of one camera identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub tracklet_id: u64,
    points: Vec<TrackletPoint>,
}

impl Tracklet {
    pub fn new(tracklet_id: u64, points: Vec<TrackletPoint>) -> Result<Self, MatchingError> {
        if points.is_empty() {
            return Err(MatchingError::EmptyTracklet(tracklet_id));
        }
        for w in points.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(MatchingError::NonMonotonicTracklet {
                    id: tracklet_id,
                    t: w[1].timestamp,
                });
            }
        }
        Ok(Self { tracklet_id, points })
    }

    pub fn points(&self) -> &[TrackletPoint] {
        &self.points
    }

    pub fn start_time(&self) -> f64 {
        self.points[0].timestamp
    }

    pub fn end_time(&self) -> f64 {
        self.points[self.points.len() - 1].timestamp
    }

    /// Points with `t0 <= t < t1`, or `None` if there are none.
    pub fn slice(&self, t0: f64, t1: f64) -> Option<Tracklet> {
        let lo = self.points.partition_point(|p| p.timestamp < t0 - FRAME_EPS);
        let hi = self.points.partition_point(|p| p.timestamp < t1 - FRAME_EPS);
        (lo < hi).then(|| Tracklet {
            tracklet_id: self.tracklet_id,
            points: self.points[lo..hi].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    /// Tag beliefs with a larger position-covariance eigenvalue are skipped.
    pub u_th: f64,
    /// Frames farther than this from every tag sample contribute nothing.
    pub align_tolerance: f64,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            u_th: 1.5,
            align_tolerance: 0.25,
        }
    }
}

/// `sqrt(d^T cov^-1 d)`, with the same jitter schedule as the filter.
pub fn mahalanobis(d: &Vec3, cov: &Matrix3<f64>) -> Result<f64, MatchingError> {
    let mut work = (cov + cov.transpose()) * 0.5;
    for attempt in 0..=3 {
        if let Some(ch) = Cholesky::new(work) {
            let y = ch.l().solve_lower_triangular(d).ok_or(MatchingError::SingularCovariance)?;
            return Ok(y.norm());
        }
        if attempt < 3 {
            work += Matrix3::identity() * JITTER;
        }
    }
    Err(MatchingError::SingularCovariance)
}

/// Mean Mahalanobis distance over the usable tracklet frames and the number
/// of such frames. The cost is infinite when no frame is usable.
pub fn pairwise_cost(tag: &TagTrajectory, tracklet: &Tracklet, opts: &CostOptions) -> Result<(f64, usize), MatchingError> {
    let mut sum = 0.0;
    let mut support = 0usize;
    for p in tracklet.points() {
        if tag.nearest_sample_gap(p.timestamp) > opts.align_tolerance {
            continue;
        }
        let belief = tag.query_at(p.timestamp);
        let cov = belief.position_cov();
        if max_eigenvalue(&cov) > opts.u_th {
            continue;
        }
        sum += mahalanobis(&(belief.position() - p.position), &cov)?;
        support += 1;
    }
    if support == 0 {
        return Ok((f64::INFINITY, 0));
    }
    Ok((sum / support as f64, support))
}

/// True iff the tracklets share at least one frame timestamp.
pub fn temporal_overlap(a: &Tracklet, b: &Tracklet) -> bool {
    if a.end_time() < b.start_time() - FRAME_EPS || b.end_time() < a.start_time() - FRAME_EPS {
        return false;
    }
    let (pa, pb) = (a.points(), b.points());
    let (mut i, mut j) = (0, 0);
    while i < pa.len() && j < pb.len() {
        let d = pa[i].timestamp - pb[j].timestamp;
        if d.abs() < FRAME_EPS {
            return true;
        }
        if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// `costs[i][j]` for tag `i` and tracklet `j`.
    pub costs: Vec<Vec<f64>>,
    pub support: Vec<Vec<usize>>,
}

impl CostMatrix {
    pub fn from_costs(costs: Vec<Vec<f64>>) -> Self {
        let support = costs
            .iter()
            .map(|row| row.iter().map(|c| usize::from(c.is_finite())).collect())
            .collect();
        Self { costs, support }
    }

    pub fn n_tags(&self) -> usize {
        self.costs.len()
    }

    pub fn n_tracklets(&self) -> usize {
        self.costs.first().map_or(0, Vec::len)
    }
}

pub fn build_cost_matrix(tags: &[TagTrajectory], tracklets: &[Tracklet], opts: &CostOptions) -> Result<CostMatrix, MatchingError> {
    let mut costs = Vec::with_capacity(tags.len());
    let mut support = Vec::with_capacity(tags.len());
    for tag in tags {
        let mut row = Vec::with_capacity(tracklets.len());
        let mut srow = Vec::with_capacity(tracklets.len());
        for tr in tracklets {
            let (c, s) = pairwise_cost(tag, tr, opts)?;
            row.push(c);
            srow.push(s);
        }
        costs.push(row);
        support.push(srow);
    }
    Ok(CostMatrix { costs, support })
}

/// Symmetric tracklet-by-tracklet overlap flags.
pub fn overlap_matrix(tracklets: &[Tracklet]) -> Vec<Vec<bool>> {
    let n = tracklets.len();
    let mut m = vec![vec![false; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let o = temporal_overlap(&tracklets[a], &tracklets[b]);
            m[a][b] = o;
            m[b][a] = o;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub x: Vec<Vec<bool>>,
    pub objective: f64,
    /// Selected `(tag, tracklet)` pairs in ascending order.
    pub pairs: Vec<(usize, usize)>,
}

impl AssignmentResult {
    /// Tag index assigned to tracklet `j`, if any.
    pub fn tag_of(&self, j: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == j).map(|p| p.0)
    }
}

fn clamped(c: f64) -> f64 {
    c.max(MIN_COST)
}

/// Whether `(i, j)` may be selected at all under `c_th`.
pub fn admissible(c: f64, c_th: f64) -> bool {
    c.is_finite() && clamped(c) <= c_th
}

/// Summed inverse cost of the selected pairs, accumulated in pair order.
pub fn objective(costs: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(i, j)| 1.0 / clamped(costs.costs[i][j])).sum()
}

/// Checks column uniqueness, per-row non-overlap and the cost threshold.
pub fn is_feasible(x: &[Vec<bool>], costs: &CostMatrix, overlaps: &[Vec<bool>], c_th: f64) -> bool {
    let m = costs.n_tracklets();
    for j in 0..m {
        if x.iter().filter(|row| row[j]).count() > 1 {
            return false;
        }
    }
    for (i, row) in x.iter().enumerate() {
        let chosen: Vec<usize> = (0..m).filter(|&j| row[j]).collect();
        if chosen.iter().any(|&j| !admissible(costs.costs[i][j], c_th)) {
            return false;
        }
        for (a, &ja) in chosen.iter().enumerate() {
            if chosen[a + 1..].iter().any(|&jb| overlaps[ja][jb]) {
                return false;
            }
        }
    }
    true
}

struct Search<'a> {
    cands: Vec<(usize, usize, f64)>,
    /// Candidate indices per tracklet, ascending.
    by_col: Vec<Vec<usize>>,
    overlaps: &'a [Vec<bool>],
    costs: &'a CostMatrix,
    col_used: Vec<bool>,
    row_sel: Vec<Vec<usize>>,
    chosen: Vec<(usize, usize)>,
    best: Option<(f64, Vec<(usize, usize)>)>,
}

impl Search<'_> {
    fn bound(&self, k: usize) -> f64 {
        let mut total = 0.0;
        for (j, list) in self.by_col.iter().enumerate() {
            if self.col_used[j] {
                continue;
            }
            let pos = list.partition_point(|&c| c < k);
            if let Some(&c) = list.get(pos) {
                total += self.cands[c].2;
            }
        }
        total
    }

    fn tol(v: f64) -> f64 {
        OBJECTIVE_RTOL * v.abs().max(1.0)
    }

    fn offer(&mut self) {
        let value = objective(self.costs, &self.chosen);
        let mut pairs = self.chosen.clone();
        pairs.sort_unstable();
        let replace = match &self.best {
            None => true,
            Some((b, bp)) => {
                if value > b + Self::tol(*b) {
                    true
                } else if value >= b - Self::tol(*b) {
                    pairs.cmp(bp) == Ordering::Less
                } else {
                    false
                }
            }
        };
        if replace {
            self.best = Some((value, pairs));
        }
    }

    fn fits(&self, i: usize, j: usize) -> bool {
        !self.col_used[j] && self.row_sel[i].iter().all(|&o| !self.overlaps[o][j])
    }

    fn dfs(&mut self, k: usize, current: f64) {
        if let Some((b, _)) = &self.best {
            if current + self.bound(k) < b - Self::tol(*b) {
                return;
            }
        }
        if k == self.cands.len() {
            self.offer();
            return;
        }
        let (i, j, v) = self.cands[k];
        if self.fits(i, j) {
            self.col_used[j] = true;
            self.row_sel[i].push(j);
            self.chosen.push((i, j));
            self.dfs(k + 1, current + v);
            self.chosen.pop();
            self.row_sel[i].pop();
            self.col_used[j] = false;
        }
        self.dfs(k + 1, current);
    }
}

/// Exact maximization of the summed inverse cost. Among equal objectives
/// the lexicographically smallest sorted pair list wins.
pub fn solve_assignment(costs: &CostMatrix, overlaps: &[Vec<bool>], c_th: f64) -> Result<AssignmentResult, MatchingError> {
    let n = costs.n_tags();
    let m = costs.n_tracklets();
    if costs.costs.iter().any(|r| r.len() != m) {
        return Err(MatchingError::Shape("ragged cost matrix".into()));
    }
    if overlaps.len() != m || overlaps.iter().any(|r| r.len() != m) {
        return Err(MatchingError::Shape(format!("overlap matrix must be {m}x{m}")));
    }

    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let c = costs.costs[i][j];
            if admissible(c, c_th) {
                cands.push((i, j, 1.0 / clamped(c)));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut by_col = vec![Vec::new(); m];
    for (k, c) in cands.iter().enumerate() {
        by_col[c.1].push(k);
    }

    let mut search = Search {
        cands,
        by_col,
        overlaps,
        costs,
        col_used: vec![false; m],
        row_sel: vec![Vec::new(); n],
        chosen: Vec::new(),
        best: None,
    };
    search.dfs(0, 0.0);
    let (objective, pairs) = search.best.unwrap_or((0.0, Vec::new()));
    let mut x = vec![vec![false; m]; n];
    for &(i, j) in &pairs {
        x[i][j] = true;
    }
    Ok(AssignmentResult { x, objective, pairs })
}
