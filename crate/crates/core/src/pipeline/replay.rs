//! Replays a UWB stream and a tracklet stream into per-frame keep/mask
//! decisions.

use super::config::{PipelineConfig, WindowMode};
use super::PipelineError;
use crate::calibration::CalibParams;
use crate::geometry::{head_box_to_tag_plane, HeadDetection};
use crate::matching::{mahalanobis, solve_assignment, temporal_overlap, CostMatrix, CostOptions, MatchingError, Tracklet, TrackletPoint, FRAME_EPS};
use crate::nlos::NlosClassifier;
use crate::simulator::CameraSetup;
use crate::tracking::{max_eigenvalue, track_tag, TagTrajectory, TrackingError, UwbSample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// Largest backwards step tolerated inside a stream, in seconds.
pub const MAX_CLOCK_SKEW: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDecision {
    /// Tag the box is attributed to, if any.
    pub tag_id: Option<String>,
    pub tracklet_id: u64,
    pub u_px: f64,
    pub v_px: f64,
    pub w_px: f64,
    pub h_px: f64,
    pub keep: bool,
}

/// What to show and what to mask in one camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub t: f64,
    /// One entry per tracklet seen in the frame, by ascending tracklet id.
    pub boxes: Vec<BoxDecision>,
    /// Tracklets to mask.
    pub masked: Vec<u64>,
}

impl FrameDecision {
    pub fn kept(&self) -> impl Iterator<Item = &BoxDecision> {
        self.boxes.iter().filter(|b| b.keep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub decisions: Vec<FrameDecision>,
    /// Processing time attributed to each frame.
    pub latency_ms: Vec<f64>,
    pub tag_ids: Vec<String>,
}

/// Stable-sorts a stream by time. Steps back in time of up to
/// `MAX_CLOCK_SKEW` are reordered; larger ones are rejected.
pub fn sort_stream<T: Clone>(items: &[T], time: impl Fn(&T) -> f64, stream: &str) -> Result<Vec<T>, PipelineError> {
    let mut latest = f64::NEG_INFINITY;
    for it in items {
        let t = time(it);
        if t < latest - MAX_CLOCK_SKEW {
            return Err(PipelineError::ClockSkew {
                stream: stream.to_string(),
                prev: latest,
                next: t,
            });
        }
        latest = latest.max(t);
    }
    let mut out = items.to_vec();
    out.sort_by(|a, b| time(a).total_cmp(&time(b)));
    Ok(out)
}

/// Ground-plane tracklets at tag height, by ascending id.
pub fn tracklets_from_detections(
    detections: &[HeadDetection],
    camera: &CameraSetup,
    params: &CalibParams,
) -> Result<Vec<Tracklet>, PipelineError> {
    let mut groups: BTreeMap<u64, Vec<TrackletPoint>> = BTreeMap::new();
    for d in detections {
        let position = head_box_to_tag_plane(d, &camera.intrinsics, &camera.extrinsics, params.w_r, params.h_tag)?;
        groups.entry(d.tracklet_id).or_default().push(TrackletPoint {
            timestamp: d.timestamp,
            position,
        });
    }
    groups
        .into_iter()
        .map(|(id, mut pts)| {
            pts.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            Tracklet::new(id, pts).map_err(|e| match e {
                MatchingError::NonMonotonicTracklet { id, t } => PipelineError::Schema {
                    source_name: "tracklets".into(),
                    line: 0,
                    message: format!("tracklet {id} has two boxes at t={t}"),
                },
                e => e.into(),
            })
        })
        .collect()
}

/// Filters every tag in the stream, by ascending tag id.
pub fn track_tags<D: NlosClassifier + ?Sized>(
    samples: &[UwbSample],
    cfg: &PipelineConfig,
    detector: &D,
) -> Result<Vec<TagTrajectory>, PipelineError> {
    let mut groups: BTreeMap<&str, Vec<UwbSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.tag_id).or_default().push(s.clone());
    }
    groups
        .into_values()
        .map(|g| {
            track_tag(&g, &cfg.calibration.anchor, &cfg.noise, detector, &cfg.init, cfg.u_th).map_err(|e| match e {
                TrackingError::NonMonotonicTimestamps { prev, next } => PipelineError::Schema {
                    source_name: "uwb".into(),
                    line: 0,
                    message: format!("tag {} has samples at {prev} and {next}", g[0].tag_id),
                },
                e => e.into(),
            })
        })
        .collect()
}

struct Frame {
    t: f64,
    /// `(tracklet index, point index)` per box, by ascending tracklet id.
    boxes: Vec<(usize, usize)>,
}

/// Everything that does not depend on the cost threshold or the windowing:
/// filtered tags, tracklets, and the per-point tag-to-box distances.
pub struct PreparedReplay {
    tags: Vec<TagTrajectory>,
    tracklets: Vec<Tracklet>,
    detections: Vec<Vec<HeadDetection>>,
    /// `dist[i][j][k]`: distance of tag `i` to point `k` of tracklet `j`, or
    /// `None` where the tag belief is unusable.
    dist: Vec<Vec<Vec<Option<f64>>>>,
    frames: Vec<Frame>,
    prepare_ms: f64,
}

impl PreparedReplay {
    pub fn tags(&self) -> &[TagTrajectory] {
        &self.tags
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

fn point_distances(tag: &TagTrajectory, tracklet: &Tracklet, opts: &CostOptions) -> Result<Vec<Option<f64>>, MatchingError> {
    tracklet
        .points()
        .iter()
        .map(|p| {
            if tag.nearest_sample_gap(p.timestamp) > opts.align_tolerance {
                return Ok(None);
            }
            let belief = tag.query_at(p.timestamp);
            let cov = belief.position_cov();
            if max_eigenvalue(&cov) > opts.u_th {
                return Ok(None);
            }
            mahalanobis(&(belief.position() - p.position), &cov).map(Some)
        })
        .collect()
}

pub fn prepare_replay<D: NlosClassifier + ?Sized>(
    uwb: &[UwbSample],
    detections: &[HeadDetection],
    cfg: &PipelineConfig,
    detector: &D,
) -> Result<PreparedReplay, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    let uwb = sort_stream(uwb, |s| s.timestamp, "uwb")?;
    let detections = sort_stream(detections, |d| d.timestamp, "tracklet")?;
    let tags = track_tags(&uwb, cfg, detector)?;
    let tracklets = tracklets_from_detections(&detections, &cfg.camera, &cfg.calibration)?;

    let index: BTreeMap<u64, usize> = tracklets.iter().enumerate().map(|(j, t)| (t.tracklet_id, j)).collect();
    let mut boxes: Vec<Vec<HeadDetection>> = vec![Vec::new(); tracklets.len()];
    for d in &detections {
        boxes[index[&d.tracklet_id]].push(*d);
    }
    for b in &mut boxes {
        b.sort_by(|a, c| a.timestamp.total_cmp(&c.timestamp));
    }

    let opts = cfg.cost_options();
    let dist = tags
        .iter()
        .map(|tag| tracklets.iter().map(|tr| point_distances(tag, tr, &opts)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;

    let mut frames: Vec<Frame> = Vec::new();
    let mut all: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (j, tr) in tracklets.iter().enumerate() {
        for (k, p) in tr.points().iter().enumerate() {
            all.push((p.timestamp, tr.tracklet_id, j, k));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, _, j, k) in all {
        match frames.last_mut() {
            Some(f) if (t - f.t).abs() < FRAME_EPS => f.boxes.push((j, k)),
            _ => frames.push(Frame { t, boxes: vec![(j, k)] }),
        }
    }

    Ok(PreparedReplay {
        tags,
        tracklets,
        detections: boxes,
        dist,
        frames,
        prepare_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Point range `[lo, hi)` of every tracklet inside a window, for the
/// tracklets that have any point there.
fn window_ranges(prep: &PreparedReplay, inside: impl Fn(f64) -> std::cmp::Ordering) -> Vec<(usize, usize, usize)> {
    use std::cmp::Ordering;
    prep.tracklets
        .iter()
        .enumerate()
        .filter_map(|(j, tr)| {
            let pts = tr.points();
            let lo = pts.partition_point(|p| inside(p.timestamp) == Ordering::Less);
            let hi = pts.partition_point(|p| inside(p.timestamp) != Ordering::Greater);
            (lo < hi).then_some((j, lo, hi))
        })
        .collect()
}

/// Assignment over the given tracklet ranges. Returns the tag index per
/// range.
fn solve_window(prep: &PreparedReplay, ranges: &[(usize, usize, usize)], c_th: f64) -> Result<Vec<Option<usize>>, PipelineError> {
    if prep.tags.is_empty() {
        return Ok(vec![None; ranges.len()]);
    }
    let costs: Vec<Vec<f64>> = prep
        .dist
        .iter()
        .map(|per_tag| {
            ranges
                .iter()
                .map(|&(j, lo, hi)| {
                    let mut sum = 0.0;
                    let mut support = 0usize;
                    for d in per_tag[j][lo..hi].iter().flatten() {
                        sum += d;
                        support += 1;
                    }
                    if support == 0 {
                        f64::INFINITY
                    } else {
                        sum / support as f64
                    }
                })
                .collect()
        })
        .collect();
    let sliced: Vec<Tracklet> = ranges
        .iter()
        .map(|&(j, lo, hi)| Tracklet::new(prep.tracklets[j].tracklet_id, prep.tracklets[j].points()[lo..hi].to_vec()))
        .collect::<Result<_, _>>()?;
    let n = sliced.len();
    let mut overlaps = vec![vec![false; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let o = temporal_overlap(&sliced[a], &sliced[b]);
            overlaps[a][b] = o;
            overlaps[b][a] = o;
        }
    }
    let result = solve_assignment(&CostMatrix::from_costs(costs), &overlaps, c_th)?;
    Ok((0..n).map(|j| result.tag_of(j)).collect())
}

fn emit(prep: &PreparedReplay, frame: &Frame, ranges: &[(usize, usize, usize)], owner: &[Option<usize>]) -> FrameDecision {
    let mut boxes = Vec::with_capacity(frame.boxes.len());
    let mut masked = Vec::new();
    for &(j, k) in &frame.boxes {
        let slot = ranges.iter().position(|r| r.0 == j).expect("frame lies inside its window");
        let tag = owner[slot];
        let det = &prep.detections[j][k];
        let id = prep.tracklets[j].tracklet_id;
        if tag.is_none() {
            masked.push(id);
        }
        boxes.push(BoxDecision {
            tag_id: tag.map(|i| prep.tags[i].tag_id.clone()),
            tracklet_id: id,
            u_px: det.u,
            v_px: det.v,
            w_px: det.width,
            h_px: det.height,
            keep: tag.is_some(),
        });
    }
    FrameDecision { t: frame.t, boxes, masked }
}

/// Per-frame decisions for one cost threshold and windowing.
pub fn decide(prep: &PreparedReplay, c_th: f64, window_s: f64, mode: WindowMode) -> Result<ReplayOutput, PipelineError> {
    use std::cmp::Ordering;
    let n = prep.frames.len();
    let mut decisions = Vec::with_capacity(n);
    let base = if n == 0 { 0.0 } else { prep.prepare_ms / n as f64 };
    let mut latency_ms = vec![base; n];
    match mode {
        WindowMode::Clip => {
            let Some(origin) = prep.frames.first().map(|f| f.t) else {
                return Ok(ReplayOutput {
                    decisions,
                    latency_ms,
                    tag_ids: prep.tags.iter().map(|t| t.tag_id.clone()).collect(),
                });
            };
            let window_of = |t: f64| ((t - origin + FRAME_EPS) / window_s).floor() as i64;
            let mut f = 0;
            while f < n {
                let started = Instant::now();
                let k = window_of(prep.frames[f].t);
                let end = f + prep.frames[f..].partition_point(|fr| window_of(fr.t) == k);
                let ranges = window_ranges(prep, |t| window_of(t).cmp(&k));
                let owner = solve_window(prep, &ranges, c_th)?;
                for frame in &prep.frames[f..end] {
                    decisions.push(emit(prep, frame, &ranges, &owner));
                }
                let share = started.elapsed().as_secs_f64() * 1e3 / (end - f) as f64;
                for l in &mut latency_ms[f..end] {
                    *l += share;
                }
                f = end;
            }
        }
        WindowMode::Sliding => {
            for (f, frame) in prep.frames.iter().enumerate() {
                let started = Instant::now();
                let (t0, t1) = (frame.t - window_s + FRAME_EPS, frame.t + FRAME_EPS);
                let ranges = window_ranges(prep, |t| {
                    if t <= t0 {
                        Ordering::Less
                    } else if t > t1 {
                        Ordering::Greater
                    } else {
                        Ordering::Equal
                    }
                });
                let owner = solve_window(prep, &ranges, c_th)?;
                decisions.push(emit(prep, frame, &ranges, &owner));
                latency_ms[f] += started.elapsed().as_secs_f64() * 1e3;
            }
        }
    }
    Ok(ReplayOutput {
        decisions,
        latency_ms,
        tag_ids: prep.tags.iter().map(|t| t.tag_id.clone()).collect(),
    })
}

/// Filters the tags, builds the tracklets and emits one decision per camera
/// frame.
pub fn run_replay<D: NlosClassifier + ?Sized>(
    uwb: &[UwbSample],
    detections: &[HeadDetection],
    cfg: &PipelineConfig,
    detector: &D,
) -> Result<ReplayOutput, PipelineError> {
    let prep = prepare_replay(uwb, detections, cfg, detector)?;
    decide(&prep, cfg.c_th, cfg.window_s, cfg.mode)
}
