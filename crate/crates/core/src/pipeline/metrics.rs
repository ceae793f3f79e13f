//! Recall and misidentification against per-frame ground truth, threshold
//! sweeps, and the metrics CSV.

use super::replay::FrameDecision;
use super::PipelineError;
use crate::simulator::{tag_id_of, TruthRecord};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

/// Frame key: timestamps are matched to the microsecond.
fn frame_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Correct frames over frames with the carrier visible, summed over
    /// carriers. NaN when no carrier is ever visible.
    pub recall: f64,
    pub visible_frames: usize,
    pub correct_frames: usize,
    /// `(frame, tag)` pairs where a box of someone else was kept for the tag.
    pub misid_frames: usize,
    /// `misid_frames` over all `(frame, tag)` pairs.
    pub misid_rate: f64,
    pub n_frames: usize,
    pub n_tags: usize,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
}

impl RunMetrics {
    /// The metrics without the timing fields, which vary run to run.
    pub fn outcome(&self) -> (u64, usize, usize, usize, u64, usize, usize) {
        (
            self.recall.to_bits(),
            self.visible_frames,
            self.correct_frames,
            self.misid_frames,
            self.misid_rate.to_bits(),
            self.n_frames,
            self.n_tags,
        )
    }
}

/// Scores `decisions` against the ground truth. Carrier `p` owns tag
/// `tag_id_of(p)`. Frames are those present in either input.
pub fn evaluate_recall(decisions: &[FrameDecision], truth: &[TruthRecord]) -> Result<RunMetrics, PipelineError> {
    let mut truth_at: BTreeMap<i64, BTreeMap<u64, &TruthRecord>> = BTreeMap::new();
    let mut carriers: BTreeSet<u64> = BTreeSet::new();
    for r in truth {
        truth_at.entry(frame_key(r.t)).or_default().insert(r.tracklet_id, r);
        if r.carries_tag {
            carriers.insert(r.person_id);
        }
    }
    let mut tags: BTreeMap<String, Option<u64>> = carriers.iter().map(|&p| (tag_id_of(p), Some(p))).collect();
    let mut decided: BTreeMap<i64, &FrameDecision> = BTreeMap::new();
    for d in decisions {
        decided.insert(frame_key(d.t), d);
        for b in d.kept() {
            if let Some(tag) = &b.tag_id {
                tags.entry(tag.clone()).or_insert(None);
            }
        }
    }
    let frames: BTreeSet<i64> = truth_at.keys().chain(decided.keys()).copied().collect();
    let empty = BTreeMap::new();

    let (mut visible, mut correct, mut misid) = (0usize, 0usize, 0usize);
    for key in &frames {
        let in_frame = truth_at.get(key).unwrap_or(&empty);
        let decision = decided.get(key);
        if let Some(d) = decision {
            for b in &d.boxes {
                if !in_frame.contains_key(&b.tracklet_id) {
                    return Err(PipelineError::MissingGroundTruth {
                        t: d.t,
                        tracklet_id: b.tracklet_id,
                    });
                }
            }
        }
        for (tag, person) in &tags {
            let kept: Vec<u64> = decision
                .map(|d| {
                    d.kept()
                        .filter(|b| b.tag_id.as_deref() == Some(tag.as_str()))
                        .map(|b| in_frame[&b.tracklet_id].person_id)
                        .collect()
                })
                .unwrap_or_default();
            if let Some(p) = person {
                if in_frame.values().any(|r| r.person_id == *p) {
                    visible += 1;
                    if kept.contains(p) {
                        correct += 1;
                    }
                }
            }
            if kept.iter().any(|k| Some(*k) != *person) {
                misid += 1;
            }
        }
    }
    let pairs = frames.len() * tags.len();
    Ok(RunMetrics {
        recall: if visible == 0 { f64::NAN } else { correct as f64 / visible as f64 },
        visible_frames: visible,
        correct_frames: correct,
        misid_frames: misid,
        misid_rate: if pairs == 0 { 0.0 } else { misid as f64 / pairs as f64 },
        n_frames: frames.len(),
        n_tags: tags.len(),
        mean_latency_ms: 0.0,
        max_latency_ms: 0.0,
    })
}

/// Fills the timing fields from per-frame latencies.
pub fn with_latency(mut m: RunMetrics, latency_ms: &[f64]) -> RunMetrics {
    if !latency_ms.is_empty() {
        m.mean_latency_ms = latency_ms.iter().sum::<f64>() / latency_ms.len() as f64;
        m.max_latency_ms = latency_ms.iter().copied().fold(0.0, f64::max);
    }
    m
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene_id: String,
    pub n_people: usize,
    pub n_tags: usize,
    pub c_th: f64,
    pub u_th: f64,
    pub recall: f64,
    pub misid_rate: f64,
    pub mean_latency_ms: f64,
}

pub const METRICS_HEADER: &str = "scene_id,n_people,n_tags,c_th,u_th,recall,misid_rate,mean_latency_ms";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<(), PipelineError> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        if r.scene_id.contains([',', '"', '\n']) {
            return Err(PipelineError::Config(format!("scene id {:?} cannot be written to CSV", r.scene_id)));
        }
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.scene_id, r.n_people, r.n_tags, r.c_th, r.u_th, r.recall, r.misid_rate, r.mean_latency_ms
        )?;
    }
    Ok(())
}

/// Mean recall per crowd size, skipping runs where the recall is undefined.
pub fn recall_by_crowd(rows: &[MetricsRow]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.recall.is_finite()) {
        let e = acc.entry(r.n_people).or_default();
        e.0 += r.recall;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c_th: f64,
    pub recall: f64,
    pub misid_rate: f64,
}

pub const SWEEP_HEADER: &str = "c_th,recall,misid_rate";

pub fn write_sweep_csv<W: Write>(mut w: W, points: &[SweepPoint]) -> Result<(), PipelineError> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for p in points {
        writeln!(w, "{},{},{}", p.c_th, p.recall, p.misid_rate)?;
    }
    Ok(())
}

/// Area under recall as a function of misidentification rate, by the
/// trapezoid rule over the points sorted by misidentification rate.
pub fn pr_auc(points: &[SweepPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.recall.is_finite())
        .map(|p| (p.misid_rate, p.recall))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}
