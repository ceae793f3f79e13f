//! JSONL record formats. Every record is one line of UTF-8 JSON with its
//! fields in a fixed order, and floats written in shortest round-trip form,
//! so reading and re-writing a file reproduces it byte for byte.

use super::PipelineError;
use crate::geometry::{HeadDetection, PolarMeasurement};
use crate::nlos::SignalFeatures;
use crate::simulator::TruthRecord;
use crate::tracking::UwbSample;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UwbRecord {
    pub tag_id: String,
    pub t: f64,
    pub radial_m: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub feat: Vec<f64>,
}

impl UwbRecord {
    fn check(&self) -> Result<(), String> {
        if self.tag_id.is_empty() {
            return Err("empty tag_id".into());
        }
        if !self.t.is_finite() {
            return Err("non-finite t".into());
        }
        if !PolarMeasurement::new(self.radial_m, self.azimuth_rad, self.elevation_rad).is_valid() {
            return Err("polar measurement out of range".into());
        }
        if self.feat.iter().any(|f| !f.is_finite()) {
            return Err("non-finite feature".into());
        }
        Ok(())
    }
}

impl From<&UwbSample> for UwbRecord {
    fn from(s: &UwbSample) -> Self {
        Self {
            tag_id: s.tag_id.clone(),
            t: s.timestamp,
            radial_m: s.z.radial,
            azimuth_rad: s.z.azimuth,
            elevation_rad: s.z.elevation,
            feat: s.features.as_slice().to_vec(),
        }
    }
}

impl From<UwbRecord> for UwbSample {
    fn from(r: UwbRecord) -> Self {
        Self {
            tag_id: r.tag_id,
            timestamp: r.t,
            z: PolarMeasurement::new(r.radial_m, r.azimuth_rad, r.elevation_rad),
            features: SignalFeatures::new(r.feat),
        }
    }
}

/// One head box of one tracklet at one camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub tracklet_id: u64,
    pub t: f64,
    pub u_px: f64,
    pub v_px: f64,
    pub w_px: f64,
    pub h_px: f64,
}

impl TrackletRecord {
    fn check(&self) -> Result<(), String> {
        if ![self.t, self.u_px, self.v_px].iter().all(|v| v.is_finite()) {
            return Err("non-finite value".into());
        }
        if !(self.w_px > 0.0 && self.w_px.is_finite() && self.h_px > 0.0 && self.h_px.is_finite()) {
            return Err("box size must be positive".into());
        }
        Ok(())
    }
}

impl From<&HeadDetection> for TrackletRecord {
    fn from(d: &HeadDetection) -> Self {
        Self {
            tracklet_id: d.tracklet_id,
            t: d.timestamp,
            u_px: d.u,
            v_px: d.v,
            w_px: d.width,
            h_px: d.height,
        }
    }
}

impl From<TrackletRecord> for HeadDetection {
    fn from(r: TrackletRecord) -> Self {
        Self {
            tracklet_id: r.tracklet_id,
            timestamp: r.t,
            u: r.u_px,
            v: r.v_px,
            width: r.w_px,
            height: r.h_px,
        }
    }
}

/// Parses one record per non-blank line. `source_name` labels errors.
pub fn read_records<T: DeserializeOwned, R: BufRead>(reader: R, source_name: &str) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| PipelineError::Schema {
            source_name: source_name.to_string(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize, W: Write>(writer: W, records: &[T]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn checked<T>(recs: Vec<T>, source_name: &str, check: impl Fn(&T) -> Result<(), String>) -> Result<Vec<T>, PipelineError> {
    for (k, r) in recs.iter().enumerate() {
        check(r).map_err(|message| PipelineError::Schema {
            source_name: source_name.to_string(),
            line: k + 1,
            message,
        })?;
    }
    Ok(recs)
}

pub fn read_uwb<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<UwbSample>, PipelineError> {
    let recs: Vec<UwbRecord> = read_records(reader, source_name)?;
    let recs = checked(recs, source_name, UwbRecord::check)?;
    Ok(recs.into_iter().map(UwbSample::from).collect())
}

pub fn read_tracklets<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<HeadDetection>, PipelineError> {
    let recs: Vec<TrackletRecord> = read_records(reader, source_name)?;
    let recs = checked(recs, source_name, TrackletRecord::check)?;
    Ok(recs.into_iter().map(HeadDetection::from).collect())
}

pub fn read_truth<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<TruthRecord>, PipelineError> {
    let recs: Vec<TruthRecord> = read_records(reader, source_name)?;
    checked(recs, source_name, |r| if r.t.is_finite() { Ok(()) } else { Err("non-finite t".into()) })
}

pub fn write_uwb<W: Write>(writer: W, samples: &[UwbSample]) -> Result<(), PipelineError> {
    let recs: Vec<UwbRecord> = samples.iter().map(UwbRecord::from).collect();
    write_records(writer, &recs)
}

pub fn write_tracklets<W: Write>(writer: W, detections: &[HeadDetection]) -> Result<(), PipelineError> {
    let recs: Vec<TrackletRecord> = detections.iter().map(TrackletRecord::from).collect();
    write_records(writer, &recs)
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::new(File::open(path)?))
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_uwb(path: impl AsRef<Path>) -> Result<Vec<UwbSample>, PipelineError> {
    let path = path.as_ref();
    read_uwb(open(path)?, &label(path))
}

pub fn load_tracklets(path: impl AsRef<Path>) -> Result<Vec<HeadDetection>, PipelineError> {
    let path = path.as_ref();
    read_tracklets(open(path)?, &label(path))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>, PipelineError> {
    let path = path.as_ref();
    read_truth(open(path)?, &label(path))
}

pub fn save_records<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), PipelineError> {
    write_records(File::create(path)?, records)
}

pub fn save_uwb(path: impl AsRef<Path>, samples: &[UwbSample]) -> Result<(), PipelineError> {
    write_uwb(File::create(path)?, samples)
}

pub fn save_tracklets(path: impl AsRef<Path>, detections: &[HeadDetection]) -> Result<(), PipelineError> {
    write_tracklets(File::create(path)?, detections)
}
