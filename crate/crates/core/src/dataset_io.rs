//! KITTI tracking labels, the dataset directory layout and the JSON-lines
//! interchange files.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/
//!   label_02/NNNN.txt            KITTI tracking labels, one file per sequence
//!   detections/NNNN.jsonl        one detection per line
//!   tracklets/NNNN.jsonl         one tracklet per line
//!   features/NNNN/FFFFFF.kpfb    keypoint feature blobs, one per frame
//! ```
//!
//! Internal boxes are right-handed with `z` up: `x` forward, `y` left.
//! KITTI camera coordinates are `x` right, `y` down, `z` forward with the
//! location at the bottom center of the box.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{read_blob, write_blob, CorrelationError, KeypointFeatureSet};
use crate::evaluation::{DifficultyAttrs, GtObject};
use crate::geometry::{wrap_angle, OrientedBox3D};
use crate::linker::{Detection, Tracklet, Tube};
use crate::track_codec::TrackDelta;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),
    #[error("{path}: line {line}: {msg}")]
    Json {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: line {line}: {msg}")]
    Label {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("record has non-positive dimensions (h={h}, w={w}, l={l})")]
    InvalidDimensions { h: f64, w: f64, l: f64 },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("{path}: {source}")]
    Features {
        path: PathBuf,
        source: CorrelationError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Class vocabulary used when no other is given.
pub const DEFAULT_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn default_classes() -> Vec<String> {
    DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
}

/// KITTI tracking training sequences used for training; the other nine of
/// `0..=20` form the validation split.
pub const TRAIN_SEQUENCES: [usize; 12] = [0, 1, 3, 4, 5, 9, 11, 12, 15, 17, 19, 20];
pub const NUM_TRAINING_SEQUENCES: usize = 21;

pub fn split_sequences(role: SplitRole) -> Vec<usize> {
    (0..NUM_TRAINING_SEQUENCES)
        .filter(|s| TRAIN_SEQUENCES.contains(s) == (role == SplitRole::Train))
        .collect()
}

/// One line of a KITTI tracking label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub frame: usize,
    pub track_id: i64,
    pub class: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    /// left, top, right, bottom in pixels.
    pub bbox_2d: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Bottom center in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    /// `None` when the image box is the `-1` placeholder.
    pub fn difficulty_attrs(&self) -> Option<DifficultyAttrs> {
        if self.bbox_2d.iter().all(|v| *v == -1.0) {
            return None;
        }
        Some(DifficultyAttrs {
            height_px: self.bbox_2d[3] - self.bbox_2d[1],
            occlusion: self.occluded.clamp(0, u8::MAX as i64) as u8,
            truncation: self.truncated,
        })
    }

    pub fn to_gt(&self) -> Result<GtObject, DataError> {
        Ok(GtObject {
            class: self.class.clone(),
            bbox: to_box(self)?,
            attrs: self.difficulty_attrs(),
        })
    }
}

impl fmt::Display for LabelRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.frame, self.track_id, self.class, self.truncated, self.occluded, self.alpha
        )?;
        for v in self.bbox_2d {
            write!(f, " {v}")?;
        }
        write!(f, " {} {} {}", self.h, self.w, self.l)?;
        for v in self.location {
            write!(f, " {v}")?;
        }
        write!(f, " {}", self.rotation_y)?;
        if let Some(s) = self.score {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<LabelRecord, DataError> {
    let cols: Vec<&str> = line.split_whitespace().collect();
    if cols.len() != 17 && cols.len() != 18 {
        return Err(DataError::Parse {
            line: lineno,
            msg: format!("expected 17 or 18 columns, found {}", cols.len()),
        });
    }
    let num = |k: usize| -> Result<f64, DataError> {
        cols[k].parse::<f64>().map_err(|_| DataError::Parse {
            line: lineno,
            msg: format!("column {} is not a number: {:?}", k + 1, cols[k]),
        })
    };
    let int = |k: usize| -> Result<i64, DataError> {
        cols[k].parse::<i64>().map_err(|_| DataError::Parse {
            line: lineno,
            msg: format!("column {} is not an integer: {:?}", k + 1, cols[k]),
        })
    };
    let frame = int(0)?;
    if frame < 0 {
        return Err(DataError::Parse {
            line: lineno,
            msg: "negative frame index".into(),
        });
    }
    Ok(LabelRecord {
        frame: frame as usize,
        track_id: int(1)?,
        class: cols[2].to_string(),
        truncated: num(3)?,
        occluded: int(4)?,
        alpha: num(5)?,
        bbox_2d: [num(6)?, num(7)?, num(8)?, num(9)?],
        h: num(10)?,
        w: num(11)?,
        l: num(12)?,
        location: [num(13)?, num(14)?, num(15)?],
        rotation_y: num(16)?,
        score: if cols.len() == 18 { Some(num(17)?) } else { None },
    })
}

/// Parses a label file; records are grouped by frame in file order.
pub fn parse_labels(text: &str) -> Result<BTreeMap<usize, Vec<LabelRecord>>, DataError> {
    let mut out: BTreeMap<usize, Vec<LabelRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, i + 1)?;
        out.entry(rec.frame).or_default().push(rec);
    }
    Ok(out)
}

pub fn write_labels(labels: &BTreeMap<usize, Vec<LabelRecord>>) -> String {
    let mut s = String::new();
    for rec in labels.values().flatten() {
        s.push_str(&rec.to_string());
        s.push('\n');
    }
    s
}

/// Camera-frame label to internal center-based box.
pub fn to_box(rec: &LabelRecord) -> Result<OrientedBox3D, DataError> {
    if !(rec.h > 0.0 && rec.w > 0.0 && rec.l > 0.0) {
        return Err(DataError::InvalidDimensions {
            h: rec.h,
            w: rec.w,
            l: rec.l,
        });
    }
    let [cx, cy, cz] = rec.location;
    Ok(OrientedBox3D::new(
        cz,
        -cx,
        -cy + 0.5 * rec.h,
        rec.l,
        rec.w,
        rec.h,
        -rec.rotation_y - FRAC_PI_2,
    ))
}

/// Inverse of [`to_box`]: camera-frame bottom center and `rotation_y`.
pub fn from_box(b: &OrientedBox3D) -> ([f64; 3], f64) {
    (
        [-b.y, -(b.z - 0.5 * b.h), b.x],
        wrap_angle(-b.yaw - FRAC_PI_2),
    )
}

/// Builds a label record for an internal box. The image box is left as the
/// `-1` placeholder.
pub fn label_from_box(frame: usize, track_id: i64, class: &str, b: &OrientedBox3D) -> LabelRecord {
    let (location, rotation_y) = from_box(b);
    LabelRecord {
        frame,
        track_id,
        class: class.to_string(),
        truncated: 0.0,
        occluded: 0,
        alpha: -10.0,
        bbox_2d: [-1.0; 4],
        h: b.h,
        w: b.w,
        l: b.l,
        location,
        rotation_y,
        score: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame: usize,
    pub id: usize,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub scores: BTreeMap<String, f64>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, classes: &[String]) -> Self {
        let (best, _) = d
            .scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        DetectionRecord {
            frame: d.frame,
            id: d.id,
            class: classes.get(best).cloned().unwrap_or_default(),
            bbox: d.bbox.to_array(),
            scores: classes
                .iter()
                .zip(&d.scores)
                .map(|(c, &p)| (c.clone(), p))
                .collect(),
        }
    }

    pub fn to_detection(&self, classes: &[String]) -> Result<Detection, DataError> {
        let mut scores = vec![0.0; classes.len()];
        for (name, &p) in &self.scores {
            let c = classes
                .iter()
                .position(|k| k == name)
                .ok_or_else(|| DataError::UnknownClass(name.clone()))?;
            scores[c] = p;
        }
        Ok(Detection {
            frame: self.frame,
            id: self.id,
            bbox: OrientedBox3D::from(self.bbox),
            scores,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub frame: usize,
    pub id: usize,
    pub delta: [f64; 4],
}

impl From<&Tracklet> for TrackletRecord {
    fn from(t: &Tracklet) -> Self {
        TrackletRecord {
            frame: t.source_frame,
            id: t.source_id,
            delta: t.delta.to_array(),
        }
    }
}

impl From<&TrackletRecord> for Tracklet {
    fn from(r: &TrackletRecord) -> Self {
        Tracklet {
            source_frame: r.frame,
            source_id: r.id,
            delta: TrackDelta::from(r.delta),
        }
    }
}

/// One output tube per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeRecord {
    pub track: usize,
    pub class: String,
    pub frames: Vec<usize>,
    pub ids: Vec<usize>,
    pub boxes: Vec<[f64; 7]>,
    pub scores: Vec<f64>,
    pub raw_scores: Vec<f64>,
    pub tube_score: f64,
}

impl TubeRecord {
    pub fn from_tube(track: usize, t: &Tube, classes: &[String]) -> Self {
        TubeRecord {
            track,
            class: classes
                .get(t.class_id)
                .cloned()
                .unwrap_or_else(|| format!("class{}", t.class_id)),
            frames: t.frames.clone(),
            ids: t.detection_ids.clone(),
            boxes: t.boxes.iter().map(|b| b.to_array()).collect(),
            scores: t.scores.clone(),
            raw_scores: t.raw_scores.clone(),
            tube_score: t.tube_score,
        }
    }
}

/// Serializes each item as one JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<Vec<T>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn label_path(root: &Path, seq: usize) -> PathBuf {
    root.join("label_02").join(format!("{seq:04}.txt"))
}

pub fn detections_path(root: &Path, seq: usize) -> PathBuf {
    root.join("detections").join(format!("{seq:04}.jsonl"))
}

pub fn tracklets_path(root: &Path, seq: usize) -> PathBuf {
    root.join("tracklets").join(format!("{seq:04}.jsonl"))
}

pub fn tubes_path(root: &Path, seq: usize) -> PathBuf {
    root.join("tubes").join(format!("{seq:04}.jsonl"))
}

pub fn features_path(root: &Path, seq: usize, frame: usize) -> PathBuf {
    root.join("features").join(format!("{seq:04}")).join(format!("{frame:06}.kpfb"))
}

/// Which parts of a sequence must be present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Parts {
    pub labels: bool,
    pub detections: bool,
    pub tracklets: bool,
}

/// Everything known about one sequence, ordered by `(frame, id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceData {
    pub id: usize,
    pub labels: BTreeMap<usize, Vec<LabelRecord>>,
    pub detections: Vec<DetectionRecord>,
    pub tracklets: Vec<TrackletRecord>,
}

impl SequenceData {
    pub fn linker_input(&self, classes: &[String]) -> Result<(Vec<Detection>, Vec<Tracklet>), DataError> {
        let dets = self
            .detections
            .iter()
            .map(|d| d.to_detection(classes))
            .collect::<Result<Vec<_>, _>>()?;
        let trs = self.tracklets.iter().map(Tracklet::from).collect();
        Ok((dets, trs))
    }
}

/// Sequence ids for which a label or detection file exists under `root`.
pub fn discover_sequences(root: &Path) -> Result<Vec<usize>, DataError> {
    let mut ids = Vec::new();
    for dir in ["label_02", "detections"] {
        let p = root.join(dir);
        if !p.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&p).map_err(io_err(&p))? {
            let entry = entry.map_err(io_err(&p))?;
            let name = entry.file_name();
            let stem = Path::new(&name).file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if let Ok(id) = stem.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

pub fn load_sequence(root: &Path, seq: usize, parts: Parts) -> Result<SequenceData, DataError> {
    let paths = [
        (label_path(root, seq), parts.labels),
        (detections_path(root, seq), parts.detections),
        (tracklets_path(root, seq), parts.tracklets),
    ];
    let missing: Vec<PathBuf> = paths
        .iter()
        .filter(|(p, required)| *required && !p.is_file())
        .map(|(p, _)| p.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::Missing(missing));
    }

    let mut data = SequenceData {
        id: seq,
        ..SequenceData::default()
    };
    let lp = &paths[0].0;
    if lp.is_file() {
        let text = fs::read_to_string(lp).map_err(io_err(lp))?;
        data.labels = parse_labels(&text).map_err(|e| match e {
            DataError::Parse { line, msg } => DataError::Label {
                path: lp.clone(),
                line,
                msg,
            },
            other => other,
        })?;
    }
    let dp = &paths[1].0;
    if dp.is_file() {
        data.detections = read_jsonl(dp)?;
        data.detections.sort_by_key(|d| (d.frame, d.id));
    }
    let tp = &paths[2].0;
    if tp.is_file() {
        data.tracklets = read_jsonl(tp)?;
        data.tracklets.sort_by_key(|t| (t.frame, t.id));
    }
    Ok(data)
}

/// Loads every sequence of `role` (or all discovered sequences when `None`).
pub fn load_dataset(root: &Path, role: Option<SplitRole>, parts: Parts) -> Result<Vec<SequenceData>, DataError> {
    let ids = match role {
        Some(r) => split_sequences(r),
        None => discover_sequences(root)?,
    };
    ids.into_iter().map(|s| load_sequence(root, s, parts)).collect()
}

pub fn save_sequence(root: &Path, data: &SequenceData) -> Result<(), DataError> {
    if !data.labels.is_empty() {
        write_text(&label_path(root, data.id), &write_labels(&data.labels))?;
    }
    if !data.detections.is_empty() {
        write_text(&detections_path(root, data.id), &to_jsonl(&data.detections))?;
    }
    if !data.tracklets.is_empty() {
        write_text(&tracklets_path(root, data.id), &to_jsonl(&data.tracklets))?;
    }
    Ok(())
}

/// Writes linked tubes of one sequence as JSON lines; returns the path.
pub fn save_results(out: &Path, seq: usize, tubes: &[Tube], classes: &[String]) -> Result<PathBuf, DataError> {
    let recs: Vec<TubeRecord> = tubes
        .iter()
        .enumerate()
        .map(|(k, t)| TubeRecord::from_tube(k, t, classes))
        .collect();
    let path = tubes_path(out, seq);
    write_text(&path, &to_jsonl(&recs))?;
    Ok(path)
}

pub fn load_features(path: &Path, frame: u64) -> Result<KeypointFeatureSet, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_blob(BufReader::new(f), frame).map_err(|source| DataError::Features {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_features(path: &Path, set: &KeypointFeatureSet) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    write_blob(set, &mut f).map_err(|source| DataError::Features {
        path: path.to_path_buf(),
        source,
    })?;
    f.flush().map_err(io_err(path))
}
