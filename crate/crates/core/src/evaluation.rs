//! KITTI-style 3D average precision.
//!
//! Detections are matched greedily per frame in descending score order;
//! precision is interpolated with the right maximum and sampled at
//! `recall_positions` equally spaced recall levels `1/R, ..., 1`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_3d, OrientedBox3D};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn label(&self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

/// Image-space attributes deciding the difficulty of a ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyAttrs {
    pub height_px: f64,
    pub occlusion: u8,
    pub truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyBucket {
    pub min_height_px: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

impl DifficultyBucket {
    fn admits(&self, a: &DifficultyAttrs) -> bool {
        a.height_px >= self.min_height_px
            && a.occlusion <= self.max_occlusion
            && a.truncation <= self.max_truncation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub iou_threshold: f64,
    /// Ground-truth classes that are neither counted nor penalized for this
    /// class (e.g. vans when evaluating cars).
    #[serde(default)]
    pub neighbors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classes: Vec<ClassSpec>,
    pub recall_positions: usize,
    pub buckets: [DifficultyBucket; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        let spec = |name: &str, t: f64, n: &[&str]| ClassSpec {
            name: name.into(),
            iou_threshold: t,
            neighbors: n.iter().map(|s| s.to_string()).collect(),
        };
        EvalConfig {
            classes: vec![
                spec("Car", 0.7, &["Van"]),
                spec("Pedestrian", 0.5, &["Person_sitting"]),
                spec("Cyclist", 0.5, &[]),
            ],
            recall_positions: 40,
            buckets: [
                DifficultyBucket {
                    min_height_px: 40.0,
                    max_occlusion: 0,
                    max_truncation: 0.15,
                },
                DifficultyBucket {
                    min_height_px: 25.0,
                    max_occlusion: 1,
                    max_truncation: 0.30,
                },
                DifficultyBucket {
                    min_height_px: 25.0,
                    max_occlusion: 2,
                    max_truncation: 0.50,
                },
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.recall_positions < 1 {
            return Err(EvalError::Config("recall_positions must be at least 1".into()));
        }
        for c in &self.classes {
            if !(c.iou_threshold > 0.0 && c.iou_threshold <= 1.0) {
                return Err(EvalError::Config(format!(
                    "IoU threshold for {} must lie in (0, 1]",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Ground-truth class names that may appear without being evaluated.
pub const KNOWN_LABEL_CLASSES: &[&str] = &[
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Person",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: String,
    pub bbox: OrientedBox3D,
    /// `None` when no image-space box is known; such objects are rated
    /// moderate.
    pub attrs: Option<DifficultyAttrs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub class: String,
    pub bbox: OrientedBox3D,
    pub score: f64,
}

/// Ground truth and predictions of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalFrame {
    pub sequence: usize,
    pub frame: usize,
    pub gt: Vec<GtObject>,
    pub det: Vec<ScoredBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Absorbed by an ignored ground truth; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// One flag per input detection, in input order.
    pub flags: Vec<MatchFlag>,
    pub false_negatives: usize,
}

/// Greedy matching for one frame. `gt` pairs each box with an ignore flag.
///
/// Detections are visited by descending score (ties by input order). Each
/// takes the unmatched counted ground truth with the highest IoU if that IoU
/// reaches `iou_thresh`; failing that, an unmatched ignored ground truth
/// absorbs it; otherwise it is a false positive.
pub fn match_detections(
    gt: &[(OrientedBox3D, bool)],
    det: &[(OrientedBox3D, f64)],
    iou_thresh: f64,
) -> FrameMatch {
    let mut order: Vec<usize> = (0..det.len()).collect();
    order.sort_by(|&a, &b| {
        det[b]
            .1
            .partial_cmp(&det[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gt.len()];
    let mut flags = vec![MatchFlag::FalsePositive; det.len()];
    for &d in &order {
        let mut pick = |want_ignored: bool| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (g, (gbox, ignored)) in gt.iter().enumerate() {
                if taken[g] || *ignored != want_ignored {
                    continue;
                }
                let iou = iou_3d(&det[d].0, gbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        };
        if pick(false).is_some() {
            flags[d] = MatchFlag::TruePositive;
        } else if pick(true).is_some() {
            flags[d] = MatchFlag::Ignored;
        }
    }
    let false_negatives = gt
        .iter()
        .zip(&taken)
        .filter(|((_, ignored), t)| !*ignored && !**t)
        .count();
    FrameMatch {
        flags,
        false_negatives,
    }
}

/// Interpolated AP in percent from `(score, is_true_positive)` pairs.
///
/// Detections with equal scores enter the sweep together. Returns `None` when
/// there is no ground truth.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize, recall_positions: usize) -> Option<f64> {
    if num_gt == 0 || recall_positions == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    // (tp, fp) after each distinct score threshold.
    let mut points: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(s, is_tp)) in sorted.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].0 != s {
            points.push((tp, fp));
        }
    }

    // Right-max precision: best precision at recall >= r.
    let mut right_max = vec![0.0f64; points.len()];
    let mut run = 0.0f64;
    for k in (0..points.len()).rev() {
        let (tp, fp) = points[k];
        run = run.max(tp as f64 / (tp + fp) as f64);
        right_max[k] = run;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 1..=recall_positions {
        // First sweep point whose recall reaches r / R (recall is monotone).
        while k < points.len() && points[k].0 * recall_positions < r * num_gt {
            k += 1;
        }
        if k == points.len() {
            break;
        }
        sum += right_max[k];
    }
    Some(100.0 * sum / recall_positions as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    /// AP (%) for easy, moderate and hard.
    pub ap: [Option<f64>; 3],
    pub counts: [Counts; 3],
    pub num_gt: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean of the present class APs per difficulty.
    pub map: [Option<f64>; 3],
}

impl EvalReport {
    pub fn ap(&self, class: &str, difficulty: Difficulty) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .and_then(|c| c.ap[difficulty as usize])
    }

    /// Plain-text table: one row, per-class Easy/Medium/Hard then mAP.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let mut head = String::new();
        let mut sub = String::new();
        let mut row = String::new();
        let groups = self
            .classes
            .iter()
            .map(|c| (c.class.as_str(), c.ap))
            .chain(std::iter::once(("mAP", self.map)));
        for (name, aps) in groups {
            let _ = write!(head, "| {name:<26}");
            for d in Difficulty::ALL {
                let _ = write!(sub, "| {:<7}", d.label());
                let _ = write!(row, "| {:<7}", fmt(aps[d as usize]));
            }
            sub.push(' ');
            row.push(' ');
        }
        format!("{head}|\n{sub}|\n{row}|\n")
    }
}

fn check_known(name: &str, cfg: &EvalConfig) -> Result<(), EvalError> {
    if KNOWN_LABEL_CLASSES.contains(&name) || cfg.classes.iter().any(|c| c.name == name) {
        Ok(())
    } else {
        Err(EvalError::UnknownClass(name.to_string()))
    }
}

/// AP for every configured class and difficulty over all frames.
pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    for f in frames {
        for g in &f.gt {
            check_known(&g.class, cfg)?;
        }
        for d in &f.det {
            if !cfg.classes.iter().any(|c| c.name == d.class) {
                return Err(EvalError::UnknownClass(d.class.clone()));
            }
        }
    }

    let cells: Vec<(usize, Difficulty)> = (0..cfg.classes.len())
        .flat_map(|c| Difficulty::ALL.into_iter().map(move |d| (c, d)))
        .collect();
    let results: Vec<(Option<f64>, Counts, usize)> = cells
        .par_iter()
        .map(|&(c, diff)| evaluate_cell(frames, &cfg.classes[c], &cfg.buckets[diff as usize], diff, cfg))
        .collect();

    let mut classes: Vec<ClassReport> = cfg
        .classes
        .iter()
        .map(|c| ClassReport {
            class: c.name.clone(),
            ap: [None; 3],
            counts: [Counts::default(); 3],
            num_gt: [0; 3],
        })
        .collect();
    for (&(c, d), (ap, counts, num_gt)) in cells.iter().zip(results) {
        classes[c].ap[d as usize] = ap;
        classes[c].counts[d as usize] = counts;
        classes[c].num_gt[d as usize] = num_gt;
    }
    let mut map = [None; 3];
    for d in Difficulty::ALL {
        let present: Vec<f64> = classes.iter().filter_map(|c| c.ap[d as usize]).collect();
        if !present.is_empty() {
            map[d as usize] = Some(present.iter().sum::<f64>() / present.len() as f64);
        }
    }
    Ok(EvalReport { classes, map })
}

/// Whether a ground truth of class `spec` counts at `bucket`; `None` means it
/// is not relevant to the class at all.
fn gt_status(
    g: &GtObject,
    spec: &ClassSpec,
    bucket: &DifficultyBucket,
    diff: Difficulty,
) -> Option<bool> {
    if g.class == spec.name {
        let counted = match &g.attrs {
            Some(a) => bucket.admits(a),
            None => diff != Difficulty::Easy,
        };
        Some(!counted)
    } else if spec.neighbors.contains(&g.class) {
        Some(true)
    } else {
        None
    }
}

fn evaluate_cell(
    frames: &[EvalFrame],
    spec: &ClassSpec,
    bucket: &DifficultyBucket,
    diff: Difficulty,
    cfg: &EvalConfig,
) -> (Option<f64>, Counts, usize) {
    let mut scored = Vec::new();
    let mut counts = Counts::default();
    let mut num_gt = 0;
    for f in frames {
        let gt: Vec<(OrientedBox3D, bool)> = f
            .gt
            .iter()
            .filter_map(|g| gt_status(g, spec, bucket, diff).map(|ign| (g.bbox, ign)))
            .collect();
        num_gt += gt.iter().filter(|(_, ign)| !ign).count();
        let det: Vec<(OrientedBox3D, f64)> = f
            .det
            .iter()
            .filter(|d| d.class == spec.name)
            .map(|d| (d.bbox, d.score))
            .collect();
        let m = match_detections(&gt, &det, spec.iou_threshold);
        counts.fn_ += m.false_negatives;
        for (flag, (_, score)) in m.flags.iter().zip(&det) {
            match flag {
                MatchFlag::TruePositive => {
                    counts.tp += 1;
                    scored.push((*score, true));
                }
                MatchFlag::FalsePositive => {
                    counts.fp += 1;
                    scored.push((*score, false));
                }
                MatchFlag::Ignored => {}
            }
        }
    }
    (
        average_precision(&scored, num_gt, cfg.recall_positions),
        counts,
        num_gt,
    )
}
