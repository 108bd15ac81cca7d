//! Seeded synthetic scenes with known ground truth.
//!
//! Objects move with constant speed and yaw rate. The generator emits the
//! ground-truth tracks, noisy detections with dropout and low-scored clutter,
//! exact tracklets for every detected object, and keypoint features in which
//! each object carries a persistent unit "signature" descriptor.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::KeypointFeatureSet;
use crate::dataset_io::default_classes;
use crate::geometry::OrientedBox3D;
use crate::linker::{Detection, Tracklet, Tube};
use crate::track_codec::{encode_delta, TrackDelta};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("could not place {0} objects with the required separation")]
    Crowded(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_objects: usize,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    /// Speed range in m/s.
    pub speed_range: [f64; 2],
    /// Yaw-rate range in rad/s.
    pub yaw_rate_range: [f64; 2],
    pub dropout: f64,
    /// Standard deviation of the true-class score noise.
    pub score_noise: f64,
    /// Standard deviation of the detection center noise, meters.
    pub position_noise: f64,
    pub keypoints_per_object: usize,
    pub background_keypoints: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Expected number of clutter detections per frame.
    pub clutter_rate: f64,
    /// Object classes drawn uniformly; names must be in the class vocabulary.
    pub object_classes: Vec<String>,
    pub classes: Vec<String>,
    /// True-class score before noise; clamped to `[gt_score_floor, 1]`.
    pub base_score: f64,
    pub gt_score_floor: f64,
    /// Clutter scores are uniform in `[0.05, clutter_score_max]`.
    pub clutter_score_max: f64,
    /// Objects spawn in `[-extent, extent]^2`, meters.
    pub extent: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            num_objects: 10,
            frames: 40,
            frame_dt: 0.1,
            speed_range: [2.0, 12.0],
            yaw_rate_range: [-0.2, 0.2],
            dropout: 0.0,
            score_noise: 0.0,
            position_noise: 0.0,
            keypoints_per_object: 8,
            background_keypoints: 0,
            feature_dim: 16,
            feature_noise: 0.0,
            clutter_rate: 0.0,
            object_classes: vec!["Car".into()],
            classes: default_classes(),
            base_score: 0.9,
            gt_score_floor: 0.5,
            clutter_score_max: 0.45,
            extent: 80.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1]");
        }
        for (name, s) in [
            ("score_noise", self.score_noise),
            ("position_noise", self.position_noise),
            ("feature_noise", self.feature_noise),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SimError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        for p in [self.base_score, self.gt_score_floor, self.clutter_score_max] {
            if !(0.0..=1.0).contains(&p) {
                return bad("scores must lie in [0, 1]");
            }
        }
        if self.speed_range[0] > self.speed_range[1] || self.yaw_rate_range[0] > self.yaw_rate_range[1] {
            return bad("ranges must be ordered [min, max]");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.frame_dt > 0.0 && self.extent > 0.0) {
            return bad("frame_dt and extent must be positive");
        }
        if self.object_classes.is_empty() {
            return bad("object_classes is empty");
        }
        for c in &self.object_classes {
            if class_dims(c).is_none() || !self.classes.contains(c) {
                return Err(SimError::Config(format!("unsupported object class {c:?}")));
            }
        }
        Ok(())
    }
}

/// Typical (l, w, h) per class.
fn class_dims(class: &str) -> Option<[f64; 3]> {
    match class {
        "Car" => Some([3.9, 1.6, 1.5]),
        "Pedestrian" => Some([0.8, 0.6, 1.75]),
        "Cyclist" => Some([1.76, 0.6, 1.73]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTrack {
    pub object_id: usize,
    pub class_id: usize,
    /// One box per frame, frames `0..frames`.
    pub boxes: Vec<OrientedBox3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub classes: Vec<String>,
    pub tracks: Vec<GtTrack>,
    /// Sorted by `(frame, id)`.
    pub detections: Vec<Detection>,
    /// Ground-truth object behind each detection; `None` for clutter.
    pub detection_owner: Vec<Option<usize>>,
    pub tracklets: Vec<Tracklet>,
    /// `(object, frame, delta)` from frame to frame + 1.
    pub gt_tracklets: Vec<(usize, usize, TrackDelta)>,
    pub features: Vec<KeypointFeatureSet>,
    /// Object owning each keypoint of each frame; `None` for background.
    pub keypoint_owner: Vec<Vec<Option<usize>>>,
}

impl Scenario {
    pub fn num_frames(&self) -> usize {
        self.features.len()
    }

    pub fn owner_of(&self, frame: usize, id: usize) -> Option<usize> {
        self.detections
            .iter()
            .position(|d| d.frame == frame && d.id == id)
            .and_then(|k| self.detection_owner[k])
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn trajectory(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, dims: [f64; 3]) -> Vec<OrientedBox3D> {
    let mut x = rng.random_range(-cfg.extent..cfg.extent);
    let mut y = rng.random_range(-cfg.extent..cfg.extent);
    let mut yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = uniform(rng, cfg.speed_range);
    let yaw_rate = uniform(rng, cfg.yaw_rate_range);
    let [l, w, h] = dims;
    let mut out = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        out.push(OrientedBox3D::new(x, y, 0.5 * h, l, w, h, yaw));
        x += speed * cfg.frame_dt * yaw.cos();
        y += speed * cfg.frame_dt * yaw.sin();
        yaw += yaw_rate * cfg.frame_dt;
    }
    out
}

fn separated(a: &[OrientedBox3D], b: &[OrientedBox3D]) -> bool {
    a.iter().zip(b).all(|(p, q)| {
        let min_dist = 2.0 * p.l.max(p.w).max(q.l).max(q.w);
        (p.x - q.x).hypot(p.y - q.y) > min_dist
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Generates a scene; a pure function of `cfg` (including its seed).
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = cfg.classes.clone();

    let mut tracks: Vec<GtTrack> = Vec::with_capacity(cfg.num_objects);
    let mut attempts = 0;
    while tracks.len() < cfg.num_objects {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SimError::Crowded(cfg.num_objects));
        }
        let cname = &cfg.object_classes[rng.random_range(0..cfg.object_classes.len())];
        let dims = class_dims(cname).expect("validated");
        let boxes = trajectory(&mut rng, cfg, dims);
        if tracks.iter().all(|t| separated(&t.boxes, &boxes)) {
            tracks.push(GtTrack {
                object_id: tracks.len(),
                class_id: classes.iter().position(|c| c == cname).expect("validated"),
                boxes,
            });
        }
    }

    let signatures: Vec<Vec<f64>> = tracks.iter().map(|_| unit_vector(&mut rng, cfg.feature_dim)).collect();
    let pos_noise = Normal::new(0.0, cfg.position_noise).expect("finite sigma");
    let score_noise = Normal::new(0.0, cfg.score_noise).expect("finite sigma");
    let feat_noise = Normal::new(0.0, cfg.feature_noise).expect("finite sigma");

    let mut detections = Vec::new();
    let mut detection_owner = Vec::new();
    let mut tracklets = Vec::new();
    let mut gt_tracklets = Vec::new();
    let mut features = Vec::with_capacity(cfg.frames);
    let mut keypoint_owner = Vec::with_capacity(cfg.frames);

    for f in 0..cfg.frames {
        // Detections of this frame, ids assigned after shuffling.
        // Dropped detections keep their slot (as `None`) so the id shuffle
        // below draws the same random numbers whatever the dropout.
        let mut frame_dets: Vec<Option<(Detection, Option<usize>)>> = Vec::new();
        for t in &tracks {
            // Every draw happens regardless of dropout so that, for a fixed
            // seed, raising the dropout only removes detections.
            let drop = rng.random::<f64>() < cfg.dropout;
            let gt = t.boxes[f];
            let bbox = gt.translated(
                pos_noise.sample(&mut rng),
                pos_noise.sample(&mut rng),
                pos_noise.sample(&mut rng),
            );
            let p = (cfg.base_score + score_noise.sample(&mut rng)).clamp(cfg.gt_score_floor, 1.0);
            if drop {
                frame_dets.push(None);
                continue;
            }
            let mut scores = vec![0.0; classes.len()];
            scores[t.class_id] = p;
            frame_dets.push(Some((
                Detection {
                    frame: f,
                    id: 0,
                    bbox,
                    scores,
                },
                Some(t.object_id),
            )));
        }
        let clutter = {
            let whole = cfg.clutter_rate.floor() as usize;
            whole + usize::from(rng.random::<f64>() < cfg.clutter_rate.fract())
        };
        for _ in 0..clutter {
            let cname = &cfg.object_classes[rng.random_range(0..cfg.object_classes.len())];
            let [l, w, h] = class_dims(cname).expect("validated");
            let bbox = OrientedBox3D::new(
                rng.random_range(-cfg.extent..cfg.extent),
                rng.random_range(-cfg.extent..cfg.extent),
                0.5 * h,
                l,
                w,
                h,
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let mut scores = vec![0.0; classes.len()];
            let c = classes.iter().position(|k| k == cname).expect("validated");
            scores[c] = uniform(&mut rng, [0.05, cfg.clutter_score_max]);
            frame_dets.push(Some((
                Detection {
                    frame: f,
                    id: 0,
                    bbox,
                    scores,
                },
                None,
            )));
        }
        let mut slots: Vec<usize> = (0..frame_dets.len()).collect();
        slots.shuffle(&mut rng);
        let mut frame_dets: Vec<(usize, Detection, Option<usize>)> = frame_dets
            .into_iter()
            .zip(slots)
            .filter_map(|(d, slot)| d.map(|(d, o)| (slot, d, o)))
            .collect();
        frame_dets.sort_by_key(|(slot, _, _)| *slot);
        let frame_dets: Vec<(Detection, Option<usize>)> = frame_dets
            .into_iter()
            .enumerate()
            .map(|(id, (_, d, o))| (Detection { id, ..d }, o))
            .collect();

        for (d, owner) in &frame_dets {
            if let Some(o) = owner {
                if f + 1 < cfg.frames {
                    let t = &tracks[*o];
                    let delta = encode_delta(&t.boxes[f], &t.boxes[f + 1]).expect("positive dims");
                    tracklets.push(Tracklet {
                        source_frame: f,
                        source_id: d.id,
                        delta,
                    });
                }
            }
        }
        for (d, owner) in frame_dets {
            detections.push(d);
            detection_owner.push(owner);
        }
        if f + 1 < cfg.frames {
            for t in &tracks {
                let delta = encode_delta(&t.boxes[f], &t.boxes[f + 1]).expect("positive dims");
                gt_tracklets.push((t.object_id, f, delta));
            }
        }

        // Keypoints: per object inside its box, then background.
        let mut feats: Vec<f32> = Vec::new();
        let mut locs: Vec<[f32; 3]> = Vec::new();
        let mut owners = Vec::new();
        for t in &tracks {
            let b = t.boxes[f];
            let (s, c) = b.yaw.sin_cos();
            for _ in 0..cfg.keypoints_per_object {
                let u = rng.random_range(-0.5..0.5) * b.l;
                let v = rng.random_range(-0.5..0.5) * b.w;
                let z = rng.random_range(-0.5..0.5) * b.h;
                locs.push([(b.x + c * u - s * v) as f32, (b.y + s * u + c * v) as f32, (b.z + z) as f32]);
                feats.extend(
                    signatures[t.object_id]
                        .iter()
                        .map(|&x| (x + feat_noise.sample(&mut rng)) as f32),
                );
                owners.push(Some(t.object_id));
            }
        }
        for _ in 0..cfg.background_keypoints {
            locs.push([
                rng.random_range(-cfg.extent..cfg.extent) as f32,
                rng.random_range(-cfg.extent..cfg.extent) as f32,
                0.0,
            ]);
            feats.extend(unit_vector(&mut rng, cfg.feature_dim).iter().map(|&x| x as f32));
            owners.push(None);
        }
        if locs.is_empty() {
            // Keep one keypoint so every frame has a valid feature set.
            locs.push([0.0; 3]);
            feats.extend(std::iter::repeat_n(0.0f32, cfg.feature_dim));
            owners.push(None);
        }
        features.push(
            KeypointFeatureSet::new(feats, cfg.feature_dim, locs, f as u64).expect("finite features"),
        );
        keypoint_owner.push(owners);
    }

    Ok(Scenario {
        classes,
        tracks,
        detections,
        detection_owner,
        tracklets,
        gt_tracklets,
        features,
        keypoint_owner,
    })
}

/// How well recovered tubes follow the ground-truth objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentScore {
    /// Detected ground-truth instances (object, frame) in the scene.
    pub instances: usize,
    /// Instances placed in a tube whose majority object is their own.
    pub correct: usize,
    pub frame_accuracy: f64,
    /// Consecutive pairs inside tubes.
    pub links: usize,
    /// Pairs whose two detections belong to the same object.
    pub correct_links: usize,
    pub link_precision: f64,
    /// Tubes correspond one-to-one to the ground-truth tracks, every frame.
    pub exact: bool,
}

/// Scores tubes against the scene's ground truth.
pub fn assignment_score(scene: &Scenario, tubes: &[Tube]) -> AssignmentScore {
    let owner: HashMap<(usize, usize), Option<usize>> = scene
        .detections
        .iter()
        .zip(&scene.detection_owner)
        .map(|(d, o)| ((d.frame, d.id), *o))
        .collect();
    let instances = scene.detection_owner.iter().filter(|o| o.is_some()).count();

    let mut correct = 0;
    let mut links = 0;
    let mut correct_links = 0;
    for t in tubes {
        let owners: Vec<Option<usize>> = t
            .frames
            .iter()
            .zip(&t.detection_ids)
            .map(|(&f, &id)| owner.get(&(f, id)).copied().flatten())
            .collect();
        let mut votes: HashMap<usize, usize> = HashMap::new();
        for o in owners.iter().flatten() {
            *votes.entry(*o).or_default() += 1;
        }
        // Majority object, ties to the lowest id.
        let majority = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(o, _)| *o);
        correct += owners.iter().filter(|o| o.is_some() && **o == majority).count();
        for w in owners.windows(2) {
            links += 1;
            if w[0].is_some() && w[0] == w[1] {
                correct_links += 1;
            }
        }
    }

    let exact = tubes.len() == scene.tracks.len()
        && scene.tracks.iter().all(|gt| {
            let want: Vec<(usize, usize)> = scene
                .detections
                .iter()
                .zip(&scene.detection_owner)
                .filter(|(_, o)| **o == Some(gt.object_id))
                .map(|(d, _)| (d.frame, d.id))
                .collect();
            tubes.iter().any(|t| {
                t.class_id == gt.class_id
                    && t.frames.len() == want.len()
                    && t.frames.iter().zip(&t.detection_ids).map(|(&f, &i)| (f, i)).eq(want.iter().copied())
            })
        });

    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    AssignmentScore {
        instances,
        correct,
        frame_accuracy: ratio(correct, instances),
        links,
        correct_links,
        link_precision: ratio(correct_links, links),
        exact,
    }
}
