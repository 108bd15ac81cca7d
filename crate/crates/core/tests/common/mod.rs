//! Reference implementations shared by the integration tests. Each one is
//! deliberately naive and written without reusing the library's algorithms.

#![allow(dead_code)]

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubelink::geometry::iou_3d;
use tubelink::linker::{Detection, LinkerConfig, Rescore, Tracklet, Tube};
use tubelink::{decode_delta, OrientedBox3D};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

/// Point-in-box via the inverse rotation written out by hand.
pub fn inside(b: &OrientedBox3D, p: [f64; 3]) -> bool {
    let (dx, dy) = (p[0] - b.x, p[1] - b.y);
    let th = -b.yaw;
    let u = dx * th.cos() - dy * th.sin();
    let v = dx * th.sin() + dy * th.cos();
    2.0 * u.abs() <= b.l && 2.0 * v.abs() <= b.w && 2.0 * (p[2] - b.z).abs() <= b.h
}

fn footprint_radius(b: &OrientedBox3D) -> f64 {
    0.5 * (b.l * b.l + b.w * b.w).sqrt()
}

/// Monte-Carlo volumetric IoU, sampling uniformly over a common bounding box.
pub fn mc_iou_3d(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ra, rb) = (footprint_radius(a), footprint_radius(b));
    let x0 = (a.x - ra).min(b.x - rb);
    let x1 = (a.x + ra).max(b.x + rb);
    let y0 = (a.y - ra).min(b.y - rb);
    let y1 = (a.y + ra).max(b.y + rb);
    let z0 = (a.z - a.h / 2.0).min(b.z - b.h / 2.0);
    let z1 = (a.z + a.h / 2.0).max(b.z + b.h / 2.0);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = [
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            rng.random_range(z0..z1),
        ];
        let (ia, ib) = (inside(a, p), inside(b, p));
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Axis-aligned 3D IoU from interval overlaps (yaw must be 0 or pi).
pub fn aligned_iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let ov = |c1: f64, s1: f64, c2: f64, s2: f64| {
        ((c1 + s1 / 2.0).min(c2 + s2 / 2.0) - (c1 - s1 / 2.0).max(c2 - s2 / 2.0)).max(0.0)
    };
    let inter = ov(a.x, a.l, b.x, b.l) * ov(a.y, a.w, b.y, b.w) * ov(a.z, a.h, b.z, b.h);
    inter / (a.l * a.w * a.h + b.l * b.w * b.h - inter)
}

pub fn aligned_iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let ov = |c1: f64, s1: f64, c2: f64, s2: f64| {
        ((c1 + s1 / 2.0).min(c2 + s2 / 2.0) - (c1 - s1 / 2.0).max(c2 - s2 / 2.0)).max(0.0)
    };
    let inter = ov(a.x, a.l, b.x, b.l) * ov(a.y, a.w, b.y, b.w);
    let union = a.l * a.w + b.l * b.w - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> OrientedBox3D {
    OrientedBox3D::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread) * 0.3,
        rng.random_range(0.5..5.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.5),
        rng.random_range(-3.2..3.2),
    )
}

// ------------------------------------------------------------- correlation

pub fn naive_correlation(a: &[f32], b: &[f32], n_a: usize, n_b: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n_a * n_b];
    for i in 0..n_a {
        for j in 0..n_b {
            let mut s = 0.0f64;
            for k in 0..d {
                s += a[i * d + k] as f64 * b[j * d + k] as f64;
            }
            out[i * n_b + j] = s;
        }
    }
    out
}

/// Smallest index of the row maximum, `None` if every entry is -inf.
pub fn scan_argmax(row: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((j, v)),
        }
    }
    best
}

// ------------------------------------------------------------------ linker

/// One node of the brute-force linker: (frame, id, box, probability).
#[derive(Clone, Debug)]
struct BNode {
    frame: usize,
    id: usize,
    bbox: OrientedBox3D,
    p: f64,
}

/// Edge weight recomputed from scratch for a pair of detections.
pub fn naive_weight(
    u: &Detection,
    v: &Detection,
    tracklets: &[Tracklet],
    class: usize,
    delta_iou: f64,
) -> (f64, bool) {
    let pu = u.scores.get(class).copied().unwrap_or(0.0);
    let pv = v.scores.get(class).copied().unwrap_or(0.0);
    let phi = tracklets
        .iter()
        .find(|t| t.source_frame == u.frame && t.source_id == u.id)
        .map(|t| {
            let pred = decode_delta(&u.bbox, &t.delta).unwrap();
            if iou_3d(&v.bbox, &pred) > delta_iou {
                1.0
            } else {
                0.0
            }
        })
        .unwrap_or(0.0);
    (pu + pv + phi, phi == 1.0)
}

/// Exhaustive linker: enumerates every path among surviving nodes at each
/// iteration and picks the best one by (score desc, start asc, ids lex asc).
pub fn brute_force_link(
    dets: &[Detection],
    tracklets: &[Tracklet],
    class: usize,
    cfg: &LinkerConfig,
) -> Vec<Tube> {
    let mut nodes: Vec<(BNode, &Detection)> = dets
        .iter()
        .filter(|d| d.scores.get(class).copied().unwrap_or(0.0) > cfg.min_class_score)
        .map(|d| {
            (
                BNode {
                    frame: d.frame,
                    id: d.id,
                    bbox: d.bbox,
                    p: d.scores[class],
                },
                d,
            )
        })
        .collect();
    nodes.sort_by_key(|(n, _)| (n.frame, n.id));
    let n = nodes.len();
    let mut w = vec![vec![None; n]; n];
    for u in 0..n {
        for v in 0..n {
            if nodes[v].0.frame == nodes[u].0.frame + cfg.tau {
                w[u][v] = Some(naive_weight(nodes[u].1, nodes[v].1, tracklets, class, cfg.delta_iou).0);
            }
        }
    }

    let mut alive = vec![true; n];
    let mut tubes = Vec::new();
    loop {
        // All paths with at least one edge.
        let mut paths: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut stack: Vec<(Vec<usize>, f64)> = (0..n).filter(|&u| alive[u]).map(|u| (vec![u], 0.0)).collect();
        while let Some((p, s)) = stack.pop() {
            let last = *p.last().unwrap();
            for v in 0..n {
                if let (true, Some(wt)) = (alive[v], w[last][v]) {
                    let mut q = p.clone();
                    q.push(v);
                    let sc = s + wt;
                    paths.push((q.clone(), sc));
                    stack.push((q, sc));
                }
            }
        }
        if paths.is_empty() {
            break;
        }
        let key = |p: &Vec<usize>| -> (usize, Vec<usize>) { (nodes[p[0]].0.frame, p.iter().map(|&k| nodes[k].0.id).collect()) };
        let best = paths
            .iter()
            .min_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| key(&a.0).cmp(&key(&b.0)))
            })
            .unwrap()
            .clone();
        tubes.push(make(&nodes.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), &best.0, best.1, class, cfg.rescore));
        for &k in &best.0 {
            alive[k] = false;
        }
        for v in 0..n {
            if !alive[v] {
                continue;
            }
            for &k in &best.0 {
                if nodes[k].0.frame == nodes[v].0.frame && iou_3d(&nodes[v].0.bbox, &nodes[k].0.bbox) > cfg.suppress_iou {
                    alive[v] = false;
                }
            }
        }
    }
    let plain: Vec<BNode> = nodes.iter().map(|x| x.0.clone()).collect();
    for (v, _) in alive.iter().enumerate().filter(|(_, a)| **a) {
        tubes.push(make(&plain, &[v], 0.0, class, cfg.rescore));
    }
    tubes.retain(|t| t.frames.len() >= cfg.min_tube_len);
    tubes
}

fn make(nodes: &[BNode], path: &[usize], score: f64, class: usize, rescore: Rescore) -> Tube {
    let raw: Vec<f64> = path.iter().map(|&k| nodes[k].p).collect();
    let agg = match rescore {
        Rescore::Max => raw.iter().cloned().fold(f64::MIN, f64::max),
        Rescore::Mean => raw.iter().sum::<f64>() / raw.len() as f64,
    };
    Tube {
        class_id: class,
        frames: path.iter().map(|&k| nodes[k].frame).collect(),
        detection_ids: path.iter().map(|&k| nodes[k].id).collect(),
        boxes: path.iter().map(|&k| nodes[k].bbox).collect(),
        scores: vec![agg; raw.len()],
        raw_scores: raw,
        tube_score: score,
    }
}

pub fn canonical(mut tubes: Vec<Tube>) -> Vec<Tube> {
    tubes.sort_by(|a, b| {
        (a.class_id, a.frames[0], a.detection_ids[0]).cmp(&(b.class_id, b.frames[0], b.detection_ids[0]))
    });
    tubes
}

/// Random small linking instance. Probabilities are multiples of 1/8 so every
/// path score is exact and ties are frequent.
pub fn linker_instance(rng: &mut ChaCha8Rng, max_frames: usize, max_dets: usize, classes: usize) -> (Vec<Detection>, Vec<Tracklet>) {
    let frames = rng.random_range(1..=max_frames);
    let mut dets = Vec::new();
    let mut trs = Vec::new();
    for f in 0..frames {
        let k = rng.random_range(0..=max_dets);
        let mut ids: Vec<usize> = (0..k).map(|i| i * 2 + rng.random_range(0..2)).collect();
        ids.dedup();
        for id in ids {
            let bbox = OrientedBox3D::new(
                rng.random_range(0.0..8.0) + f as f64 * 0.5,
                rng.random_range(-1.5..1.5),
                0.0,
                4.0,
                1.8,
                1.5,
                rng.random_range(-0.3..0.3),
            );
            let scores = (0..classes).map(|_| rng.random_range(0..=8) as f64 / 8.0).collect();
            if rng.random_bool(0.7) {
                trs.push(Tracklet {
                    source_frame: f,
                    source_id: id,
                    delta: tubelink::TrackDelta {
                        dx: rng.random_range(-0.2..0.4),
                        dy: rng.random_range(-0.2..0.2),
                        dz: 0.0,
                        drz: rng.random_range(-0.02..0.02),
                    },
                });
            }
            dets.push(Detection { frame: f, id, bbox, scores });
        }
    }
    (dets, trs)
}

// -------------------------------------------------------------- evaluation

/// AP straight from the definition: for each recall level, the best
/// precision over all score thresholds whose recall reaches it.
pub fn brute_force_ap(scored: &[(f64, bool)], num_gt: usize, positions: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = Vec::new();
    for t in thresholds {
        let tp = scored.iter().filter(|s| s.0 >= t && s.1).count();
        let all = scored.iter().filter(|s| s.0 >= t).count();
        curve.push((tp as f64 / num_gt as f64, tp as f64 / all as f64));
    }
    let mut total = 0.0;
    for r in 1..=positions {
        let level = r as f64 / positions as f64;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(100.0 * total / positions as f64)
}
