mod common;

use std::path::PathBuf;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tubelink::evaluation::{
    average_precision, evaluate, match_detections, Difficulty, DifficultyAttrs, EvalConfig, EvalFrame, GtObject, MatchFlag,
    ScoredBox,
};
use tubelink::geometry::iou_3d;
use tubelink::OrientedBox3D;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn arb_scored() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
    prop::collection::vec(((0..12u32).prop_map(|s| s as f64 / 12.0), any::<bool>()), 0..25).prop_flat_map(|v| {
        let tp = v.iter().filter(|x| x.1).count();
        (Just(v), tp.max(1)..tp + 6)
    })
}

proptest! {
    #[test]
    fn ap_matches_definition((scored, num_gt) in arb_scored()) {
        let got = average_precision(&scored, num_gt, 40).unwrap();
        let want = brute_force_ap(&scored, num_gt, 40).unwrap();
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn ap_invariant_under_monotone_map((scored, num_gt) in arb_scored()) {
        let mapped: Vec<(f64, bool)> = scored.iter().map(|&(s, t)| ((s * 4.0).exp() - 3.0, t)).collect();
        prop_assert_eq!(average_precision(&scored, num_gt, 40), average_precision(&mapped, num_gt, 40));
    }

    #[test]
    fn removing_a_false_positive_never_hurts((scored, num_gt) in arb_scored(), pick in any::<prop::sample::Index>()) {
        let fps: Vec<usize> = (0..scored.len()).filter(|&i| !scored[i].1).collect();
        prop_assume!(!fps.is_empty());
        let mut fewer = scored.clone();
        fewer.remove(fps[pick.index(fps.len())]);
        prop_assert!(average_precision(&fewer, num_gt, 40).unwrap() >= average_precision(&scored, num_gt, 40).unwrap() - 1e-12);
    }
}

#[test]
fn ap_simple_cases() {
    assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2, 40), Some(100.0));
    assert_eq!(average_precision(&[(0.9, false)], 2, 40), Some(0.0));
    assert_eq!(average_precision(&[(0.9, true)], 0, 40), None);
    // 5-detection case: recalls 1/3, 1/3, 2/3, 2/3, 1 with precisions 1, 1/2, 2/3, 1/2, 3/5.
    let s = [(0.9, true), (0.8, false), (0.7, true), (0.6, false), (0.5, true)];
    let want = 100.0 * (13.0 * 1.0 + 13.0 * (2.0 / 3.0) + 14.0 * 0.6) / 40.0;
    assert!((average_precision(&s, 3, 40).unwrap() - want).abs() < 1e-9);
}

fn frame_boxes(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<OrientedBox3D> {
    (0..n)
        .map(|_| OrientedBox3D::new(r.random_range(0.0..12.0), r.random_range(0.0..12.0), 0.75, 3.9, 1.6, 1.5, r.random_range(-0.4..0.4)))
        .collect()
}

/// Greedy matching by brute force: every pair IoU first, then score order.
fn oracle_match(gt: &[(OrientedBox3D, bool)], det: &[(OrientedBox3D, f64)], thr: f64) -> (Vec<MatchFlag>, usize) {
    let iou: Vec<Vec<f64>> = det.iter().map(|d| gt.iter().map(|g| iou_3d(&d.0, &g.0)).collect()).collect();
    let mut order: Vec<usize> = (0..det.len()).collect();
    order.sort_by(|&a, &b| det[b].1.partial_cmp(&det[a].1).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut flags = vec![MatchFlag::FalsePositive; det.len()];
    for d in order {
        for (want_ignored, flag) in [(false, MatchFlag::TruePositive), (true, MatchFlag::Ignored)] {
            let mut cands: Vec<usize> = (0..gt.len()).filter(|&g| !taken[g] && gt[g].1 == want_ignored && iou[d][g] >= thr).collect();
            cands.sort_by(|&a, &b| iou[d][b].partial_cmp(&iou[d][a]).unwrap().then(a.cmp(&b)));
            if let Some(&g) = cands.first() {
                taken[g] = true;
                flags[d] = flag;
                break;
            }
        }
    }
    let fns = gt.iter().zip(&taken).filter(|(g, t)| !g.1 && !**t).count();
    (flags, fns)
}

#[test]
fn matching_matches_oracle() {
    let mut r = rng(71);
    for _ in 0..200 {
        let gts = frame_boxes(&mut r, 20);
        let gt: Vec<(OrientedBox3D, bool)> = gts.iter().map(|b| (*b, r.random_bool(0.2))).collect();
        let mut boxes = frame_boxes(&mut r, 20);
        for b in gts.iter().take(10) {
            boxes.push(b.translated(r.random_range(-0.5..0.5), r.random_range(-0.3..0.3), 0.0));
        }
        let det: Vec<(OrientedBox3D, f64)> = boxes.into_iter().map(|b| (b, r.random_range(0..10) as f64 / 10.0)).collect();
        for thr in [0.5, 0.7] {
            let m = match_detections(&gt, &det, thr);
            let (flags, fns) = oracle_match(&gt, &det, thr);
            assert_eq!(m.flags, flags);
            assert_eq!(m.false_negatives, fns);
        }
    }
}

#[test]
fn single_match_rule() {
    let g = OrientedBox3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
    let m = match_detections(&[(g, false)], &[(g.translated(0.1, 0.0, 0.0), 0.6), (g, 0.9)], 0.7);
    assert_eq!(m.flags, vec![MatchFlag::FalsePositive, MatchFlag::TruePositive]);
    assert_eq!(m.false_negatives, 0);
}

// ----------------------------------------------------------------- golden

const CLASSES: [(&str, f64); 3] = [("Car", 0.7), ("Pedestrian", 0.5), ("Cyclist", 0.5)];

fn dims(class: &str) -> [f64; 3] {
    match class {
        "Car" | "Van" => [3.9, 1.6, 1.5],
        "Pedestrian" | "Person_sitting" => [0.8, 0.6, 1.75],
        _ => [1.76, 0.6, 1.73],
    }
}

fn golden_frames() -> Vec<EvalFrame> {
    let mut r = rng(72);
    let labels = ["Car", "Car", "Pedestrian", "Cyclist", "Van", "Person_sitting", "DontCare"];
    let mut frames = Vec::new();
    for seq in 0..3 {
        for f in 0..10 {
            let mut gt = Vec::new();
            let mut det = Vec::new();
            for k in 0..r.random_range(1..6) {
                let class = labels[r.random_range(0..labels.len())];
                let [l, w, h] = dims(class);
                let b = OrientedBox3D::new(k as f64 * 6.0, r.random_range(-2.0..2.0), h / 2.0, l, w, h, r.random_range(-0.5..0.5));
                let attrs = r.random_bool(0.8).then(|| DifficultyAttrs {
                    height_px: r.random_range(20.0..90.0),
                    occlusion: [0, 0, 1, 2, 3][r.random_range(0..5)],
                    truncation: r.random_range(0.0..0.4),
                });
                gt.push(GtObject { class: class.into(), bbox: b, attrs });
                if let Some(&(name, _)) = CLASSES.iter().find(|c| c.0 == class || (class == "Van" && c.0 == "Car")) {
                    for _ in 0..r.random_range(0..3) {
                        det.push(ScoredBox {
                            class: name.into(),
                            bbox: b.translated(r.random_range(-0.08..0.08) * l, r.random_range(-0.12..0.12) * w, 0.0),
                            score: (r.random_range(1..40) as f64) / 40.0,
                        });
                    }
                }
            }
            for _ in 0..r.random_range(0..2) {
                let (name, _) = CLASSES[r.random_range(0..3)];
                let [l, w, h] = dims(name);
                det.push(ScoredBox {
                    class: name.into(),
                    bbox: OrientedBox3D::new(r.random_range(-10.0..40.0), r.random_range(-5.0..5.0), h / 2.0, l, w, h, 0.0),
                    score: (r.random_range(1..40) as f64) / 40.0,
                });
            }
            frames.push(EvalFrame { sequence: seq, frame: f, gt, det });
        }
    }
    frames
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct GoldenCell {
    class: String,
    difficulty: String,
    ap: Option<f64>,
}

/// Oracle view of the difficulty rules.
fn oracle_status(g: &GtObject, class: &str, diff: usize) -> Option<bool> {
    let limits = [(40.0, 0u8, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50)];
    let neighbor = (class == "Car" && g.class == "Van") || (class == "Pedestrian" && g.class == "Person_sitting");
    if g.class == class {
        let counted = match g.attrs {
            None => diff > 0,
            Some(a) => a.height_px >= limits[diff].0 && a.occlusion <= limits[diff].1 && a.truncation <= limits[diff].2,
        };
        Some(!counted)
    } else if neighbor {
        Some(true)
    } else {
        None
    }
}

fn oracle_report(frames: &[EvalFrame]) -> Vec<GoldenCell> {
    let mut out = Vec::new();
    for (class, thr) in CLASSES {
        for (diff, name) in ["Easy", "Medium", "Hard"].iter().enumerate() {
            let mut scored = Vec::new();
            let mut num_gt = 0;
            for f in frames {
                let gt: Vec<(OrientedBox3D, bool)> = f.gt.iter().filter_map(|g| oracle_status(g, class, diff).map(|i| (g.bbox, i))).collect();
                num_gt += gt.iter().filter(|g| !g.1).count();
                let det: Vec<(OrientedBox3D, f64)> = f.det.iter().filter(|d| d.class == class).map(|d| (d.bbox, d.score)).collect();
                let (flags, _) = oracle_match(&gt, &det, thr);
                for (flag, d) in flags.iter().zip(&det) {
                    match flag {
                        MatchFlag::TruePositive => scored.push((d.1, true)),
                        MatchFlag::FalsePositive => scored.push((d.1, false)),
                        MatchFlag::Ignored => {}
                    }
                }
            }
            out.push(GoldenCell {
                class: class.into(),
                difficulty: name.to_string(),
                ap: brute_force_ap(&scored, num_gt, 40),
            });
        }
    }
    out
}

/// Rewrites the committed fixture. Run with `--ignored` after changing the
/// generator above.
#[test]
#[ignore]
fn regenerate_golden_fixture() {
    let frames = golden_frames();
    std::fs::create_dir_all(fixture("")).unwrap();
    std::fs::write(fixture("eval_frames.json"), serde_json::to_string_pretty(&frames).unwrap()).unwrap();
    std::fs::write(fixture("eval_golden.json"), serde_json::to_string_pretty(&oracle_report(&frames)).unwrap()).unwrap();
}

#[test]
fn golden_fixture() {
    let frames: Vec<EvalFrame> = serde_json::from_str(&std::fs::read_to_string(fixture("eval_frames.json")).unwrap()).unwrap();
    let golden: Vec<GoldenCell> = serde_json::from_str(&std::fs::read_to_string(fixture("eval_golden.json")).unwrap()).unwrap();
    assert_eq!(frames.len(), 30);
    let report = evaluate(&frames, &EvalConfig::default()).unwrap();
    assert_eq!(golden.len(), 9);
    for cell in &golden {
        let d = match cell.difficulty.as_str() {
            "Easy" => Difficulty::Easy,
            "Medium" => Difficulty::Moderate,
            _ => Difficulty::Hard,
        };
        let got = report.ap(&cell.class, d);
        match (got, cell.ap) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9, "{} {}: {g} vs {w}", cell.class, cell.difficulty),
            (g, w) => assert_eq!(g, w),
        }
    }
    for d in 0..3 {
        let present: Vec<f64> = report.classes.iter().filter_map(|c| c.ap[d]).collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert!((report.map[d].unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn gt_as_predictions_and_empty_predictions() {
    let frames = golden_frames();
    let mut perfect = frames.clone();
    for f in &mut perfect {
        f.det = f
            .gt
            .iter()
            .filter(|g| CLASSES.iter().any(|c| c.0 == g.class))
            .map(|g| ScoredBox { class: g.class.clone(), bbox: g.bbox, score: 1.0 })
            .collect();
    }
    let report = evaluate(&perfect, &EvalConfig::default()).unwrap();
    for c in &report.classes {
        for ap in c.ap.iter().flatten() {
            assert_eq!(format!("{ap:.2}"), "100.00");
        }
    }
    let mut empty = frames;
    for f in &mut empty {
        f.det.clear();
    }
    let report = evaluate(&empty, &EvalConfig::default()).unwrap();
    for c in &report.classes {
        for ap in c.ap.iter().flatten() {
            assert_eq!(*ap, 0.0);
        }
    }
}

#[test]
fn duplicates_never_raise_ap() {
    let frames = golden_frames();
    let base = evaluate(&frames, &EvalConfig::default()).unwrap();
    let mut doubled = frames;
    for f in &mut doubled {
        let copy = f.det.clone();
        f.det.extend(copy);
    }
    let dup = evaluate(&doubled, &EvalConfig::default()).unwrap();
    for (a, b) in base.classes.iter().zip(&dup.classes) {
        for d in 0..3 {
            if let (Some(x), Some(y)) = (a.ap[d], b.ap[d]) {
                assert!(y <= x + 1e-12);
            }
        }
    }
}

#[test]
fn unknown_classes_rejected() {
    let mut frames = vec![EvalFrame::default()];
    frames[0].det.push(ScoredBox {
        class: "Tractor".into(),
        bbox: OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
        score: 0.5,
    });
    assert!(evaluate(&frames, &EvalConfig::default()).is_err());
    frames[0].det.clear();
    frames[0].gt.push(GtObject {
        class: "Spaceship".into(),
        bbox: OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
        attrs: None,
    });
    assert!(evaluate(&frames, &EvalConfig::default()).is_err());
}

#[test]
fn table_has_class_columns_in_order() {
    let report = evaluate(&golden_frames(), &EvalConfig::default()).unwrap();
    let table = report.to_table();
    let head = table.lines().next().unwrap();
    let pos: Vec<usize> = ["Car", "Pedestrian", "Cyclist", "mAP"].iter().map(|c| head.find(c).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert!(table.lines().nth(1).unwrap().contains("Easy"));
}
