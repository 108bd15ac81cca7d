use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tubelink::correlation::{argmax_match, correlate_with, CorrelateOptions};
use tubelink::dataset_io::{
    detections_path, discover_sequences, features_path, label_from_box, label_path, load_features,
    load_sequence, parse_jsonl, save_features, save_results, save_sequence, to_jsonl, tracklets_path,
    tubes_path, write_text, DataError, DetectionRecord, LabelRecord, Parts, SequenceData, TrackletRecord,
    TubeRecord,
};
use tubelink::evaluation::{evaluate, EvalError, EvalFrame, ScoredBox, KNOWN_LABEL_CLASSES};
use tubelink::linker::{link_online, link_sequence, LinkError};
use tubelink::simulator::{generate, SimError};
use tubelink::track_codec::{decode_delta, encode_delta, TrackDelta};
use tubelink::OrientedBox3D;

use crate::config::RunConfig;

/// Exit code 1 for `Usage`, 2 for `Data`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<LinkError> for Failure {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn require_out(out: Option<&Path>, cmd: &str) -> Result<PathBuf, Failure> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Failure::Usage(format!("{cmd} needs --out DIR")))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join("config.resolved.json"), &(text + "\n"))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    write_text(path, &(text + "\n"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    num_objects: usize,
    frames: usize,
    classes: Vec<String>,
    sequences: Vec<usize>,
    detections: usize,
    tracklets: usize,
    keypoints: usize,
}

/// Synthetic data always goes to sequence 0.
const SYNTH_SEQUENCE: usize = 0;

pub fn synth(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let out = require_out(out, "synth")?;
    let scene = generate(&cfg.scenario)?;

    let mut labels: BTreeMap<usize, Vec<LabelRecord>> = BTreeMap::new();
    for track in &scene.tracks {
        let class = &scene.classes[track.class_id];
        for (frame, b) in track.boxes.iter().enumerate() {
            labels
                .entry(frame)
                .or_default()
                .push(label_from_box(frame, track.object_id as i64, class, b));
        }
    }
    let seq = SequenceData {
        id: SYNTH_SEQUENCE,
        labels,
        detections: scene
            .detections
            .iter()
            .map(|d| DetectionRecord::from_detection(d, &scene.classes))
            .collect(),
        tracklets: scene.tracklets.iter().map(TrackletRecord::from).collect(),
    };
    save_sequence(&out, &seq)?;
    // Keep the file set fixed even when a part happens to be empty.
    for (path, empty) in [
        (detections_path(&out, SYNTH_SEQUENCE), seq.detections.is_empty()),
        (tracklets_path(&out, SYNTH_SEQUENCE), seq.tracklets.is_empty()),
    ] {
        if empty {
            write_text(&path, "")?;
        }
    }
    for (frame, set) in scene.features.iter().enumerate() {
        save_features(&features_path(&out, SYNTH_SEQUENCE, frame), set)?;
    }

    let manifest = Manifest {
        seed: cfg.seed,
        num_objects: scene.tracks.len(),
        frames: scene.num_frames(),
        classes: scene.classes.clone(),
        sequences: vec![SYNTH_SEQUENCE],
        detections: scene.detections.len(),
        tracklets: scene.tracklets.len(),
        keypoints: scene.features.iter().map(|f| f.len()).sum(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    echo_config(cfg, &out)?;
    if cfg.info() {
        println!(
            "objects {}  frames {}  detections {}  tracklets {}  keypoints {}",
            manifest.num_objects, manifest.frames, manifest.detections, manifest.tracklets, manifest.keypoints
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MatchLine {
    pub row: usize,
    pub col: Option<usize>,
    pub value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrelationStats {
    pub rows: usize,
    pub cols: usize,
    pub matched: usize,
    /// Shannon entropy (bits) of how the matched rows spread over columns.
    pub match_entropy_bits: f64,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

fn entropy_bits(cols: impl Iterator<Item = usize>) -> f64 {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in cols {
        *hist.entry(c).or_default() += 1;
        total += 1;
    }
    hist.values()
        .map(|&k| {
            let p = k as f64 / total as f64;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn correlate(cfg: &RunConfig, a: &Path, b: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let fa = load_features(a, 0)?;
    let fb = load_features(b, 1)?;
    let opts = CorrelateOptions {
        radius: cfg.radius,
        parallel: true,
        ..CorrelateOptions::default()
    };
    let map = correlate_with(&fa, &fb, &opts).map_err(|e| data(anyhow!("{}, {}: {e}", a.display(), b.display())))?;
    let matches = argmax_match(&map);

    let lines: Vec<MatchLine> = matches
        .iter()
        .enumerate()
        .map(|(row, m)| MatchLine {
            row,
            col: m.map(|m| m.index),
            value: m.map(|m| m.value),
        })
        .collect();
    let finite: Vec<f64> = map.values().iter().copied().filter(|v| v.is_finite()).collect();
    let stats = CorrelationStats {
        rows: map.rows(),
        cols: map.cols(),
        matched: matches.iter().flatten().count(),
        match_entropy_bits: entropy_bits(matches.iter().flatten().map(|m| m.index)),
        max: finite.iter().copied().reduce(f64::max),
        mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
    };

    match out {
        Some(dir) => {
            write_text(&dir.join("matches.jsonl"), &to_jsonl(&lines))?;
            write_json(&dir.join("stats.json"), &stats)?;
            echo_config(cfg, dir)?;
            if cfg.info() {
                println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
            }
        }
        None => {
            print!("{}", to_jsonl(&lines));
            if cfg.info() {
                eprintln!("{}", serde_json::to_string(&stats).expect("stats serialize"));
            }
        }
    }
    Ok(())
}

pub fn link(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let out = require_out(out, "link")?;
    let seqs = discover_sequences(input)?;
    if seqs.is_empty() {
        return Err(data(anyhow!("no sequences under {}", input.display())));
    }
    let parts = Parts {
        detections: true,
        ..Parts::default()
    };
    let results: Vec<Result<(usize, usize), Failure>> = seqs
        .par_iter()
        .map(|&s| {
            let seq = load_sequence(input, s, parts)?;
            let tp = tracklets_path(input, s);
            if !seq.detections.is_empty() && !tp.is_file() {
                return Err(data(DataError::Missing(vec![tp])));
            }
            let (dets, trs) = seq.linker_input(&cfg.classes)?;
            let tubes = if cfg.linker.online_window.is_some() {
                link_online(&dets, &trs, &cfg.linker)
            } else {
                link_sequence(&dets, &trs, &cfg.linker)
            }
            .map_err(|e| match Failure::from(e) {
                Failure::Data(e) => Failure::Data(e.context(format!("sequence {s:04}"))),
                usage => usage,
            })?;
            save_results(&out, s, &tubes, &cfg.classes)?;
            Ok((s, tubes.len()))
        })
        .collect();
    let mut summary = Vec::new();
    for r in results {
        summary.push(r?);
    }
    echo_config(cfg, &out)?;
    if cfg.info() {
        for (s, n) in summary {
            println!("sequence {s:04}: {n} tubes");
        }
    }
    Ok(())
}

/// Labels the evaluator cannot represent (no 3D box).
const SKIPPED_LABEL_CLASS: &str = "DontCare";

fn frames_entry(frames: &mut BTreeMap<(usize, usize), EvalFrame>, seq: usize, frame: usize) -> &mut EvalFrame {
    frames.entry((seq, frame)).or_insert_with(|| EvalFrame {
        sequence: seq,
        frame,
        ..EvalFrame::default()
    })
}

/// Predicted classes must come from the linker or evaluation vocabulary;
/// label files may also use any KITTI label class.
fn check_class(cfg: &RunConfig, class: &str, path: &Path, from_labels: bool) -> Result<(), Failure> {
    if cfg.eval.classes.iter().any(|c| c.name == class)
        || cfg.classes.iter().any(|c| c == class)
        || (from_labels && KNOWN_LABEL_CLASSES.contains(&class))
    {
        Ok(())
    } else {
        Err(data(anyhow!(
            "{}: predicted class {class:?} is not in the class vocabulary",
            path.display()
        )))
    }
}

/// Predictions of one sequence: tubes if present, else detections, else labels
/// (scored 1 unless they carry a score).
fn load_predictions(
    cfg: &RunConfig,
    pred: &Path,
    seq: usize,
    frames: &mut BTreeMap<(usize, usize), EvalFrame>,
) -> Result<(), Failure> {
    let tp = tubes_path(pred, seq);
    let dp = detections_path(pred, seq);
    let lp = label_path(pred, seq);
    if tp.is_file() {
        let text = std::fs::read_to_string(&tp).with_context(|| tp.display().to_string()).map_err(data)?;
        for t in parse_jsonl::<TubeRecord>(&text, &tp)? {
            check_class(cfg, &t.class, &tp, false)?;
            for ((f, b), s) in t.frames.iter().zip(&t.boxes).zip(&t.scores) {
                frames_entry(frames, seq, *f).det.push(ScoredBox {
                    class: t.class.clone(),
                    bbox: OrientedBox3D::from(*b),
                    score: *s,
                });
            }
        }
    } else if dp.is_file() {
        let data_seq = load_sequence(
            pred,
            seq,
            Parts {
                detections: true,
                ..Parts::default()
            },
        )?;
        for d in data_seq.detections {
            check_class(cfg, &d.class, &dp, false)?;
            let score = d.scores.get(&d.class).copied().unwrap_or(0.0);
            frames_entry(frames, seq, d.frame).det.push(ScoredBox {
                class: d.class,
                bbox: OrientedBox3D::from(d.bbox),
                score,
            });
        }
    } else if lp.is_file() {
        let data_seq = load_sequence(
            pred,
            seq,
            Parts {
                labels: true,
                ..Parts::default()
            },
        )?;
        for (f, recs) in data_seq.labels {
            for r in recs.iter().filter(|r| r.class != SKIPPED_LABEL_CLASS) {
                check_class(cfg, &r.class, &lp, true)?;
                // Labels of classes that are not evaluated are not predictions.
                if !cfg.eval.classes.iter().any(|c| c.name == r.class) {
                    continue;
                }
                let gt = r.to_gt()?;
                frames_entry(frames, seq, f).det.push(ScoredBox {
                    class: gt.class,
                    bbox: gt.bbox,
                    score: r.score.unwrap_or(1.0),
                });
            }
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, gt: &Path, pred: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let out = require_out(out, "eval")?;
    let seqs: Vec<usize> = discover_sequences(gt)?
        .into_iter()
        .filter(|&s| label_path(gt, s).is_file())
        .collect();
    if seqs.is_empty() {
        return Err(data(anyhow!("no label files under {}", gt.display())));
    }
    let mut frames: BTreeMap<(usize, usize), EvalFrame> = BTreeMap::new();
    for &s in &seqs {
        let seq = load_sequence(
            gt,
            s,
            Parts {
                labels: true,
                ..Parts::default()
            },
        )?;
        for (f, recs) in &seq.labels {
            let entry = frames_entry(&mut frames, s, *f);
            for r in recs.iter().filter(|r| r.class != SKIPPED_LABEL_CLASS) {
                entry.gt.push(r.to_gt().map_err(|e| data(anyhow!("{}: {e}", label_path(gt, s).display())))?);
            }
        }
        load_predictions(cfg, pred, s, &mut frames)?;
    }
    let frames: Vec<EvalFrame> = frames.into_values().collect();
    let report = evaluate(&frames, &cfg.eval)?;
    let table = report.to_table();
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.txt"), &table)?;
    echo_config(cfg, &out)?;
    print!("{table}");
    Ok(())
}

fn read_input(input: Option<&Path>) -> Result<(String, PathBuf), Failure> {
    match input {
        Some(p) if p != Path::new("-") => {
            let text = std::fs::read_to_string(p).with_context(|| p.display().to_string()).map_err(data)?;
            Ok((text, p.to_path_buf()))
        }
        _ => {
            let mut text = String::new();
            io::stdin().read_to_string(&mut text).context("stdin").map_err(data)?;
            Ok((text, PathBuf::from("<stdin>")))
        }
    }
}

fn emit<T: Serialize>(cfg: &RunConfig, out: Option<&Path>, name: &str, items: &[T]) -> Result<(), Failure> {
    let text = to_jsonl(items);
    match out {
        Some(dir) => {
            write_text(&dir.join(name), &text)?;
            echo_config(cfg, dir)?;
        }
        None => io::stdout().write_all(text.as_bytes()).context("stdout").map_err(data)?,
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeIn {
    pub from: OrientedBox3D,
    pub to: OrientedBox3D,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaLine {
    pub delta: TrackDelta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeIn {
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub delta: TrackDelta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxLine {
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
}

pub fn encode(cfg: &RunConfig, input: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let (text, path) = read_input(input)?;
    let rows: Vec<EncodeIn> = parse_jsonl(&text, &path)?;
    let deltas = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            encode_delta(&r.from, &r.to)
                .map(|delta| DeltaLine { delta })
                .map_err(|e| data(anyhow!("{}: record {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    emit(cfg, out, "deltas.jsonl", &deltas)
}

pub fn decode(cfg: &RunConfig, input: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let (text, path) = read_input(input)?;
    let rows: Vec<DecodeIn> = parse_jsonl(&text, &path)?;
    let boxes = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            decode_delta(&r.bbox, &r.delta)
                .map(|bbox| BoxLine { bbox })
                .map_err(|e| data(anyhow!("{}: record {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    emit(cfg, out, "boxes.jsonl", &boxes)
}
