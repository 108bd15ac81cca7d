//! Linking per-frame detections into long-term tubes.
//!
//! For each class a layered graph is built: detections of frame `t` connect to
//! every detection of frame `t + tau`, weighted by
//! `p_i + p_j + phi`, where `phi` is 1 when the box predicted by the tracklet
//! of detection `i` overlaps detection `j` with volumetric IoU above
//! `delta_iou`. The highest-scoring path is extracted by dynamic programming,
//! its per-frame scores are rescored, the path and boxes overlapping it are
//! removed, and the process repeats until no edge is left.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_3d, OrientedBox3D};
use crate::track_codec::{decode_delta, CodecError, TrackDelta};

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("tracklet references missing detection (frame {frame}, id {id})")]
    DanglingTracklet { frame: usize, id: usize },
    #[error("duplicate detection (frame {frame}, id {id})")]
    DuplicateDetection { frame: usize, id: usize },
    #[error("more than one tracklet for detection (frame {frame}, id {id})")]
    DuplicateTracklet { frame: usize, id: usize },
    #[error("detection (frame {frame}, id {id}) has a score outside [0, 1]")]
    InvalidScore { frame: usize, id: usize },
    #[error("invalid linker configuration: {0}")]
    Config(String),
    #[error("frames must be pushed in increasing order (got {got} after {last})")]
    FrameOrder { got: usize, last: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A scored box in one frame. `scores[c]` is the softmax probability of
/// object class `c`; missing entries count as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub id: usize,
    pub bbox: OrientedBox3D,
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn score(&self, class_id: usize) -> f64 {
        self.scores.get(class_id).copied().unwrap_or(0.0)
    }
}

/// Predicted motion of detection `(source_frame, source_id)` to the next frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub source_frame: usize,
    pub source_id: usize,
    pub delta: TrackDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rescore {
    #[default]
    Max,
    Mean,
}

impl Rescore {
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        if raw.is_empty() {
            return Vec::new();
        }
        let v = match self {
            Rescore::Max => raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Rescore::Mean => raw.iter().sum::<f64>() / raw.len() as f64,
        };
        vec![v; raw.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkerConfig {
    /// IoU a detection must exceed against the tracklet prediction for `phi = 1`.
    pub delta_iou: f64,
    /// Same-frame boxes overlapping an extracted tube above this are removed.
    pub suppress_iou: f64,
    pub tau: usize,
    pub rescore: Rescore,
    pub min_tube_len: usize,
    pub online_window: Option<usize>,
    /// A detection joins the class-`c` graph only if its class-`c` score
    /// exceeds this.
    pub min_class_score: f64,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            delta_iou: 0.5,
            suppress_iou: 0.3,
            tau: 1,
            rescore: Rescore::Max,
            min_tube_len: 1,
            online_window: None,
            min_class_score: 0.0,
        }
    }
}

impl LinkerConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.delta_iou) || !unit(self.suppress_iou) {
            return Err(LinkError::Config("IoU thresholds must lie in [0, 1]".into()));
        }
        if self.tau < 1 {
            return Err(LinkError::Config("tau must be at least 1".into()));
        }
        if self.min_tube_len < 1 {
            return Err(LinkError::Config("min_tube_len must be at least 1".into()));
        }
        if let Some(w) = self.online_window {
            if w < 2 {
                return Err(LinkError::Config("online window must span at least 2 frames".into()));
            }
        }
        if !self.min_class_score.is_finite() {
            return Err(LinkError::Config("min_class_score must be finite".into()));
        }
        Ok(())
    }
}

/// Pairwise gate: 1 when the predicted box overlaps the next detection with
/// IoU strictly above `delta`.
pub fn pairwise_gate(next: &OrientedBox3D, predicted: &OrientedBox3D, delta: f64) -> f64 {
    if iou_3d(next, predicted) > delta {
        1.0
    } else {
        0.0
    }
}

/// Class-specific linking score between a detection, its tracklet and a
/// detection of the following frame.
pub fn link_score(
    det_t: &Detection,
    det_next: &Detection,
    tracklet: Option<&Tracklet>,
    class_id: usize,
    cfg: &LinkerConfig,
) -> Result<f64, LinkError> {
    let phi = match tracklet {
        Some(tr) => {
            let predicted = decode_delta(&det_t.bbox, &tr.delta)?;
            pairwise_gate(&det_next.bbox, &predicted, cfg.delta_iou)
        }
        None => 0.0,
    };
    Ok(det_t.score(class_id) + det_next.score(class_id) + phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub frame: usize,
    pub det_id: usize,
    pub bbox: OrientedBox3D,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub gated: bool,
}

/// Layered DAG of one class. Nodes are ordered by `(frame, det_id)`, edges by
/// `(from, to)`.
#[derive(Debug, Clone)]
pub struct LinkGraph {
    pub class_id: usize,
    pub tau: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
}

impl LinkGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Indices into [`LinkGraph::edges`] of the edges ending at `node`.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }
}

/// Detections and tracklets checked for duplicates and dangling references,
/// ordered by `(frame, id)`.
struct Indexed<'a> {
    frames: BTreeMap<usize, Vec<&'a Detection>>,
    tracklets: HashMap<(usize, usize), &'a Tracklet>,
}

fn index_input<'a>(
    detections: &'a [Detection],
    tracklets: &'a [Tracklet],
) -> Result<Indexed<'a>, LinkError> {
    let mut frames: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for d in detections {
        if !seen.insert((d.frame, d.id)) {
            return Err(LinkError::DuplicateDetection {
                frame: d.frame,
                id: d.id,
            });
        }
        if d.scores.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LinkError::InvalidScore {
                frame: d.frame,
                id: d.id,
            });
        }
        frames.entry(d.frame).or_default().push(d);
    }
    for dets in frames.values_mut() {
        dets.sort_by_key(|d| d.id);
    }
    let mut by_source = HashMap::new();
    for tr in tracklets {
        let key = (tr.source_frame, tr.source_id);
        if !seen.contains(&key) {
            return Err(LinkError::DanglingTracklet {
                frame: key.0,
                id: key.1,
            });
        }
        if by_source.insert(key, tr).is_some() {
            return Err(LinkError::DuplicateTracklet {
                frame: key.0,
                id: key.1,
            });
        }
    }
    Ok(Indexed {
        frames,
        tracklets: by_source,
    })
}

/// Builds the class-`class_id` graph over all frames present in `detections`.
pub fn build_graph(
    detections: &[Detection],
    tracklets: &[Tracklet],
    class_id: usize,
    cfg: &LinkerConfig,
) -> Result<LinkGraph, LinkError> {
    cfg.validate()?;
    let idx = index_input(detections, tracklets)?;
    build_graph_indexed(&idx, class_id, cfg)
}

fn build_graph_indexed(
    idx: &Indexed<'_>,
    class_id: usize,
    cfg: &LinkerConfig,
) -> Result<LinkGraph, LinkError> {
    let mut nodes = Vec::new();
    let mut layer_of: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut sources = Vec::new();
    for (&frame, dets) in &idx.frames {
        let start = nodes.len();
        for d in dets {
            let p = d.score(class_id);
            if p > cfg.min_class_score {
                nodes.push(Node {
                    frame,
                    det_id: d.id,
                    bbox: d.bbox,
                    prob: p,
                });
                sources.push(*d);
            }
        }
        layer_of.insert(frame, (start, nodes.len()));
    }

    let mut edges = Vec::new();
    let mut incoming = vec![Vec::new(); nodes.len()];
    for (&frame, &(s0, e0)) in &layer_of {
        let Some(&(s1, e1)) = layer_of.get(&(frame + cfg.tau)) else {
            continue;
        };
        for u in s0..e0 {
            let src = sources[u];
            let tracklet = idx.tracklets.get(&(src.frame, src.id)).copied();
            let predicted = match tracklet {
                Some(tr) => Some(decode_delta(&src.bbox, &tr.delta)?),
                None => None,
            };
            for v in s1..e1 {
                let phi = predicted
                    .as_ref()
                    .map_or(0.0, |p| pairwise_gate(&nodes[v].bbox, p, cfg.delta_iou));
                incoming[v].push(edges.len());
                edges.push(Edge {
                    from: u,
                    to: v,
                    weight: nodes[u].prob + nodes[v].prob + phi,
                    gated: phi > 0.0,
                });
            }
        }
    }
    Ok(LinkGraph {
        class_id,
        tau: cfg.tau,
        nodes,
        edges,
        incoming,
    })
}

/// A linked sequence of detections of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub class_id: usize,
    pub frames: Vec<usize>,
    pub detection_ids: Vec<usize>,
    pub boxes: Vec<OrientedBox3D>,
    /// Class probability of each detection before rescoring.
    pub raw_scores: Vec<f64>,
    pub scores: Vec<f64>,
    /// Sum of the edge weights along the path (0 for a single detection).
    pub tube_score: f64,
}

impl Tube {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_frame(&self) -> usize {
        self.frames[0]
    }

    pub fn end_frame(&self) -> usize {
        *self.frames.last().unwrap()
    }

    /// Box of this tube in `frame`, if the tube covers it.
    pub fn box_at(&self, frame: usize) -> Option<&OrientedBox3D> {
        self.frames
            .binary_search(&frame)
            .ok()
            .map(|k| &self.boxes[k])
    }
}

/// Canonical output order: class, start frame, first detection id.
pub fn sort_tubes(tubes: &mut [Tube]) {
    tubes.sort_by(|a, b| {
        (a.class_id, a.start_frame(), a.detection_ids[0]).cmp(&(
            b.class_id,
            b.start_frame(),
            b.detection_ids[0],
        ))
    });
}

#[derive(Debug, Clone, Copy)]
struct Best {
    score: f64,
    start_frame: usize,
    pred: Option<usize>,
}

fn path_nodes(best: &[Best], end: usize) -> Vec<usize> {
    let mut path = vec![end];
    let mut cur = end;
    while let Some(p) = best[cur].pred {
        path.push(p);
        cur = p;
    }
    path.reverse();
    path
}

/// Orders two candidate paths: higher score first, then earlier start, then
/// the lexicographically smaller detection-id sequence.
fn better(
    graph: &LinkGraph,
    best: &[Best],
    a: (Best, usize),
    b: (Best, usize),
) -> Ordering {
    match b.0.score.partial_cmp(&a.0.score).unwrap_or(Ordering::Equal) {
        Ordering::Equal => {}
        o => return o,
    }
    match a.0.start_frame.cmp(&b.0.start_frame) {
        Ordering::Equal => {}
        o => return o,
    }
    let ids = |cand: (Best, usize)| -> Vec<usize> {
        let mut p = match cand.0.pred {
            Some(u) => path_nodes(best, u),
            None => Vec::new(),
        };
        p.push(cand.1);
        p.into_iter().map(|n| graph.nodes[n].det_id).collect()
    };
    ids(a).cmp(&ids(b))
}

/// Iterated best-path extraction with rescoring and suppression.
pub fn extract_tubes(graph: &LinkGraph, cfg: &LinkerConfig) -> Vec<Tube> {
    let n = graph.nodes.len();
    let mut alive = vec![true; n];
    let mut tubes = Vec::new();

    loop {
        let mut best: Vec<Best> = graph
            .nodes
            .iter()
            .map(|nd| Best {
                score: 0.0,
                start_frame: nd.frame,
                pred: None,
            })
            .collect();
        let mut top: Option<usize> = None;
        for v in 0..n {
            if !alive[v] {
                continue;
            }
            for &e in &graph.incoming[v] {
                let edge = graph.edges[e];
                if !alive[edge.from] {
                    continue;
                }
                let from = best[edge.from];
                let cand = Best {
                    score: from.score + edge.weight,
                    start_frame: from.start_frame,
                    pred: Some(edge.from),
                };
                let cur = best[v];
                if cur.pred.is_none() || better(graph, &best, (cand, v), (cur, v)) == Ordering::Less {
                    best[v] = cand;
                }
            }
            if best[v].pred.is_some() {
                top = match top {
                    Some(t) if better(graph, &best, (best[t], t), (best[v], v)) != Ordering::Greater => {
                        Some(t)
                    }
                    _ => Some(v),
                };
            }
        }
        let Some(end) = top else { break };

        let path = path_nodes(&best, end);
        tubes.push(make_tube(graph, &path, best[end].score, cfg));
        for &p in &path {
            alive[p] = false;
        }
        let path_frames: HashMap<usize, OrientedBox3D> = path
            .iter()
            .map(|&p| (graph.nodes[p].frame, graph.nodes[p].bbox))
            .collect();
        for (v, nd) in graph.nodes.iter().enumerate() {
            if !alive[v] {
                continue;
            }
            if let Some(b) = path_frames.get(&nd.frame) {
                if iou_3d(&nd.bbox, b) > cfg.suppress_iou {
                    alive[v] = false;
                }
            }
        }
    }

    for (v, _) in alive.iter().enumerate().filter(|(_, a)| **a) {
        tubes.push(make_tube(graph, &[v], 0.0, cfg));
    }
    tubes.retain(|t| t.len() >= cfg.min_tube_len);
    tubes
}

fn make_tube(graph: &LinkGraph, path: &[usize], score: f64, cfg: &LinkerConfig) -> Tube {
    let raw: Vec<f64> = path.iter().map(|&p| graph.nodes[p].prob).collect();
    Tube {
        class_id: graph.class_id,
        frames: path.iter().map(|&p| graph.nodes[p].frame).collect(),
        detection_ids: path.iter().map(|&p| graph.nodes[p].det_id).collect(),
        boxes: path.iter().map(|&p| graph.nodes[p].bbox).collect(),
        scores: cfg.rescore.apply(&raw),
        raw_scores: raw,
        tube_score: score,
    }
}

/// Number of object classes carried by the detections.
pub fn class_count(detections: &[Detection]) -> usize {
    detections.iter().map(|d| d.scores.len()).max().unwrap_or(0)
}

/// Links a whole sequence, independently per class. Tubes come back in
/// canonical order (see [`sort_tubes`]).
pub fn link_sequence(
    detections: &[Detection],
    tracklets: &[Tracklet],
    cfg: &LinkerConfig,
) -> Result<Vec<Tube>, LinkError> {
    cfg.validate()?;
    let idx = index_input(detections, tracklets)?;
    let classes = class_count(detections);
    let per_class: Vec<Result<Vec<Tube>, LinkError>> = (0..classes)
        .into_par_iter()
        .map(|c| build_graph_indexed(&idx, c, cfg).map(|g| extract_tubes(&g, cfg)))
        .collect();
    let mut tubes = Vec::new();
    for r in per_class {
        tubes.extend(r?);
    }
    sort_tubes(&mut tubes);
    Ok(tubes)
}

/// One detection committed to an online track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeUpdate {
    pub track_id: usize,
    pub class_id: usize,
    pub frame: usize,
    pub detection_id: usize,
    pub raw_score: f64,
}

#[derive(Debug, Clone)]
struct OpenTrack {
    class_id: usize,
    frames: Vec<usize>,
    ids: Vec<usize>,
    boxes: Vec<OrientedBox3D>,
    raw: Vec<f64>,
    score: f64,
}

/// Causal linker that only ever looks at the last `window` frames.
///
/// After every pushed frame the batch linker runs on the window. A frame is
/// committed when it is about to leave the window, using the last result that
/// still contained it: each of its detections either continues the track that
/// claimed it in the previous commit or starts a new track, and claims its
/// successor in the window tube it belongs to.
#[derive(Debug)]
pub struct OnlineLinker {
    cfg: LinkerConfig,
    window_cfg: LinkerConfig,
    window: usize,
    frames: BTreeMap<usize, (Vec<Detection>, Vec<Tracklet>)>,
    result: Vec<Tube>,
    tracks: Vec<OpenTrack>,
    claims: HashMap<(usize, usize, usize), usize>,
    last_frame: Option<usize>,
}

impl OnlineLinker {
    pub fn new(cfg: LinkerConfig) -> Result<Self, LinkError> {
        cfg.validate()?;
        let window = cfg
            .online_window
            .ok_or_else(|| LinkError::Config("online linking needs online_window".into()))?;
        let window_cfg = LinkerConfig {
            min_tube_len: 1,
            ..cfg.clone()
        };
        Ok(OnlineLinker {
            cfg,
            window_cfg,
            window,
            frames: BTreeMap::new(),
            result: Vec::new(),
            tracks: Vec::new(),
            claims: HashMap::new(),
            last_frame: None,
        })
    }

    /// Adds frame `frame`; returns the detections committed as a result.
    pub fn push(
        &mut self,
        frame: usize,
        detections: Vec<Detection>,
        tracklets: Vec<Tracklet>,
    ) -> Result<Vec<TubeUpdate>, LinkError> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(LinkError::FrameOrder { got: frame, last });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(LinkError::Config(format!(
                "detection {} of frame {} pushed as frame {frame}",
                d.id, d.frame
            )));
        }
        if let Some(t) = tracklets.iter().find(|t| t.source_frame != frame) {
            return Err(LinkError::DanglingTracklet {
                frame: t.source_frame,
                id: t.source_id,
            });
        }
        // Validate before mutating any state.
        index_input(&detections, &tracklets)?;
        self.last_frame = Some(frame);

        let mut updates = Vec::new();
        let expired: Vec<usize> = self
            .frames
            .range(..(frame + 1).saturating_sub(self.window))
            .map(|(&f, _)| f)
            .collect();
        for f in expired {
            updates.extend(self.commit(f)?);
        }
        self.frames.insert(frame, (detections, tracklets));
        self.relink()?;
        Ok(updates)
    }

    /// Commits the remaining window and returns all tracks as tubes.
    pub fn finish(mut self) -> Result<Vec<Tube>, LinkError> {
        let pending: Vec<usize> = self.frames.keys().copied().collect();
        for f in pending {
            self.commit(f)?;
        }
        let cfg = self.cfg;
        let mut tubes: Vec<Tube> = self
            .tracks
            .into_iter()
            .filter(|t| t.frames.len() >= cfg.min_tube_len)
            .map(|t| Tube {
                class_id: t.class_id,
                scores: cfg.rescore.apply(&t.raw),
                frames: t.frames,
                detection_ids: t.ids,
                boxes: t.boxes,
                raw_scores: t.raw,
                tube_score: t.score,
            })
            .collect();
        sort_tubes(&mut tubes);
        Ok(tubes)
    }

    fn relink(&mut self) -> Result<(), LinkError> {
        let (dets, trs): (Vec<&Detection>, Vec<&Tracklet>) = (
            self.frames.values().flat_map(|(d, _)| d.iter()).collect(),
            self.frames.values().flat_map(|(_, t)| t.iter()).collect(),
        );
        let dets: Vec<Detection> = dets.into_iter().cloned().collect();
        let trs: Vec<Tracklet> = trs.into_iter().copied().collect();
        self.result = link_sequence(&dets, &trs, &self.window_cfg)?;
        Ok(())
    }

    fn commit(&mut self, frame: usize) -> Result<Vec<TubeUpdate>, LinkError> {
        let Some((dets, trs)) = self.frames.remove(&frame) else {
            return Ok(Vec::new());
        };
        let next = frame + self.cfg.tau;
        let mut updates = Vec::new();
        let classes = self
            .result
            .iter()
            .map(|t| t.class_id + 1)
            .chain(dets.iter().map(|d| d.scores.len()))
            .max()
            .unwrap_or(0);
        let mut sorted: Vec<&Detection> = dets.iter().collect();
        sorted.sort_by_key(|d| d.id);

        for c in 0..classes {
            for d in &sorted {
                let claimed = self.claims.remove(&(c, frame, d.id));
                let in_window = self.result.iter().find_map(|t| {
                    if t.class_id != c {
                        return None;
                    }
                    let k = t.frames.binary_search(&frame).ok()?;
                    (t.detection_ids[k] == d.id).then_some((t, k))
                });
                let track = match (claimed, in_window) {
                    (Some(track), _) => track,
                    (None, Some(_)) => {
                        self.tracks.push(OpenTrack {
                            class_id: c,
                            frames: Vec::new(),
                            ids: Vec::new(),
                            boxes: Vec::new(),
                            raw: Vec::new(),
                            score: 0.0,
                        });
                        self.tracks.len() - 1
                    }
                    (None, None) => continue,
                };
                let p = d.score(c);
                let t = &mut self.tracks[track];
                t.frames.push(frame);
                t.ids.push(d.id);
                t.boxes.push(d.bbox);
                t.raw.push(p);
                updates.push(TubeUpdate {
                    track_id: track,
                    class_id: c,
                    frame,
                    detection_id: d.id,
                    raw_score: p,
                });

                let Some((tube, k)) = in_window else { continue };
                if k + 1 < tube.frames.len() && tube.frames[k + 1] == next {
                    let succ_id = tube.detection_ids[k + 1];
                    let succ = self
                        .frames
                        .get(&next)
                        .and_then(|(nd, _)| nd.iter().find(|x| x.id == succ_id))
                        .expect("window tube refers to a frame still in the window");
                    let tracklet = trs.iter().find(|tr| tr.source_id == d.id);
                    let w = link_score(d, succ, tracklet, c, &self.cfg)?;
                    self.tracks[track].score += w;
                    self.claims.insert((c, next, succ_id), track);
                }
            }
        }
        Ok(updates)
    }
}

/// Convenience wrapper running [`OnlineLinker`] over a whole sequence.
pub fn link_online(
    detections: &[Detection],
    tracklets: &[Tracklet],
    cfg: &LinkerConfig,
) -> Result<Vec<Tube>, LinkError> {
    let mut linker = OnlineLinker::new(cfg.clone())?;
    let mut frames: BTreeMap<usize, (Vec<Detection>, Vec<Tracklet>)> = BTreeMap::new();
    for d in detections {
        frames.entry(d.frame).or_default().0.push(d.clone());
    }
    for t in tracklets {
        match frames.get_mut(&t.source_frame) {
            Some(f) => f.1.push(*t),
            None => {
                return Err(LinkError::DanglingTracklet {
                    frame: t.source_frame,
                    id: t.source_id,
                })
            }
        }
    }
    for (f, (d, t)) in frames {
        linker.push(f, d, t)?;
    }
    linker.finish()
}
