//! Keypoint-wise feature correlation between two frames.
//!
//! Every keypoint descriptor of frame `t` is compared with every descriptor of
//! frame `t + tau` by a raw inner product. The kernel accumulates each dot
//! product in index order in `f64`, so the blocked and parallel paths give
//! bit-identical maps to a naive triple loop.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("keypoint set contains non-finite values")]
    NonFinite,
    #[error("radius must be a non-negative number, got {0}")]
    InvalidRadius(f64),
    #[error("feature blob format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `n` keypoints with `d`-dimensional descriptors and 3D locations.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFeatureSet {
    n: usize,
    d: usize,
    features: Vec<f32>,
    locations: Vec<[f32; 3]>,
    pub frame: u64,
}

impl KeypointFeatureSet {
    /// `features` is row-major `n x d`.
    pub fn new(
        features: Vec<f32>,
        d: usize,
        locations: Vec<[f32; 3]>,
        frame: u64,
    ) -> Result<Self, CorrelationError> {
        let n = locations.len();
        if n == 0 || d == 0 {
            return Err(CorrelationError::Shape("need n >= 1 and d >= 1".into()));
        }
        if features.len() != n * d {
            return Err(CorrelationError::Shape(format!(
                "{} feature values for {n} keypoints of dimension {d}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite())
            || locations.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(CorrelationError::NonFinite);
        }
        Ok(KeypointFeatureSet {
            n,
            d,
            features,
            locations,
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn locations(&self) -> &[[f32; 3]] {
        &self.locations
    }

    /// Copy with every descriptor multiplied by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        KeypointFeatureSet {
            features: self.features.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Dense `rows x cols` map of inner products; gated pairs hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CorrelationMap {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, CorrelationError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(CorrelationError::Shape(format!(
                "{} values for a {rows}x{cols} map",
                values.len()
            )));
        }
        Ok(CorrelationMap { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorrelateOptions {
    /// Pairs farther apart than this (meters) are gated to `-inf`.
    pub radius: Option<f64>,
    /// Normalize descriptors to unit length first. Off by default.
    pub cosine: bool,
    /// Split output row tiles across the rayon pool.
    pub parallel: bool,
}

const ROW_TILE: usize = 4;
const COL_TILE: usize = 256;

/// Raw inner-product correlation, serial.
pub fn correlate(
    a: &KeypointFeatureSet,
    b: &KeypointFeatureSet,
    radius: Option<f64>,
) -> Result<CorrelationMap, CorrelationError> {
    correlate_with(
        a,
        b,
        &CorrelateOptions {
            radius,
            ..CorrelateOptions::default()
        },
    )
}

pub fn correlate_with(
    a: &KeypointFeatureSet,
    b: &KeypointFeatureSet,
    opts: &CorrelateOptions,
) -> Result<CorrelationMap, CorrelationError> {
    if a.d != b.d {
        return Err(CorrelationError::DimensionMismatch(a.d, b.d));
    }
    if let Some(r) = opts.radius {
        if r.is_nan() || r < 0.0 {
            return Err(CorrelationError::InvalidRadius(r));
        }
    }
    let d = a.d;
    let (na, nb) = (a.n, b.n);

    let mut lhs: Vec<f64> = a.features.iter().map(|&v| v as f64).collect();
    let mut rhs: Vec<f64> = b.features.iter().map(|&v| v as f64).collect();
    if opts.cosine {
        normalize_rows(&mut lhs, d);
        normalize_rows(&mut rhs, d);
    }
    // k-major copy of the right-hand side so the inner loop runs over
    // contiguous output columns.
    let mut rhs_t = vec![0.0f64; d * nb];
    for j in 0..nb {
        for k in 0..d {
            rhs_t[k * nb + j] = rhs[j * d + k];
        }
    }

    let mut values = vec![0.0f64; na * nb];
    let tile = |(t, out): (usize, &mut [f64])| {
        let r0 = t * ROW_TILE;
        compute_row_tile(&lhs[r0 * d..], &rhs_t, d, nb, out);
    };
    if opts.parallel {
        values
            .par_chunks_mut(ROW_TILE * nb)
            .enumerate()
            .for_each(tile);
    } else {
        values.chunks_mut(ROW_TILE * nb).enumerate().for_each(tile);
    }

    if let Some(r) = opts.radius {
        if r.is_finite() {
            let r2 = r * r;
            for i in 0..na {
                let p = a.locations[i];
                for j in 0..nb {
                    if dist2(p, b.locations[j]) > r2 {
                        values[i * nb + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Ok(CorrelationMap {
        rows: na,
        cols: nb,
        values,
    })
}

fn normalize_rows(m: &mut [f64], d: usize) {
    for row in m.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn dist2(p: [f32; 3], q: [f32; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let e = p[k] as f64 - q[k] as f64;
            e * e
        })
        .sum()
}

/// Fills `out` (up to ROW_TILE rows of width `nb`) with dot products of the
/// leading rows of `lhs` against every column of `rhs_t`.
fn compute_row_tile(lhs: &[f64], rhs_t: &[f64], d: usize, nb: usize, out: &mut [f64]) {
    let rows = out.len() / nb;
    let mut j0 = 0;
    while j0 < nb {
        let w = COL_TILE.min(nb - j0);
        let mut acc = [[0.0f64; COL_TILE]; ROW_TILE];
        for k in 0..d {
            let col = &rhs_t[k * nb + j0..k * nb + j0 + w];
            for (r, acc_row) in acc.iter_mut().enumerate().take(rows) {
                let av = lhs[r * d + k];
                for (slot, &bv) in acc_row[..w].iter_mut().zip(col) {
                    *slot += av * bv;
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate().take(rows) {
            out[r * nb + j0..r * nb + j0 + w].copy_from_slice(&acc_row[..w]);
        }
        j0 += w;
    }
}

/// Best column of one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index: usize,
    pub value: f64,
}

/// Per row, the smallest column index attaining the row maximum. Rows that
/// are entirely gated have no match.
pub fn argmax_match(map: &CorrelationMap) -> Vec<Option<Match>> {
    (0..map.rows)
        .map(|i| {
            let mut best: Option<Match> = None;
            for (j, &v) in map.row(i).iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                if best.is_none_or(|m| v > m.value) {
                    best = Some(Match { index: j, value: v });
                }
            }
            best
        })
        .collect()
}

/// Row-wise concatenation of the correlation row, both descriptors and both
/// keypoint locations.
///
/// Row `i` is laid out as
/// `[corr(i, 0..nb) | a.feature(i) | b.feature(i) | a.location(i) | b.location(i)]`,
/// giving width `nb + 2d + 6`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedFeatures {
    rows: usize,
    width: usize,
    corr_width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl CombinedFeatures {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn corr_part(&self, i: usize) -> &[f64] {
        &self.row(i)[..self.corr_width]
    }

    pub fn features_a(&self, i: usize) -> &[f64] {
        let o = self.corr_width;
        &self.row(i)[o..o + self.dim]
    }

    pub fn features_b(&self, i: usize) -> &[f64] {
        let o = self.corr_width + self.dim;
        &self.row(i)[o..o + self.dim]
    }

    pub fn location_a(&self, i: usize) -> &[f64] {
        let o = self.corr_width + 2 * self.dim;
        &self.row(i)[o..o + 3]
    }

    pub fn location_b(&self, i: usize) -> &[f64] {
        let o = self.corr_width + 2 * self.dim + 3;
        &self.row(i)[o..o + 3]
    }
}

pub fn combined_width(nb: usize, d: usize) -> usize {
    nb + 2 * d + 6
}

pub fn assemble_combined(
    corr: &CorrelationMap,
    a: &KeypointFeatureSet,
    b: &KeypointFeatureSet,
) -> Result<CombinedFeatures, CorrelationError> {
    if a.d != b.d {
        return Err(CorrelationError::DimensionMismatch(a.d, b.d));
    }
    if corr.rows != a.n || corr.cols != b.n {
        return Err(CorrelationError::Shape(format!(
            "map is {}x{} but keypoint sets have {} and {} points",
            corr.rows, corr.cols, a.n, b.n
        )));
    }
    if a.n != b.n {
        return Err(CorrelationError::Shape(format!(
            "row-wise concatenation needs equal keypoint counts, got {} and {}",
            a.n, b.n
        )));
    }
    let d = a.d;
    let width = combined_width(b.n, d);
    let mut values = Vec::with_capacity(a.n * width);
    for i in 0..a.n {
        values.extend_from_slice(corr.row(i));
        values.extend(a.feature(i).iter().map(|&v| v as f64));
        values.extend(b.feature(i).iter().map(|&v| v as f64));
        values.extend(a.locations[i].iter().map(|&v| v as f64));
        values.extend(b.locations[i].iter().map(|&v| v as f64));
    }
    Ok(CombinedFeatures {
        rows: a.n,
        width,
        corr_width: b.n,
        dim: d,
        values,
    })
}

pub const BLOB_MAGIC: &[u8; 4] = b"KPFB";
pub const BLOB_VERSION: u32 = 1;
const BLOB_HEADER_LEN: usize = 16;

/// Writes the little-endian feature blob: magic, version, n, d, the `n x d`
/// features row-major, then the `n x 3` locations.
pub fn write_blob<W: Write>(set: &KeypointFeatureSet, mut w: W) -> Result<(), CorrelationError> {
    let mut buf = Vec::with_capacity(BLOB_HEADER_LEN + 4 * (set.features.len() + 3 * set.n));
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.n as u32).to_le_bytes());
    buf.extend_from_slice(&(set.d as u32).to_le_bytes());
    for v in &set.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in set.locations.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_blob<R: Read>(mut r: R, frame: u64) -> Result<KeypointFeatureSet, CorrelationError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_blob(&buf, frame)
}

pub fn decode_blob(buf: &[u8], frame: u64) -> Result<KeypointFeatureSet, CorrelationError> {
    let fmt = |m: String| CorrelationError::Format(m);
    if buf.len() < BLOB_HEADER_LEN {
        return Err(fmt(format!("{} bytes is shorter than the header", buf.len())));
    }
    if &buf[..4] != BLOB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != BLOB_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n = word(8) as usize;
    let d = word(12) as usize;
    let expect = n
        .checked_mul(d + 3)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(BLOB_HEADER_LEN))
        .ok_or_else(|| fmt("header sizes overflow".into()))?;
    if buf.len() != expect {
        return Err(fmt(format!(
            "expected {expect} bytes for n={n} d={d}, found {}",
            buf.len()
        )));
    }
    let floats: Vec<f32> = buf[BLOB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (feat, loc) = floats.split_at(n * d);
    let locations = loc.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    KeypointFeatureSet::new(feat.to_vec(), d, locations, frame)
}
