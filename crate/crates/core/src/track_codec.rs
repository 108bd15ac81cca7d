//! Cross-frame tracking targets and the multi-task training objective.
//!
//! A [`TrackDelta`] describes how a box moves from frame `t` to `t + tau`,
//! normalized by the box dimensions (center) and by a full turn (yaw).

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, OrientedBox3D};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid box: dimensions must be positive and finite, got l={l} w={w} h={h}")]
    InvalidBox { l: f64, w: f64, h: f64 },
    #[error("non-finite tracking delta")]
    NonFiniteDelta,
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("smooth L1 beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("loss weights must be non-negative")]
    NegativeWeight,
    #[error("empty RoI set")]
    EmptyRois,
    #[error("RoI {index}: {reason}")]
    InvalidRoi { index: usize, reason: String },
}

/// Normalized motion of a box between two frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct TrackDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub drz: f64,
}

impl From<[f64; 4]> for TrackDelta {
    fn from(v: [f64; 4]) -> Self {
        TrackDelta {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            drz: v[3],
        }
    }
}

impl From<TrackDelta> for [f64; 4] {
    fn from(d: TrackDelta) -> Self {
        d.to_array()
    }
}

impl TrackDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.drz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn check_box(b: &OrientedBox3D) -> Result<(), CodecError> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(CodecError::InvalidBox {
            l: b.l,
            w: b.w,
            h: b.h,
        })
    }
}

/// Regression target for the motion from `from` to `to`.
///
/// The dimensions of `from` are the normalizers; the yaw change is wrapped to
/// the minimal rotation before dividing by a full turn, so `drz` lies in
/// `(-0.5, 0.5]`.
pub fn encode_delta(from: &OrientedBox3D, to: &OrientedBox3D) -> Result<TrackDelta, CodecError> {
    check_box(from)?;
    Ok(TrackDelta {
        dx: (to.x - from.x) / from.l,
        dy: (to.y - from.y) / from.w,
        dz: (to.z - from.z) / from.h,
        drz: wrap_angle(to.yaw - from.yaw) / TAU,
    })
}

/// Applies `delta` to `from`, predicting the box at the next frame.
pub fn decode_delta(from: &OrientedBox3D, delta: &TrackDelta) -> Result<OrientedBox3D, CodecError> {
    check_box(from)?;
    if !delta.is_finite() {
        return Err(CodecError::NonFiniteDelta);
    }
    Ok(OrientedBox3D::new(
        from.x + delta.dx * from.l,
        from.y + delta.dy * from.w,
        from.z + delta.dz * from.h,
        from.l,
        from.w,
        from.h,
        from.yaw + delta.drz * TAU,
    ))
}

/// Summed smooth L1 over element-wise residuals.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64, CodecError> {
    if pred.len() != target.len() {
        return Err(CodecError::LengthMismatch(pred.len(), target.len()));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(CodecError::InvalidBeta(beta));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < beta {
                0.5 * e * e / beta
            } else {
                e - 0.5 * beta
            }
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub lambda_tra: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 1.0,
            lambda_tra: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

/// One region of interest for the objective.
///
/// `label` 0 is background. Foreground RoIs carry box regression residual
/// vectors; RoIs whose object is present in both frames also carry a
/// predicted and target [`TrackDelta`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Roi {
    pub probs: Vec<f64>,
    pub label: usize,
    pub box_pred: Vec<f64>,
    pub box_target: Vec<f64>,
    pub track: Option<(TrackDelta, TrackDelta)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub tra: f64,
}

impl LossBreakdown {
    /// False when some ground-truth probability was exactly zero.
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

const PROB_SUM_TOL: f64 = 1e-6;

/// Classification + box regression + tracking loss, each term averaged over
/// the RoIs it applies to. Empty foreground or tracked sets give a zero term.
pub fn multitask_loss(rois: &[Roi], cfg: &LossConfig) -> Result<LossBreakdown, CodecError> {
    if rois.is_empty() {
        return Err(CodecError::EmptyRois);
    }
    if cfg.lambda_reg < 0.0 || cfg.lambda_tra < 0.0 {
        return Err(CodecError::NegativeWeight);
    }
    let invalid = |index: usize, reason: &str| CodecError::InvalidRoi {
        index,
        reason: reason.to_string(),
    };

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut tra_sum = 0.0;
    let mut n_fg = 0usize;
    let mut n_tra = 0usize;
    for (i, roi) in rois.iter().enumerate() {
        if roi.label >= roi.probs.len() {
            return Err(invalid(i, "label outside the probability row"));
        }
        if roi.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(i, "probability outside [0, 1]"));
        }
        let total: f64 = roi.probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid(i, "probability row does not sum to 1"));
        }
        cls_sum += -roi.probs[roi.label].ln();

        if roi.label > 0 {
            n_fg += 1;
            reg_sum += smooth_l1(&roi.box_pred, &roi.box_target, cfg.smooth_l1_beta)
                .map_err(|e| invalid(i, &e.to_string()))?;
            if let Some((pred, target)) = &roi.track {
                n_tra += 1;
                tra_sum += smooth_l1(&pred.to_array(), &target.to_array(), cfg.smooth_l1_beta)?;
            }
        } else if roi.track.is_some() {
            return Err(invalid(i, "background RoI cannot carry a tracking target"));
        }
    }

    let cls = cls_sum / rois.len() as f64;
    let reg = if n_fg == 0 { 0.0 } else { reg_sum / n_fg as f64 };
    let tra = if n_tra == 0 { 0.0 } else { tra_sum / n_tra as f64 };
    Ok(LossBreakdown {
        total: cls + cfg.lambda_reg * reg + cfg.lambda_tra * tra,
        cls,
        reg,
        tra,
    })
}
