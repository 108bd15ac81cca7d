//! Tracklet linking for LiDAR 3D detection sequences.
//!
//! The crate turns per-frame oriented 3D detections, plus per-detection
//! motion predictions ("tracklets"), into long-term object tubes, and
//! provides the supporting pieces:
//!
//! * [`geometry`]: oriented boxes and volumetric IoU.
//! * [`track_codec`]: normalized motion targets and the multi-task loss.
//! * [`correlation`]: keypoint feature correlation and feature blobs.
//! * [`linker`]: graph construction, dynamic-programming tube extraction and
//!   the causal-window online linker.
//! * [`evaluation`]: KITTI-style 3D AP with 40 recall positions.
//! * [`dataset_io`]: KITTI tracking labels and JSON-lines interchange files.
//! * [`simulator`]: seeded synthetic scenes with ground truth.

pub mod correlation;
pub mod dataset_io;
pub mod evaluation;
pub mod geometry;
pub mod linker;
pub mod simulator;
pub mod track_codec;

pub use correlation::{argmax_match, assemble_combined, correlate, CorrelationMap, KeypointFeatureSet};
pub use evaluation::{evaluate, EvalConfig, EvalReport};
pub use geometry::{iou_3d, iou_bev, OrientedBox3D};
pub use linker::{link_online, link_sequence, Detection, LinkerConfig, Tracklet, Tube};
pub use track_codec::{decode_delta, encode_delta, TrackDelta};
