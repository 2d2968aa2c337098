//! Training-free multi-object tracking for UAV-style footage.
//!
//! The engine ingests per-frame detections with ReID embeddings plus the
//! dense ReID feature map they came from, and associates them with tracks in
//! two stages: a unified cost fusing appearance, IoU and appearance-motion
//! consistency over high-confidence detections, then IoU-only matching
//! against low-confidence ones. Tracks that survive both stages unmatched
//! can be reactivated without a detection when Kalman- and appearance-
//! predicted centers agree (motion-aware track continuation).
//!
//! Also included: a CLEAR/IDF1 evaluator, a synthetic scenario generator
//! that stands in for the detector network, and the file formats tying them
//! together.

pub mod amc;
pub mod assignment;
pub mod association;
pub mod config;
pub mod error;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod mtc;
pub mod simgen;
pub mod types;

pub use association::{
    run_sequence, AssociationVariant, FrameResult, Provenance, TrackOutput, Tracker, VariantKind,
};
pub use config::TrackerConfig;
pub use error::{Error, Result};
pub use metrics::{MetricsReport, Trajectory};
pub use types::{
    BBox, CostMatrix, Detection, Embedding, FeatureMap, GridGeometry, ResponseMap, Track,
    TrackStatus,
};
