//! Motion-aware track continuation.
//!
//! Tracks that survive both association stages unmatched can be reactivated
//! without a detection when two independent predictions of their current
//! center agree: the Kalman prediction and the argmax of a dense response
//! map over the current frame. Candidacy requires a recent, temporally
//! consecutive run of buffered states.

use crate::amc::{argmax_center, response_map};
use crate::association::iou;
use crate::config::TrackerConfig;
use crate::error::Result;
use crate::types::{BBox, Detection, FeatureMap, Track};

/// An unmatched track eligible for reactivation, with both center
/// predictions and their disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactivationCandidate {
    pub track_id: u64,
    pub class_id: u32,
    /// Kalman-predicted box for the current frame.
    pub box_kf: BBox,
    /// Center of `box_kf`.
    pub c_kf: (f64, f64),
    /// Appearance-guided center: argmax of the response map.
    pub c_reid: (usize, usize),
    /// Euclidean distance between the two predictions, in grid cells.
    pub d_k: f64,
}

/// Whether a candidate comes back for this frame.
#[derive(Debug, Clone, PartialEq)]
pub enum ReactivationDecision {
    Reactivate(BBox),
    StayLost,
}

/// Length of the trailing run of strictly consecutive buffered frames.
fn trailing_consecutive(track: &Track) -> usize {
    let mut run = 0usize;
    let mut expected: Option<u64> = None;
    for snap in track.buffer.iter().rev() {
        match expected {
            None => {
                run = 1;
                expected = snap.frame.checked_sub(1);
            }
            Some(e) if snap.frame == e => {
                run += 1;
                expected = snap.frame.checked_sub(1);
            }
            _ => break,
        }
    }
    run
}

/// Indices of `unmatched_tracks` that qualify as reactivation candidates:
/// the newest buffered state is at most one frame old, the trailing run of
/// consecutive states is long enough, and the reactivation cap is not hit.
pub fn select_candidates(
    unmatched_tracks: &[&Track],
    current_frame: u64,
    cfg: &TrackerConfig,
) -> Vec<usize> {
    unmatched_tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let Some(last) = t.buffer.back() else {
                return false;
            };
            current_frame.saturating_sub(last.frame) <= 1
                && trailing_consecutive(t) >= cfg.mtc_min_consecutive
                && t.consecutive_reactivations < cfg.reactivation_cap
        })
        .map(|(i, _)| i)
        .collect()
}

/// Build the candidate record for one track: project the (already
/// predicted) Kalman state, locate the track's latest embedding in the
/// current feature map, and measure the disagreement.
pub fn mtc_distance(track: &Track, fm_t: &FeatureMap) -> Result<ReactivationCandidate> {
    let box_kf = track.kf.bbox();
    let c_kf = track.kf.center();
    let map = response_map(fm_t, &track.embedding)?;
    let c_reid = argmax_center(&map);
    let d_k = ((c_reid.0 as f64 - c_kf.0).powi(2) + (c_reid.1 as f64 - c_kf.1).powi(2)).sqrt();
    Ok(ReactivationCandidate {
        track_id: track.id,
        class_id: track.class_id,
        box_kf,
        c_kf,
        c_reid,
        d_k,
    })
}

/// Reactivate iff the predictions agree within λ and the Kalman box does
/// not significantly overlap any same-class detection of this frame.
pub fn decide_reactivation(
    cand: &ReactivationCandidate,
    detections: &[Detection],
    cfg: &TrackerConfig,
) -> ReactivationDecision {
    if cand.d_k >= cfg.lambda_mtc {
        return ReactivationDecision::StayLost;
    }
    let max_iou = detections
        .iter()
        .filter(|d| d.class_id == cand.class_id)
        .map(|d| iou(&cand.box_kf, &d.bbox))
        .fold(0.0f64, f64::max);
    if max_iou >= cfg.mtc_overlap_gate {
        return ReactivationDecision::StayLost;
    }
    ReactivationDecision::Reactivate(cand.box_kf)
}
