//! Cost construction, unified fusion, and the two-stage per-frame pipeline.
//!
//! Stage 1 associates high-confidence detections with all live tracks under
//! the unified cost; stage 2 associates the leftovers with low-confidence
//! detections by IoU alone; track continuation then decides whether the
//! remaining unmatched tracks are carried through without a detection.
//! Association is partitioned by class: a track only ever competes for
//! detections of its own class.

use std::collections::BTreeSet;

use crate::amc::{amc_matrix, bidirectional_distances};
use crate::assignment::{solve_assignment, AssignmentResult};
use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::kalman;
use crate::mtc;
use crate::types::{
    grid_to_image, BBox, CostMatrix, Detection, Embedding, FeatureMap, GridGeometry, Track,
    TrackSnapshot, TrackStatus,
};

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1) = a.top_left();
    let (bx1, by1) = b.top_left();
    let ix1 = ax1.max(bx1);
    let iy1 = ay1.max(by1);
    let ix2 = (ax1 + a.w).min(bx1 + b.w);
    let iy2 = (ay1 + a.h).min(by1 + b.h);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU cost (1 - IoU) between Kalman-predicted track boxes and detections.
/// Cross-class pairs are forced to 1 (infeasible).
pub fn iou_cost_matrix(tracks: &[&Track], detections: &[&Detection]) -> CostMatrix {
    let boxes: Vec<BBox> = tracks.iter().map(|t| t.kf.bbox()).collect();
    CostMatrix::from_fn(tracks.len(), detections.len(), |j, i| {
        if tracks[j].class_id != detections[i].class_id {
            1.0
        } else {
            1.0 - iou(&boxes[j], &detections[i].bbox)
        }
    })
}

/// Appearance cost (1 - cosine) / 2 between smoothed track embeddings and
/// detection embeddings. Cross-class pairs are forced to 1.
pub fn appearance_cost_matrix(
    tracks: &[&Track],
    detections: &[&Detection],
) -> Result<CostMatrix> {
    let (m, n) = (tracks.len(), detections.len());
    let mut values = ndarray::Array2::zeros((m, n));
    for (j, t) in tracks.iter().enumerate() {
        for (i, d) in detections.iter().enumerate() {
            values[(j, i)] = if t.class_id != d.class_id {
                1.0
            } else {
                (1.0 - t.embedding.cosine(&d.embedding)?) / 2.0
            };
        }
    }
    CostMatrix::new(values)
}

/// Unified cost: `1 - (1 - C_AMC · C_IOU) · (1 - C_App)`, elementwise.
pub fn fuse_unified(
    c_amc: &CostMatrix,
    c_iou: &CostMatrix,
    c_app: &CostMatrix,
) -> Result<CostMatrix> {
    let shape = (c_amc.rows(), c_amc.cols());
    if (c_iou.rows(), c_iou.cols()) != shape || (c_app.rows(), c_app.cols()) != shape {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{} vs {}x{}",
            c_amc.rows(),
            c_amc.cols(),
            c_iou.rows(),
            c_iou.cols(),
            c_app.rows(),
            c_app.cols()
        )));
    }
    Ok(fuse_parts(
        Some(c_amc),
        Some(c_iou),
        Some(c_app),
        shape.0,
        shape.1,
    ))
}

/// Fusion with optional terms for ablations. Disabled consistency or IoU
/// terms drop out of the product; a disabled appearance term contributes 0.
fn fuse_parts(
    c_amc: Option<&CostMatrix>,
    c_iou: Option<&CostMatrix>,
    c_app: Option<&CostMatrix>,
    rows: usize,
    cols: usize,
) -> CostMatrix {
    CostMatrix::from_fn(rows, cols, |j, i| {
        let motion = match (c_amc, c_iou) {
            (Some(a), Some(o)) => a[(j, i)] * o[(j, i)],
            (Some(a), None) => a[(j, i)],
            (None, Some(o)) => o[(j, i)],
            (None, None) => 0.0,
        };
        let app = c_app.map_or(0.0, |m| m[(j, i)]);
        1.0 - (1.0 - motion) * (1.0 - app)
    })
}

/// Which cues participate in stage 1 and whether continuation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociationVariant {
    pub use_amc: bool,
    pub use_iou: bool,
    pub use_app: bool,
    pub use_mtc: bool,
}

impl Default for AssociationVariant {
    fn default() -> Self {
        Self {
            use_amc: true,
            use_iou: true,
            use_app: true,
            use_mtc: true,
        }
    }
}

/// Named ablation presets used by the experiment sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VariantKind {
    IouOnly,
    AppOnly,
    Amc,
    AmcMtc,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::IouOnly,
        VariantKind::AppOnly,
        VariantKind::Amc,
        VariantKind::AmcMtc,
    ];

    pub fn config(self) -> AssociationVariant {
        match self {
            VariantKind::IouOnly => AssociationVariant {
                use_amc: false,
                use_iou: true,
                use_app: false,
                use_mtc: false,
            },
            VariantKind::AppOnly => AssociationVariant {
                use_amc: false,
                use_iou: false,
                use_app: true,
                use_mtc: false,
            },
            VariantKind::Amc => AssociationVariant {
                use_amc: true,
                use_iou: true,
                use_app: true,
                use_mtc: false,
            },
            VariantKind::AmcMtc => AssociationVariant::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::IouOnly => "iou-only",
            VariantKind::AppOnly => "app-only",
            VariantKind::Amc => "amc",
            VariantKind::AmcMtc => "amc+mtc",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou-only" => Ok(VariantKind::IouOnly),
            "app-only" => Ok(VariantKind::AppOnly),
            "amc" => Ok(VariantKind::Amc),
            "amc+mtc" => Ok(VariantKind::AmcMtc),
            other => Err(Error::invalid(
                "variant",
                format!("`{other}` is not one of iou-only, app-only, amc, amc+mtc"),
            )),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How an output box came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Matched,
    Reactivated,
}

/// One emitted track state, already converted to image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub track_id: u64,
    pub class_id: u32,
    /// Top-left corner, image pixels.
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub provenance: Provenance,
}

/// Everything the tracker emitted for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: u64,
    pub outputs: Vec<TrackOutput>,
}

fn output_from(track: &Track, bbox: &BBox, geom: &GridGeometry, provenance: Provenance) -> TrackOutput {
    let (tx, ty) = grid_to_image(bbox.top_left(), geom);
    let (w, h) = grid_to_image((bbox.w, bbox.h), geom);
    TrackOutput {
        track_id: track.id,
        class_id: track.class_id,
        x: tx,
        y: ty,
        w,
        h,
        confidence: track.confidence,
        provenance,
    }
}

/// The stateful per-sequence tracker.
#[derive(Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    variant: AssociationVariant,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, variant: AssociationVariant) -> Self {
        Self {
            cfg,
            variant,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Associate one class partition, mapping local indices back to the
    /// caller's track/detection index spaces.
    fn associate_partition(
        &self,
        track_idx: &[usize],
        det_idx: &[usize],
        cost: &CostMatrix,
        gate: f64,
        matches: &mut Vec<(usize, usize)>,
        unmatched_tracks: &mut Vec<usize>,
        unmatched_dets: &mut Vec<usize>,
    ) {
        let result: AssignmentResult = solve_assignment(cost, gate);
        for (r, c) in result.matches {
            matches.push((track_idx[r], det_idx[c]));
        }
        for r in result.unmatched_rows {
            unmatched_tracks.push(track_idx[r]);
        }
        for c in result.unmatched_cols {
            unmatched_dets.push(det_idx[c]);
        }
    }

    fn stage1_cost(
        &self,
        tracks: &[&Track],
        dets: &[&Detection],
        fm_t: &FeatureMap,
        fm_prev: &FeatureMap,
    ) -> Result<CostMatrix> {
        let v = self.variant;
        let c_amc = if v.use_amc {
            let (d_f, d_b) = bidirectional_distances(tracks, dets, fm_t, fm_prev)?;
            Some(amc_matrix(&d_f, &d_b, self.cfg.sigma))
        } else {
            None
        };
        let c_iou = v.use_iou.then(|| iou_cost_matrix(tracks, dets));
        let c_app = if v.use_app {
            Some(appearance_cost_matrix(tracks, dets)?)
        } else {
            None
        };
        Ok(fuse_parts(
            c_amc.as_ref(),
            c_iou.as_ref(),
            c_app.as_ref(),
            tracks.len(),
            dets.len(),
        ))
    }

    /// Run one frame of the pipeline. Detections must already be thresholded
    /// at `tau_det`; both feature maps must share a geometry.
    pub fn step(
        &mut self,
        detections: &[Detection],
        fm_t: &FeatureMap,
        fm_prev: &FeatureMap,
        frame: u64,
    ) -> Result<FrameResult> {
        if fm_t.geometry() != fm_prev.geometry() {
            return Err(Error::GeometryMismatch {
                expected: fm_t.geometry().to_string(),
                got: fm_prev.geometry().to_string(),
            });
        }
        let geom = *fm_t.geometry();
        for d in detections {
            if d.embedding.dim() != geom.embed_dim {
                return Err(Error::EmbeddingDim {
                    expected: geom.embed_dim,
                    got: d.embedding.dim(),
                });
            }
        }

        // (1) Kalman predict for every live track.
        for t in &mut self.tracks {
            t.kf = kalman::predict(&t.kf);
        }

        // (2) Confidence split.
        let high: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].confidence >= self.cfg.conf_high)
            .collect();
        let low: Vec<usize> = (0..detections.len())
            .filter(|&i| {
                detections[i].confidence >= self.cfg.conf_low
                    && detections[i].confidence < self.cfg.conf_high
            })
            .collect();

        // (3) Stage 1: all live tracks vs high-confidence detections.
        let mut matches: Vec<(usize, usize)> = Vec::new();
        let mut stage1_unmatched: Vec<usize> = Vec::new();
        let mut unmatched_high: Vec<usize> = Vec::new();
        {
            let live: Vec<usize> = (0..self.tracks.len()).collect();
            let classes: BTreeSet<u32> = live
                .iter()
                .map(|&ti| self.tracks[ti].class_id)
                .chain(high.iter().map(|&di| detections[di].class_id))
                .collect();
            for class in classes {
                let t_idx: Vec<usize> = live
                    .iter()
                    .copied()
                    .filter(|&ti| self.tracks[ti].class_id == class)
                    .collect();
                let d_idx: Vec<usize> = high
                    .iter()
                    .copied()
                    .filter(|&di| detections[di].class_id == class)
                    .collect();
                if t_idx.is_empty() {
                    unmatched_high.extend(&d_idx);
                    continue;
                }
                if d_idx.is_empty() {
                    stage1_unmatched.extend(&t_idx);
                    continue;
                }
                let track_refs: Vec<&Track> = t_idx.iter().map(|&ti| &self.tracks[ti]).collect();
                let det_refs: Vec<&Detection> = d_idx.iter().map(|&di| &detections[di]).collect();
                let cost = self.stage1_cost(&track_refs, &det_refs, fm_t, fm_prev)?;
                self.associate_partition(
                    &t_idx,
                    &d_idx,
                    &cost,
                    self.cfg.gate_stage1,
                    &mut matches,
                    &mut stage1_unmatched,
                    &mut unmatched_high,
                );
            }
        }
        stage1_unmatched.sort_unstable();
        unmatched_high.sort_unstable();

        // (4) Stage 2: leftovers vs low-confidence detections, IoU only.
        let mut stage2_unmatched: Vec<usize> = Vec::new();
        {
            let classes: BTreeSet<u32> = stage1_unmatched
                .iter()
                .map(|&ti| self.tracks[ti].class_id)
                .chain(low.iter().map(|&di| detections[di].class_id))
                .collect();
            let mut unmatched_low: Vec<usize> = Vec::new();
            for class in classes {
                let t_idx: Vec<usize> = stage1_unmatched
                    .iter()
                    .copied()
                    .filter(|&ti| self.tracks[ti].class_id == class)
                    .collect();
                let d_idx: Vec<usize> = low
                    .iter()
                    .copied()
                    .filter(|&di| detections[di].class_id == class)
                    .collect();
                if t_idx.is_empty() {
                    continue;
                }
                if d_idx.is_empty() {
                    stage2_unmatched.extend(&t_idx);
                    continue;
                }
                let track_refs: Vec<&Track> = t_idx.iter().map(|&ti| &self.tracks[ti]).collect();
                let det_refs: Vec<&Detection> = d_idx.iter().map(|&di| &detections[di]).collect();
                let cost = iou_cost_matrix(&track_refs, &det_refs);
                self.associate_partition(
                    &t_idx,
                    &d_idx,
                    &cost,
                    self.cfg.gate_stage2,
                    &mut matches,
                    &mut stage2_unmatched,
                    &mut unmatched_low,
                );
            }
        }
        stage2_unmatched.sort_unstable();

        // (5) Track continuation over the still-unmatched tracks.
        let mut reactivations: Vec<(usize, BBox)> = Vec::new();
        if self.variant.use_mtc {
            let refs: Vec<&Track> = stage2_unmatched.iter().map(|&ti| &self.tracks[ti]).collect();
            for local in mtc::select_candidates(&refs, frame, &self.cfg) {
                let ti = stage2_unmatched[local];
                let cand = mtc::mtc_distance(&self.tracks[ti], fm_t)?;
                if let mtc::ReactivationDecision::Reactivate(bbox) =
                    mtc::decide_reactivation(&cand, detections, &self.cfg)
                {
                    reactivations.push((ti, bbox));
                }
            }
        }

        // (6) Update matched tracks; (9) push buffer snapshots.
        let mut outputs: Vec<TrackOutput> = Vec::new();
        let mut handled = vec![false; self.tracks.len()];
        for &(ti, di) in &matches {
            handled[ti] = true;
            let det = &detections[di];
            let track = &mut self.tracks[ti];
            track.kf = kalman::update(&track.kf, &det.bbox)?;
            track.embedding = ema_embedding(
                &track.embedding,
                &det.embedding,
                self.cfg.embed_momentum,
            )?;
            track.status = TrackStatus::Active;
            track.frames_since_update = 0;
            track.consecutive_reactivations = 0;
            track.last_box = det.bbox;
            track.confidence = det.confidence;
            let snapshot = TrackSnapshot {
                frame,
                bbox: det.bbox,
                embedding: track.embedding.clone(),
            };
            track.push_snapshot(snapshot, self.cfg.buffer_len);
            outputs.push(output_from(track, &det.bbox, &geom, Provenance::Matched));
        }
        for &(ti, bbox) in &reactivations {
            handled[ti] = true;
            let track = &mut self.tracks[ti];
            track.status = TrackStatus::Active;
            track.frames_since_update = 0;
            track.consecutive_reactivations += 1;
            track.last_box = bbox;
            let snapshot = TrackSnapshot {
                frame,
                bbox,
                embedding: track.embedding.clone(),
            };
            track.push_snapshot(snapshot, self.cfg.buffer_len);
            outputs.push(output_from(track, &bbox, &geom, Provenance::Reactivated));
        }
        for (ti, track) in self.tracks.iter_mut().enumerate() {
            if !handled[ti] {
                track.status = TrackStatus::Lost;
                track.frames_since_update += 1;
            }
        }

        // (7) Remove tracks lost for too long.
        let max_lost = self.cfg.max_lost_frames;
        for track in &mut self.tracks {
            if track.frames_since_update > max_lost {
                track.status = TrackStatus::Removed;
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Removed);

        // (8) New tracks from unmatched high-confidence detections.
        for &di in &unmatched_high {
            let det = &detections[di];
            let track = Track::from_detection(self.next_id, det, frame, self.cfg.buffer_len);
            self.next_id += 1;
            outputs.push(output_from(&track, &det.bbox, &geom, Provenance::Matched));
            self.tracks.push(track);
        }

        outputs.sort_by_key(|o| o.track_id);
        Ok(FrameResult { frame, outputs })
    }
}

fn ema_embedding(current: &Embedding, observed: &Embedding, momentum: f64) -> Result<Embedding> {
    let mixed: Vec<f32> = current
        .as_slice()
        .iter()
        .zip(observed.as_slice())
        .map(|(&a, &b)| (momentum * a as f64 + (1.0 - momentum) * b as f64) as f32)
        .collect();
    Embedding::new(mixed)
}

/// Drive a whole sequence. Applies the detection threshold, keeps the
/// previous frame's feature map for the backward response maps, and tags any
/// error with the frame it occurred in.
pub fn run_sequence<I>(
    frames: I,
    cfg: &TrackerConfig,
    variant: AssociationVariant,
) -> Result<Vec<FrameResult>>
where
    I: IntoIterator<Item = Result<(Vec<Detection>, FeatureMap)>>,
{
    cfg.validate()?;
    let mut tracker = Tracker::new(cfg.clone(), variant);
    let mut results = Vec::new();
    let mut prev: Option<FeatureMap> = None;
    for (idx, item) in frames.into_iter().enumerate() {
        let frame = idx as u64;
        let (mut dets, fm) = item.map_err(|e| e.at_frame(frame))?;
        dets.retain(|d| d.confidence > cfg.tau_det);
        let fm_prev = prev.as_ref().unwrap_or(&fm);
        let result = tracker
            .step(&dets, &fm, fm_prev, frame)
            .map_err(|e| e.at_frame(frame))?;
        results.push(result);
        prev = Some(fm);
    }
    Ok(results)
}
