//! CLEAR and identity metrics: MOTA, IDF1, MT/ML, id switches, FP, FN.
//!
//! Per-frame correspondences use IoU-gated Hungarian matching at 0.5,
//! preferring continuation of the previous frame's pairs. IDF1 solves one
//! global trajectory-to-trajectory assignment maximizing identity-consistent
//! co-locations.

use std::collections::BTreeMap;

use crate::assignment::solve_assignment;
use crate::association::iou;
use crate::error::{Error, Result};
use crate::types::{BBox, CostMatrix};

const MATCH_IOU: f64 = 0.5;

/// One identity's boxes over time; frames strictly increasing. Used for both
/// ground truth and predictions; boxes are in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub class_id: u32,
    pub boxes: Vec<(u64, BBox)>,
}

impl Trajectory {
    pub fn new(id: u64, class_id: u32, boxes: Vec<(u64, BBox)>) -> Result<Self> {
        if !boxes.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::invalid(
                "trajectory",
                format!("frame indices of id {id} are not strictly increasing"),
            ));
        }
        Ok(Self { id, class_id, boxes })
    }

    pub fn lifespan(&self) -> usize {
        self.boxes.len()
    }
}

/// One identity's box within a single frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameBox {
    pub id: u64,
    pub class_id: u32,
    pub bbox: BBox,
}

/// Per-frame matching outcome.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameCorrespondence {
    /// (gt_id, pred_id) pairs.
    pub matches: Vec<(u64, u64)>,
    /// Unmatched predicted ids.
    pub false_positives: Vec<u64>,
    /// Unmatched ground-truth ids.
    pub false_negatives: Vec<u64>,
}

/// Match one frame: keep every previous-frame correspondence that still
/// holds at IoU >= 0.5, then solve the rest with gated Hungarian matching.
pub fn clear_match(
    gt: &[FrameBox],
    preds: &[FrameBox],
    prev: &BTreeMap<u64, u64>,
) -> FrameCorrespondence {
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut matches = Vec::new();

    for (gi, g) in gt.iter().enumerate() {
        let Some(&pid) = prev.get(&g.id) else {
            continue;
        };
        let Some(pi) = preds
            .iter()
            .position(|p| p.id == pid && p.class_id == g.class_id)
        else {
            continue;
        };
        if !pred_used[pi] && iou(&g.bbox, &preds[pi].bbox) >= MATCH_IOU {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matches.push((g.id, pid));
        }
    }

    let gt_rest: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let pred_rest: Vec<usize> = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    if !gt_rest.is_empty() && !pred_rest.is_empty() {
        let cost = CostMatrix::from_fn(gt_rest.len(), pred_rest.len(), |r, c| {
            let g = &gt[gt_rest[r]];
            let p = &preds[pred_rest[c]];
            if g.class_id != p.class_id {
                1.0
            } else {
                1.0 - iou(&g.bbox, &p.bbox)
            }
        });
        // cost <= 0.5 is exactly IoU >= 0.5
        let solved = solve_assignment(&cost, 1.0 - MATCH_IOU);
        for (r, c) in solved.matches {
            gt_used[gt_rest[r]] = true;
            pred_used[pred_rest[c]] = true;
            matches.push((gt[gt_rest[r]].id, preds[pred_rest[c]].id));
        }
    }

    matches.sort_unstable();
    let false_negatives = (0..gt.len())
        .filter(|&i| !gt_used[i])
        .map(|i| gt[i].id)
        .collect();
    let false_positives = (0..preds.len())
        .filter(|&i| !pred_used[i])
        .map(|i| preds[i].id)
        .collect();
    FrameCorrespondence {
        matches,
        false_positives,
        false_negatives,
    }
}

/// Sequence-level CLEAR event counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClearEvents {
    pub false_positives: u64,
    pub false_negatives: u64,
    pub id_switches: u64,
    pub gt_count: u64,
    pub mostly_tracked: u64,
    pub mostly_lost: u64,
    pub num_gt_tracks: u64,
}

fn by_frame(trajectories: &[Trajectory]) -> BTreeMap<u64, Vec<FrameBox>> {
    let mut map: BTreeMap<u64, Vec<FrameBox>> = BTreeMap::new();
    for t in trajectories {
        for &(frame, bbox) in &t.boxes {
            map.entry(frame).or_default().push(FrameBox {
                id: t.id,
                class_id: t.class_id,
                bbox,
            });
        }
    }
    map
}

/// Run [`clear_match`] over every frame and accumulate FP/FN/IDs/MT/ML.
///
/// An id switch is counted when a ground-truth id's matched predicted id
/// differs from its previously matched predicted id, across gaps included.
pub fn accumulate_clear(gt: &[Trajectory], preds: &[Trajectory]) -> ClearEvents {
    let gt_frames = by_frame(gt);
    let pred_frames = by_frame(preds);
    let all_frames: std::collections::BTreeSet<u64> = gt_frames
        .keys()
        .chain(pred_frames.keys())
        .copied()
        .collect();

    let empty: Vec<FrameBox> = Vec::new();
    let mut prev: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut matched_frames: BTreeMap<u64, u64> = BTreeMap::new();
    let mut events = ClearEvents {
        gt_count: gt.iter().map(|t| t.boxes.len() as u64).sum(),
        num_gt_tracks: gt.len() as u64,
        ..Default::default()
    };

    for frame in all_frames {
        let g = gt_frames.get(&frame).unwrap_or(&empty);
        let p = pred_frames.get(&frame).unwrap_or(&empty);
        let corr = clear_match(g, p, &prev);
        events.false_positives += corr.false_positives.len() as u64;
        events.false_negatives += corr.false_negatives.len() as u64;
        for &(gid, pid) in &corr.matches {
            if let Some(&before) = last_match.get(&gid) {
                if before != pid {
                    events.id_switches += 1;
                }
            }
            last_match.insert(gid, pid);
            *matched_frames.entry(gid).or_insert(0) += 1;
        }
        prev = corr.matches.iter().copied().collect();
    }

    for t in gt {
        let covered = *matched_frames.get(&t.id).unwrap_or(&0) as f64;
        let ratio = covered / t.lifespan() as f64;
        if ratio >= 0.8 {
            events.mostly_tracked += 1;
        }
        if ratio <= 0.2 {
            events.mostly_lost += 1;
        }
    }
    events
}

/// MOTA = 1 - (FN + FP + IDs) / GT. Errors when there is no ground truth.
pub fn compute_mota(events: &ClearEvents) -> Result<f64> {
    if events.gt_count == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let penalty =
        (events.false_negatives + events.false_positives + events.id_switches) as f64;
    Ok(1.0 - penalty / events.gt_count as f64)
}

/// Frames where the two trajectories co-locate at IoU >= 0.5 (same class).
fn overlap_frames(a: &Trajectory, b: &Trajectory) -> u64 {
    if a.class_id != b.class_id {
        return 0;
    }
    let mut count = 0;
    let mut i = 0;
    let mut j = 0;
    while i < a.boxes.len() && j < b.boxes.len() {
        match a.boxes[i].0.cmp(&b.boxes[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                if iou(&a.boxes[i].1, &b.boxes[j].1) >= MATCH_IOU {
                    count += 1;
                }
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// IDF1 under the best single global id-to-id assignment:
/// `2·IDTP / (2·IDTP + IDFP + IDFN)`.
pub fn compute_idf1(gt: &[Trajectory], preds: &[Trajectory]) -> f64 {
    let total_gt: u64 = gt.iter().map(|t| t.boxes.len() as u64).sum();
    let total_pred: u64 = preds.iter().map(|t| t.boxes.len() as u64).sum();
    if total_gt == 0 && total_pred == 0 {
        // No boxes on either side: perfect by convention.
        return 1.0;
    }
    if gt.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let overlaps =
        ndarray::Array2::from_shape_fn((gt.len(), preds.len()), |(g, p)| {
            overlap_frames(&gt[g], &preds[p]) as f64
        });
    // Normalize into a min-cost problem; everything is feasible so the
    // solver returns a maximum-cardinality assignment minimizing K - overlap,
    // i.e. maximizing total overlap.
    let k = 1.0 + total_gt.min(total_pred) as f64;
    let cost = CostMatrix::from_fn(gt.len(), preds.len(), |g, p| {
        (k - overlaps[(g, p)]) / k
    });
    let solved = solve_assignment(&cost, 1.0);
    let idtp: f64 = solved
        .matches
        .iter()
        .map(|&(g, p)| overlaps[(g, p)])
        .sum();
    2.0 * idtp / (total_gt + total_pred) as f64
}

/// Everything the evaluator reports for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub mostly_tracked: u64,
    pub mostly_lost: u64,
    pub id_switches: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub gt_count: u64,
    pub num_gt_tracks: u64,
}

impl MetricsReport {
    pub fn mt_ratio(&self) -> f64 {
        if self.num_gt_tracks == 0 {
            0.0
        } else {
            self.mostly_tracked as f64 / self.num_gt_tracks as f64
        }
    }

    pub fn ml_ratio(&self) -> f64 {
        if self.num_gt_tracks == 0 {
            0.0
        } else {
            self.mostly_lost as f64 / self.num_gt_tracks as f64
        }
    }

    pub fn to_aligned_text(&self) -> String {
        format!(
            "{:<18} {:>10}\n{:<18} {:>10.4}\n{:<18} {:>10.4}\n{:<18} {:>10}\n{:<18} {:>10}\n{:<18} {:>10}\n{:<18} {:>10}\n{:<18} {:>10}\n{:<18} {:>10}\n",
            "metric", "value",
            "MOTA", self.mota,
            "IDF1", self.idf1,
            "MT", self.mostly_tracked,
            "ML", self.mostly_lost,
            "IDs", self.id_switches,
            "FP", self.false_positives,
            "FN", self.false_negatives,
            "GT", self.gt_count,
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "mota={:.6}\nidf1={:.6}\nmt={}\nml={}\nids={}\nfp={}\nfn={}\ngt={}\ngt_tracks={}\n",
            self.mota,
            self.idf1,
            self.mostly_tracked,
            self.mostly_lost,
            self.id_switches,
            self.false_positives,
            self.false_negatives,
            self.gt_count,
            self.num_gt_tracks,
        )
    }
}

/// Full evaluation: CLEAR events plus IDF1.
pub fn evaluate(gt: &[Trajectory], preds: &[Trajectory]) -> Result<MetricsReport> {
    let events = accumulate_clear(gt, preds);
    let mota = compute_mota(&events)?;
    let idf1 = compute_idf1(gt, preds);
    Ok(MetricsReport {
        mota,
        idf1,
        mostly_tracked: events.mostly_tracked,
        mostly_lost: events.mostly_lost,
        id_switches: events.id_switches,
        false_positives: events.false_positives,
        false_negatives: events.false_negatives,
        gt_count: events.gt_count,
        num_gt_tracks: events.num_gt_tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn bx(x: f64, y: f64) -> BBox {
        BBox::from_tlwh(x, y, 10.0, 10.0).unwrap()
    }

    fn traj(id: u64, boxes: Vec<(u64, BBox)>) -> Trajectory {
        Trajectory::new(id, 0, boxes).unwrap()
    }

    #[test]
    fn trajectory_rejects_unsorted_frames() {
        assert!(Trajectory::new(1, 0, vec![(2, bx(0.0, 0.0)), (1, bx(0.0, 0.0))]).is_err());
        assert!(Trajectory::new(1, 0, vec![(1, bx(0.0, 0.0)), (1, bx(0.0, 0.0))]).is_err());
    }

    #[test]
    fn identical_frames_have_no_errors() {
        let g = vec![
            FrameBox { id: 1, class_id: 0, bbox: bx(0.0, 0.0) },
            FrameBox { id: 2, class_id: 0, bbox: bx(50.0, 0.0) },
        ];
        let corr = clear_match(&g, &g, &BTreeMap::new());
        assert_eq!(corr.matches, vec![(1, 1), (2, 2)]);
        assert!(corr.false_positives.is_empty());
        assert!(corr.false_negatives.is_empty());
    }

    #[test]
    fn empty_predictions_are_all_misses() {
        let g = vec![
            FrameBox { id: 1, class_id: 0, bbox: bx(0.0, 0.0) },
            FrameBox { id: 2, class_id: 0, bbox: bx(50.0, 0.0) },
            FrameBox { id: 3, class_id: 0, bbox: bx(100.0, 0.0) },
        ];
        let corr = clear_match(&g, &[], &BTreeMap::new());
        assert_eq!(corr.false_negatives.len(), 3);
    }

    #[test]
    fn best_of_two_overlapping_predictions_wins() {
        let g = vec![FrameBox { id: 1, class_id: 0, bbox: bx(0.0, 0.0) }];
        // IoU 0.9-ish and 0.6-ish candidates.
        let p = vec![
            FrameBox { id: 10, class_id: 0, bbox: bx(0.5, 0.0) },
            FrameBox { id: 11, class_id: 0, bbox: bx(2.5, 0.0) },
        ];
        assert!(iou(&g[0].bbox, &p[0].bbox) > iou(&g[0].bbox, &p[1].bbox));
        assert!(iou(&g[0].bbox, &p[1].bbox) >= 0.5);
        let corr = clear_match(&g, &p, &BTreeMap::new());
        assert_eq!(corr.matches, vec![(1, 10)]);
        assert_eq!(corr.false_positives, vec![11]);
    }

    #[test]
    fn continuity_beats_globally_better_swap() {
        // Two predictions both overlap the GT; the one matched last frame is
        // kept even though the other has higher IoU now.
        let g = vec![FrameBox { id: 1, class_id: 0, bbox: bx(0.0, 0.0) }];
        let p = vec![
            FrameBox { id: 10, class_id: 0, bbox: bx(0.5, 0.0) },
            FrameBox { id: 11, class_id: 0, bbox: bx(2.0, 0.0) },
        ];
        let mut prev = BTreeMap::new();
        prev.insert(1u64, 11u64);
        let corr = clear_match(&g, &p, &prev);
        assert_eq!(corr.matches, vec![(1, 11)]);
    }

    #[test]
    fn mota_missed_frame_fixture() {
        // One object over three frames; the tracker misses the middle one.
        let gt = vec![traj(1, vec![(0, bx(0.0, 0.0)), (1, bx(4.0, 0.0)), (2, bx(8.0, 0.0))])];
        let pred = vec![traj(7, vec![(0, bx(0.0, 0.0)), (2, bx(8.0, 0.0))])];
        let events = accumulate_clear(&gt, &pred);
        assert_eq!(events.false_negatives, 1);
        assert_eq!(events.false_positives, 0);
        assert_eq!(events.id_switches, 0);
        let mota = compute_mota(&events).unwrap();
        assert!((mota - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let gt = vec![
            traj(1, vec![(0, bx(0.0, 0.0)), (1, bx(4.0, 0.0))]),
            traj(2, vec![(0, bx(80.0, 0.0)), (1, bx(84.0, 0.0))]),
        ];
        let report = evaluate(&gt, &gt).unwrap();
        assert_eq!(report.mota, 1.0);
        assert_eq!(report.idf1, 1.0);
        assert_eq!(report.id_switches, 0);
        assert_eq!(report.mostly_tracked, 2);
        assert_eq!(report.mostly_lost, 0);
    }

    #[test]
    fn single_identity_swap_counts_one_switch() {
        let gt = vec![traj(
            1,
            (0..4u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect(),
        )];
        let pred = vec![
            traj(10, (0..2u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(11, (2..4u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
        ];
        let events = accumulate_clear(&gt, &pred);
        assert_eq!(events.id_switches, 1);
        assert_eq!(events.false_negatives, 0);
        assert_eq!(events.false_positives, 0);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let events = accumulate_clear(&[], &[]);
        assert!(matches!(compute_mota(&events), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn idf1_split_trajectory_fixture() {
        // One GT track of 4 frames covered by two predicted ids of 2 frames
        // each: IDTP=2, IDFP=2, IDFN=2 under the best global assignment.
        let gt = vec![traj(
            1,
            (0..4u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect(),
        )];
        let pred = vec![
            traj(10, (0..2u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(11, (2..4u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
        ];
        assert_eq!(compute_idf1(&gt, &pred), 0.5);
    }

    #[test]
    fn idf1_trivial_cases() {
        let gt = vec![traj(1, vec![(0, bx(0.0, 0.0))])];
        assert_eq!(compute_idf1(&gt, &gt.clone()), 1.0);
        // Disjoint predictions never co-locate.
        let far = vec![traj(9, vec![(0, bx(500.0, 500.0))])];
        assert_eq!(compute_idf1(&gt, &far), 0.0);
        assert_eq!(compute_idf1(&[], &[]), 1.0);
        assert_eq!(compute_idf1(&gt, &[]), 0.0);
    }

    /// Exhaustive IDF1 oracle: maximize IDTP over all injective id maps.
    fn idf1_brute_force(gt: &[Trajectory], preds: &[Trajectory]) -> f64 {
        let total_gt: u64 = gt.iter().map(|t| t.boxes.len() as u64).sum();
        let total_pred: u64 = preds.iter().map(|t| t.boxes.len() as u64).sum();
        if total_gt == 0 && total_pred == 0 {
            return 1.0;
        }
        if gt.is_empty() || preds.is_empty() {
            return 0.0;
        }
        fn best(
            g: usize,
            used: &mut Vec<bool>,
            gt: &[Trajectory],
            preds: &[Trajectory],
        ) -> u64 {
            if g == gt.len() {
                return 0;
            }
            // Option: leave gt[g] unmatched.
            let mut best_v = best(g + 1, used, gt, preds);
            for p in 0..preds.len() {
                if !used[p] {
                    used[p] = true;
                    let v = overlap_frames(&gt[g], &preds[p]) + best(g + 1, used, gt, preds);
                    used[p] = false;
                    best_v = best_v.max(v);
                }
            }
            best_v
        }
        let mut used = vec![false; preds.len()];
        let idtp = best(0, &mut used, gt, preds);
        2.0 * idtp as f64 / (total_gt + total_pred) as f64
    }

    fn random_trajectories(rng: &mut ChaCha12Rng, n: usize, id0: u64) -> Vec<Trajectory> {
        (0..n)
            .map(|k| {
                let start = rng.random_range(0..4u64);
                let len = rng.random_range(1..6u64);
                let x0: f64 = rng.random_range(0.0..60.0);
                let y0: f64 = rng.random_range(0.0..60.0);
                traj(
                    id0 + k as u64,
                    (start..start + len)
                        .map(|f| (f, bx(x0 + 2.0 * f as f64, y0)))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn idf1_matches_exhaustive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let n_gt = rng.random_range(1..=5);
            let n_pred = rng.random_range(1..=5);
            let gt = random_trajectories(&mut rng, n_gt, 1);
            let preds = random_trajectories(&mut rng, n_pred, 100);
            let fast = compute_idf1(&gt, &preds);
            let slow = idf1_brute_force(&gt, &preds);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn metrics_invariant_under_pred_id_relabeling() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let gt = random_trajectories(&mut rng, 4, 1);
        let preds = random_trajectories(&mut rng, 4, 50);
        let relabeled: Vec<Trajectory> = preds
            .iter()
            .map(|t| Trajectory::new(t.id * 13 + 7, t.class_id, t.boxes.clone()).unwrap())
            .collect();
        let a = evaluate(&gt, &preds).unwrap();
        let b = evaluate(&gt, &relabeled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injected_false_positives_never_raise_mota() {
        let gt = vec![
            traj(1, (0..5u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(2, (0..5u64).map(|f| (f, bx(4.0 * f as f64, 90.0))).collect()),
        ];
        let clean = evaluate(&gt, &gt).unwrap();
        let mut noisy = gt.clone();
        noisy.push(traj(9, (0..3u64).map(|f| (f, bx(200.0, 200.0))).collect()));
        let dirty = evaluate(&gt, &noisy).unwrap();
        assert!(dirty.mota <= clean.mota);
        assert!(dirty.mota < 1.0);
    }

    #[test]
    fn splitting_a_trajectory_lowers_idf1() {
        let gt = vec![traj(
            1,
            (0..6u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect(),
        )];
        let whole = compute_idf1(&gt, &gt.clone());
        let split = vec![
            traj(10, (0..3u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(11, (3..6u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
        ];
        assert!(compute_idf1(&gt, &split) < whole);
    }

    #[test]
    fn mt_ml_count_coverage_bands() {
        let gt = vec![
            traj(1, (0..10u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(2, (0..10u64).map(|f| (f, bx(4.0 * f as f64, 90.0))).collect()),
        ];
        // Track 1 covered fully, track 2 covered 1 frame of 10.
        let preds = vec![
            traj(10, (0..10u64).map(|f| (f, bx(4.0 * f as f64, 0.0))).collect()),
            traj(11, vec![(0, bx(0.0, 90.0))]),
        ];
        let events = accumulate_clear(&gt, &preds);
        assert_eq!(events.mostly_tracked, 1);
        assert_eq!(events.mostly_lost, 1);
        assert!(events.mostly_tracked + events.mostly_lost <= events.num_gt_tracks);
    }
}
