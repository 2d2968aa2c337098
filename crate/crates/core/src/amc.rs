//! Appearance-motion consistency: dense response maps, appearance-predicted
//! centers, bidirectional spatial distances, and the resulting cost matrix.
//!
//! A response map scores every grid cell of a feature map against one
//! embedding by cosine similarity. Its argmax is an appearance-guided
//! position prediction: tracks are located in the current frame, detections
//! are located in the previous frame, and a pair is consistent only when
//! both directions agree with the observed centers.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{CostMatrix, Detection, Embedding, FeatureMap, ResponseMap, Track};

/// Appearance-predicted centers: tracks in frame t, detections in frame t-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedCenters {
    /// One cell per track, argmax over the current frame's feature map.
    pub q_trk: Vec<(usize, usize)>,
    /// One cell per detection, argmax over the previous frame's feature map.
    pub q_det: Vec<(usize, usize)>,
}

/// Cosine similarity between `e` and every cell of `fm`. Cells with zero
/// norm map to 0; all outputs are clamped to [-1, 1].
pub fn response_map(fm: &FeatureMap, e: &Embedding) -> Result<ResponseMap> {
    let geom = fm.geometry();
    if e.dim() != geom.embed_dim {
        return Err(Error::EmbeddingDim {
            expected: geom.embed_dim,
            got: e.dim(),
        });
    }
    let d = geom.embed_dim;
    let query = e.as_slice();
    let raw = fm
        .values()
        .as_slice()
        .expect("feature map values are contiguous");

    let mut out = Array2::<f64>::zeros((geom.height, geom.width));
    let out_flat = out.as_slice_mut().expect("freshly allocated");
    for (i, cell) in raw.chunks_exact(d).enumerate() {
        let y = i / geom.width;
        let x = i % geom.width;
        let norm = fm.cell_norm(x, y);
        if norm == 0.0 {
            continue;
        }
        let dot = dot_f64(cell, query);
        out_flat[i] = (dot / norm).clamp(-1.0, 1.0);
    }
    Ok(ResponseMap::from_values(out))
}

#[inline]
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Cell of maximum response; ties break to the smallest row-major index
/// (rows are y). A constant map returns (0, 0). Returns (x, y).
pub fn argmax_center(r: &ResponseMap) -> (usize, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_at = (0usize, 0usize);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let v = r.value(x, y);
            if v > best {
                best = v;
                best_at = (x, y);
            }
        }
    }
    best_at
}

/// Locate every track in `fm_t` and every detection in `fm_prev`.
pub fn predicted_centers(
    tracks: &[&Track],
    detections: &[&Detection],
    fm_t: &FeatureMap,
    fm_prev: &FeatureMap,
) -> Result<PredictedCenters> {
    if fm_t.geometry() != fm_prev.geometry() {
        return Err(Error::GeometryMismatch {
            expected: fm_t.geometry().to_string(),
            got: fm_prev.geometry().to_string(),
        });
    }
    let q_trk = tracks
        .iter()
        .map(|t| Ok(argmax_center(&response_map(fm_t, &t.embedding)?)))
        .collect::<Result<Vec<_>>>()?;
    let q_det = detections
        .iter()
        .map(|d| Ok(argmax_center(&response_map(fm_prev, &d.embedding)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictedCenters { q_trk, q_det })
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Forward and backward spatial distance matrices, both with rows = tracks.
///
/// Forward: track j's appearance-predicted center in frame t against
/// detection i's observed center. Backward: detection i's appearance-
/// predicted center in frame t-1 against track j's last observed center.
pub fn bidirectional_distances(
    tracks: &[&Track],
    detections: &[&Detection],
    fm_t: &FeatureMap,
    fm_prev: &FeatureMap,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let centers = predicted_centers(tracks, detections, fm_t, fm_prev)?;
    let (m, n) = (tracks.len(), detections.len());
    let mut d_f = Array2::zeros((m, n));
    let mut d_b = Array2::zeros((m, n));
    for j in 0..m {
        let q_trk = (centers.q_trk[j].0 as f64, centers.q_trk[j].1 as f64);
        let o_trk = tracks[j].last_box.center();
        for i in 0..n {
            let o_det = detections[i].bbox.center();
            let q_det = (centers.q_det[i].0 as f64, centers.q_det[i].1 as f64);
            d_f[(j, i)] = euclid(q_trk, o_det);
            d_b[(j, i)] = euclid(q_det, o_trk);
        }
    }
    Ok((d_f, d_b))
}

/// The appearance-motion consistency cost:
/// `1 - exp(-(D_f + D_b) / (2σ²))`, elementwise, in [0, 1).
pub fn amc_matrix(d_f: &Array2<f64>, d_b: &Array2<f64>, sigma: f64) -> CostMatrix {
    assert_eq!(d_f.dim(), d_b.dim(), "distance matrices must share a shape");
    assert!(sigma > 0.0, "sigma must be > 0");
    let two_sigma_sq = 2.0 * sigma * sigma;
    CostMatrix::from_fn(d_f.nrows(), d_f.ncols(), |j, i| {
        1.0 - (-(d_f[(j, i)] + d_b[(j, i)]) / two_sigma_sq).exp()
    })
}
