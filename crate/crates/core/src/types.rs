//! Shared domain types and coordinate conventions.
//!
//! All association math runs in feature-grid coordinates: the grid domain is
//! Ω = [0, W) × [0, H), one cell per feature-map location. Conversion to
//! image pixels (multiplication by `stride`) happens only when results are
//! serialized.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::kalman::KalmanState;

/// Shape of the dense feature grid plus the image-pixel stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    /// Grid height H (number of rows / y cells).
    pub height: usize,
    /// Grid width W (number of columns / x cells).
    pub width: usize,
    /// Embedding dimension D.
    pub embed_dim: usize,
    /// Image pixels per grid cell.
    pub stride: u32,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, embed_dim: usize, stride: u32) -> Result<Self> {
        if height == 0 || width == 0 || embed_dim == 0 || stride == 0 {
            return Err(Error::invalid(
                "grid geometry",
                format!("all dimensions must be >= 1, got {height}x{width}x{embed_dim} stride {stride}"),
            ));
        }
        Ok(Self {
            height,
            width,
            embed_dim,
            stride,
        })
    }

    /// Whether a (possibly fractional) point lies inside Ω.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for GridGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{} (stride {})",
            self.height, self.width, self.embed_dim, self.stride
        )
    }
}

/// Scale a grid point to image pixels. Serialization-only; internal math
/// never leaves the grid domain.
pub fn grid_to_image(p: (f64, f64), geom: &GridGeometry) -> (f64, f64) {
    let s = geom.stride as f64;
    (p.0 * s, p.1 * s)
}

/// Inverse of [`grid_to_image`].
pub fn image_to_grid(p: (f64, f64), geom: &GridGeometry) -> (f64, f64) {
    let s = geom.stride as f64;
    (p.0 / s, p.1 / s)
}

/// Axis-aligned box in grid cells, stored center + size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid("bbox", "non-finite component"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid("bbox", format!("w={w}, h={h} must be > 0")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Build from top-left corner + size.
    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    /// (x, y) of the top-left corner.
    pub fn top_left(&self) -> (f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Unit-norm ReID embedding. Normalized on construction so cosine similarity
/// reduces to a dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(mut v: Vec<f32>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::invalid("embedding", "empty vector"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("embedding", "non-finite component"));
        }
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("embedding", "zero norm"));
        }
        for x in &mut v {
            *x = ((*x as f64) / norm) as f32;
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Cosine similarity; both vectors are unit-norm so this is a dot product.
    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::EmbeddingDim {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok(dot.clamp(-1.0, 1.0))
    }
}

/// One per-frame observation produced by the detector surrogate.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: u32,
    pub embedding: Embedding,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, class_id: u32, embedding: Embedding) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(
                "detection",
                format!("confidence {confidence} outside [0, 1]"),
            ));
        }
        Ok(Self {
            bbox,
            confidence,
            class_id,
            embedding,
        })
    }
}

/// Lifecycle of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Active,
    Lost,
    Removed,
}

/// One buffered tracking state: where the track was at a matched frame.
#[derive(Debug, Clone)]
pub struct TrackSnapshot {
    pub frame: u64,
    pub bbox: BBox,
    pub embedding: Embedding,
}

/// A persistent identity with motion state, smoothed appearance and the
/// FIFO buffer of recent matched states used by track continuation.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub class_id: u32,
    pub kf: KalmanState,
    /// Smoothed (EMA) appearance embedding.
    pub embedding: Embedding,
    pub status: TrackStatus,
    /// FIFO of recent matched states, newest last.
    pub buffer: VecDeque<TrackSnapshot>,
    pub frames_since_update: u32,
    pub consecutive_reactivations: u32,
    /// Last observed box (grid cells); the track's position at its last
    /// matched frame, independent of any predictions since.
    pub last_box: BBox,
    /// Confidence of the last matched detection.
    pub confidence: f64,
}

impl Track {
    /// Start a track from an unmatched high-confidence detection.
    pub fn from_detection(id: u64, det: &Detection, frame: u64, buffer_len: usize) -> Self {
        let mut buffer = VecDeque::with_capacity(buffer_len.min(64));
        buffer.push_back(TrackSnapshot {
            frame,
            bbox: det.bbox,
            embedding: det.embedding.clone(),
        });
        Self {
            id,
            class_id: det.class_id,
            kf: crate::kalman::init(&det.bbox),
            embedding: det.embedding.clone(),
            status: TrackStatus::Active,
            buffer,
            frames_since_update: 0,
            consecutive_reactivations: 0,
            last_box: det.bbox,
            confidence: det.confidence,
        }
    }

    /// Append a snapshot, evicting the oldest when the FIFO is full.
    pub fn push_snapshot(&mut self, snap: TrackSnapshot, buffer_len: usize) {
        debug_assert!(
            self.buffer.back().map_or(true, |b| b.frame < snap.frame),
            "buffer frames must be strictly increasing"
        );
        if self.buffer.len() == buffer_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back(snap);
    }
}

/// Dense H×W×D ReID feature grid. Per-cell L2 norms are cached on
/// construction so every response map over this frame reuses them.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    geometry: GridGeometry,
    /// Row-major (y, x, d).
    values: Array3<f32>,
    cell_norms: Array2<f64>,
}

impl FeatureMap {
    pub fn new(geometry: GridGeometry, values: Array3<f32>) -> Result<Self> {
        let shape = values.shape();
        if shape != [geometry.height, geometry.width, geometry.embed_dim] {
            return Err(Error::GeometryMismatch {
                expected: format!("{geometry}"),
                got: format!("{}x{}x{}", shape[0], shape[1], shape[2]),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map", "non-finite cell component"));
        }
        let mut cell_norms = Array2::zeros((geometry.height, geometry.width));
        for y in 0..geometry.height {
            for x in 0..geometry.width {
                let cell = values.slice(ndarray::s![y, x, ..]);
                let sq: f64 = cell.iter().map(|&v| v as f64 * v as f64).sum();
                cell_norms[(y, x)] = sq.sqrt();
            }
        }
        Ok(Self {
            geometry,
            values,
            cell_norms,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    /// The D-vector at cell (x, y).
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        self.values
            .slice(ndarray::s![y, x, ..])
            .to_slice()
            .expect("feature map is contiguous")
    }

    pub fn cell_norm(&self, x: usize, y: usize) -> f64 {
        self.cell_norms[(y, x)]
    }
}

/// H×W map of cosine responses in [-1, 1].
#[derive(Debug, Clone)]
pub struct ResponseMap {
    height: usize,
    width: usize,
    /// Row-major (y, x).
    values: Array2<f64>,
}

impl ResponseMap {
    pub(crate) fn from_values(values: Array2<f64>) -> Self {
        let (height, width) = values.dim();
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[(y, x)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// M tracks × N detections cost matrix; rows are tracks everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix", "non-finite entry"));
        }
        Ok(Self { values })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            values: Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c)),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

impl std::ops::Index<(usize, usize)> for CostMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.values[idx]
    }
}
