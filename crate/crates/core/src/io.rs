//! File formats: MOTChallenge text files, the embedding sidecar, per-frame
//! feature-map files, manifests, and the on-disk scenario bundle layout.
//!
//! Bundle layout under a directory:
//!   manifest.txt      key=value echo of the generating spec + format info
//!   gt.txt            frame,id,x,y,w,h,conf,class,visibility (1-based, px)
//!   det.txt           frame,-1,x,y,w,h,conf,class,-1,-1
//!   emb.bin           "AMOTEMB1", u32 count, u32 dim, count*dim f32 (LE)
//!   fm/fm_NNNNNN.bin  "AMOTFMP1", u32 H, W, D, then H*W*D f32 (LE), (y,x,d)
//!
//! All text output uses fixed two-decimal formatting so identical runs are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::association::FrameResult;
use crate::error::{Error, Result};
use crate::metrics::Trajectory;
use crate::simgen::{ScenarioBundle, ScenarioSpec, StreamFrame};
use crate::types::{BBox, Detection, Embedding, FeatureMap, GridGeometry};

pub const EMBED_MAGIC: &[u8; 8] = b"AMOTEMB1";
pub const FMAP_MAGIC: &[u8; 8] = b"AMOTFMP1";

fn parse_err(path: &Path, line: usize, why: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        why: why.into(),
    }
}

// ---------------------------------------------------------------------------
// MOT text files

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn field_f64(path: &Path, lineno: usize, s: &str, name: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| parse_err(path, lineno, format!("{name} `{s}` is not a number")))
}

fn field_u64(path: &Path, lineno: usize, s: &str, name: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| parse_err(path, lineno, format!("{name} `{s}` is not an integer")))
}

/// Write ground truth: `frame,id,x,y,w,h,conf,class,visibility`, frames and
/// ids 1-based, boxes as top-left + size in image pixels.
pub fn write_gt_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut rows: Vec<(u64, u64, u32, BBox)> = Vec::new();
    for t in trajectories {
        for &(frame, bbox) in &t.boxes {
            rows.push((frame + 1, t.id, t.class_id, bbox));
        }
    }
    rows.sort_by_key(|&(frame, id, _, _)| (frame, id));
    let mut out = BufWriter::new(File::create(path)?);
    for (frame, id, class, bbox) in rows {
        let (x, y) = bbox.top_left();
        writeln!(
            out,
            "{frame},{id},{x:.2},{y:.2},{w:.2},{h:.2},1,{class},1",
            w = bbox.w,
            h = bbox.h
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Read a ground-truth or results file into per-identity trajectories.
/// Frames are converted to 0-based; boxes stay in image pixels.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path)?;
    let mut by_id: BTreeMap<u64, (u32, Vec<(u64, BBox)>)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let f = split_fields(line);
        if f.len() < 8 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected at least 8 comma-separated fields, got {}", f.len()),
            ));
        }
        let frame = field_u64(path, lineno, f[0], "frame")?;
        if frame == 0 {
            return Err(parse_err(path, lineno, "frame numbers are 1-based"));
        }
        let id = field_u64(path, lineno, f[1], "id")?;
        let x = field_f64(path, lineno, f[2], "x")?;
        let y = field_f64(path, lineno, f[3], "y")?;
        let w = field_f64(path, lineno, f[4], "w")?;
        let h = field_f64(path, lineno, f[5], "h")?;
        let class = field_u64(path, lineno, f[7], "class")? as u32;
        let bbox = BBox::from_tlwh(x, y, w, h)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        by_id
            .entry(id)
            .or_insert((class, Vec::new()))
            .1
            .push((frame - 1, bbox));
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (id, (class, mut boxes)) in by_id {
        boxes.sort_by_key(|&(f, _)| f);
        if boxes.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(
                "trajectory file",
                format!("id {id} appears twice in one frame"),
            ));
        }
        out.push(Trajectory::new(id, class, boxes)?);
    }
    Ok(out)
}

/// One raw detection line, still in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    /// 0-based frame index.
    pub frame: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_id: u32,
}

/// Write detections: `frame,-1,x,y,w,h,conf,class,-1,-1`.
pub fn write_det_file(
    path: &Path,
    frames: &[Vec<Detection>],
    geom: &GridGeometry,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let s = geom.stride as f64;
    for (idx, dets) in frames.iter().enumerate() {
        for d in dets {
            let (x, y) = d.bbox.top_left();
            writeln!(
                out,
                "{frame},-1,{x:.2},{y:.2},{w:.2},{h:.2},{conf:.4},{class},-1,-1",
                frame = idx + 1,
                x = x * s,
                y = y * s,
                w = d.bbox.w * s,
                h = d.bbox.h * s,
                conf = d.confidence,
                class = d.class_id
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_det_file(path: &Path) -> Result<Vec<RawDetection>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let f = split_fields(line);
        if f.len() < 8 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected at least 8 comma-separated fields, got {}", f.len()),
            ));
        }
        let frame = field_u64(path, lineno, f[0], "frame")?;
        if frame == 0 {
            return Err(parse_err(path, lineno, "frame numbers are 1-based"));
        }
        out.push(RawDetection {
            frame: frame - 1,
            x: field_f64(path, lineno, f[2], "x")?,
            y: field_f64(path, lineno, f[3], "y")?,
            w: field_f64(path, lineno, f[4], "w")?,
            h: field_f64(path, lineno, f[5], "h")?,
            confidence: field_f64(path, lineno, f[6], "conf")?,
            class_id: field_u64(path, lineno, f[7], "class")? as u32,
        });
    }
    Ok(out)
}

/// Write tracker output: `frame,id,x,y,w,h,conf,class,-1,-1`, 1-based.
pub fn write_results_file(path: &Path, results: &[FrameResult]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_results_to(&mut out, results)?;
    out.flush()?;
    Ok(())
}

pub fn write_results_to(out: &mut impl Write, results: &[FrameResult]) -> Result<()> {
    for r in results {
        for o in &r.outputs {
            writeln!(
                out,
                "{frame},{id},{x:.2},{y:.2},{w:.2},{h:.2},{conf:.4},{class},-1,-1",
                frame = r.frame + 1,
                id = o.track_id,
                x = o.x,
                y = o.y,
                w = o.w,
                h = o.h,
                conf = o.confidence,
                class = o.class_id
            )?;
        }
    }
    Ok(())
}

/// Group tracker output into pixel-space trajectories for evaluation.
pub fn trajectories_from_results(results: &[FrameResult]) -> Result<Vec<Trajectory>> {
    let mut by_id: BTreeMap<u64, (u32, Vec<(u64, BBox)>)> = BTreeMap::new();
    for r in results {
        for o in &r.outputs {
            let bbox = BBox::from_tlwh(o.x, o.y, o.w, o.h)?;
            by_id
                .entry(o.track_id)
                .or_insert((o.class_id, Vec::new()))
                .1
                .push((r.frame, bbox));
        }
    }
    by_id
        .into_iter()
        .map(|(id, (class, boxes))| Trajectory::new(id, class, boxes))
        .collect()
}

// ---------------------------------------------------------------------------
// Binary sidecars

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::invalid("binary file", format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Embedding sidecar: rows in detection-file order.
pub fn write_embeddings(path: &Path, dim: u32, rows: &[&[f32]]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EMBED_MAGIC)?;
    write_u32(&mut out, rows.len() as u32)?;
    write_u32(&mut out, dim)?;
    for row in rows {
        debug_assert_eq!(row.len(), dim as usize);
        for v in *row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(u32, Vec<Vec<f32>>)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::invalid("embedding file", "truncated magic"))?;
    if &magic != EMBED_MAGIC {
        return Err(Error::invalid("embedding file", "bad magic"));
    }
    let count = read_u32(&mut input, "count")?;
    let dim = read_u32(&mut input, "dim")?;
    let mut bytes = vec![0u8; count as usize * dim as usize * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::invalid("embedding file", "truncated payload"))?;
    let mut rows = Vec::with_capacity(count as usize);
    for r in 0..count as usize {
        let row: Vec<f32> = (0..dim as usize)
            .map(|k| {
                let o = (r * dim as usize + k) * 4;
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
            })
            .collect();
        rows.push(row);
    }
    Ok((dim, rows))
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    let g = fm.geometry();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FMAP_MAGIC)?;
    write_u32(&mut out, g.height as u32)?;
    write_u32(&mut out, g.width as u32)?;
    write_u32(&mut out, g.embed_dim as u32)?;
    for v in fm.values().iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_map(path: &Path, stride: u32) -> Result<FeatureMap> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::invalid("feature map file", "truncated magic"))?;
    if &magic != FMAP_MAGIC {
        return Err(Error::invalid("feature map file", "bad magic"));
    }
    let h = read_u32(&mut input, "height")? as usize;
    let w = read_u32(&mut input, "width")? as usize;
    let d = read_u32(&mut input, "dim")? as usize;
    let mut bytes = vec![0u8; h * w * d * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::invalid("feature map file", "truncated payload"))?;
    let mut values = Vec::with_capacity(h * w * d);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let geometry = GridGeometry::new(h, w, d, stride)?;
    let array = Array3::from_shape_vec((h, w, d), values)
        .map_err(|e| Error::invalid("feature map file", e.to_string()))?;
    FeatureMap::new(geometry, array)
}

// ---------------------------------------------------------------------------
// Manifest

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_err(path, i + 1, format!("expected key=value, got `{line}`")));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::MissingKey(key.to_string()))
}

fn manifest_usize(m: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    manifest_get(m, key)?.parse().map_err(|_| Error::BadKey {
        key: key.to_string(),
        why: "not an integer".into(),
    })
}

// ---------------------------------------------------------------------------
// Bundle directory

pub fn fm_file_name(frame_index: usize) -> String {
    format!("fm_{:06}.bin", frame_index + 1)
}

/// Streaming bundle writer: feature maps go to disk as frames arrive; text
/// files and the manifest are written on `finish`.
pub struct BundleWriter {
    dir: PathBuf,
    spec: ScenarioSpec,
    gt_frames: Vec<(u64, Vec<crate::metrics::FrameBox>)>,
    det_frames: Vec<Vec<Detection>>,
    overlap_cells: u64,
}

impl BundleWriter {
    pub fn create(dir: &Path, spec: &ScenarioSpec) -> Result<Self> {
        std::fs::create_dir_all(dir.join("fm"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            spec: spec.clone(),
            gt_frames: Vec::new(),
            det_frames: Vec::new(),
            overlap_cells: 0,
        })
    }

    pub fn append(&mut self, frame: &StreamFrame) -> Result<()> {
        write_feature_map(
            &self.dir.join("fm").join(fm_file_name(frame.frame as usize)),
            &frame.feature_map,
        )?;
        self.gt_frames.push((frame.frame, frame.gt.clone()));
        self.det_frames.push(frame.detections.clone());
        self.overlap_cells += frame.overlap_cells;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let geom = self.spec.geometry;
        let mut gt: BTreeMap<u64, (u32, Vec<(u64, BBox)>)> = BTreeMap::new();
        for (frame, boxes) in &self.gt_frames {
            for fb in boxes {
                let s = geom.stride as f64;
                let px = BBox {
                    cx: fb.bbox.cx * s,
                    cy: fb.bbox.cy * s,
                    w: fb.bbox.w * s,
                    h: fb.bbox.h * s,
                };
                gt.entry(fb.id)
                    .or_insert((fb.class_id, Vec::new()))
                    .1
                    .push((*frame, px));
            }
        }
        let trajectories: Vec<Trajectory> = gt
            .into_iter()
            .map(|(id, (class, boxes))| Trajectory::new(id, class, boxes))
            .collect::<Result<_>>()?;
        write_gt_file(&self.dir.join("gt.txt"), &trajectories)?;
        write_det_file(&self.dir.join("det.txt"), &self.det_frames, &geom)?;

        let rows: Vec<&[f32]> = self
            .det_frames
            .iter()
            .flatten()
            .map(|d| d.embedding.as_slice())
            .collect();
        write_embeddings(
            &self.dir.join("emb.bin"),
            geom.embed_dim as u32,
            &rows,
        )?;

        let mut manifest: BTreeMap<String, String> = BTreeMap::new();
        for line in self.spec.to_kv_lines().lines() {
            if let Some((k, v)) = line.split_once('=') {
                manifest.insert(k.to_string(), v.to_string());
            }
        }
        manifest.insert("format_version".into(), "1".into());
        manifest.insert("overlap_cells".into(), self.overlap_cells.to_string());
        write_manifest(&self.dir.join("manifest.txt"), &manifest)
    }
}

/// Write an in-memory bundle to a directory.
pub fn write_bundle(dir: &Path, bundle: &ScenarioBundle) -> Result<()> {
    let mut writer = BundleWriter::create(dir, &bundle.spec)?;
    // Rebuild grid-space GT per frame from the pixel trajectories.
    let s = bundle.spec.geometry.stride as f64;
    for (idx, frame) in bundle.frames.iter().enumerate() {
        let mut gt = Vec::new();
        for t in &bundle.gt {
            if let Some(&(_, bbox)) = t.boxes.iter().find(|(f, _)| *f == idx as u64) {
                gt.push(crate::metrics::FrameBox {
                    id: t.id,
                    class_id: t.class_id,
                    bbox: BBox {
                        cx: bbox.cx / s,
                        cy: bbox.cy / s,
                        w: bbox.w / s,
                        h: bbox.h / s,
                    },
                });
            }
        }
        writer.append(&StreamFrame {
            frame: idx as u64,
            gt,
            detections: frame.detections.clone(),
            feature_map: frame.feature_map.clone(),
            overlap_cells: if idx == 0 { bundle.overlap_cells } else { 0 },
        })?;
    }
    writer.finish()
}

/// Read-side view of a bundle directory. Detections are loaded eagerly
/// (they are small); feature maps stream from disk per frame.
pub struct BundleReader {
    dir: PathBuf,
    pub manifest: BTreeMap<String, String>,
    pub geometry: GridGeometry,
    pub num_frames: usize,
    detections: Vec<Vec<Detection>>,
}

impl BundleReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        if !manifest_path.exists() {
            if !dir.join("det.txt").exists() {
                // An empty input directory: zero frames, nothing to track.
                return Ok(Self {
                    dir: dir.to_path_buf(),
                    manifest: BTreeMap::new(),
                    geometry: GridGeometry::new(1, 1, 1, 1)?,
                    num_frames: 0,
                    detections: Vec::new(),
                });
            }
            return Err(Error::MissingKey(format!(
                "{} (required beside det.txt)",
                manifest_path.display()
            )));
        }
        let manifest = read_manifest(&manifest_path)?;
        let geometry = GridGeometry::new(
            manifest_usize(&manifest, "grid_height")?,
            manifest_usize(&manifest, "grid_width")?,
            manifest_usize(&manifest, "embed_dim")?,
            manifest_usize(&manifest, "stride")? as u32,
        )?;
        let num_frames = manifest_usize(&manifest, "num_frames")?;

        let raw = read_det_file(&dir.join("det.txt"))?;
        let (dim, rows) = read_embeddings(&dir.join("emb.bin"))?;
        if dim as usize != geometry.embed_dim {
            return Err(Error::EmbeddingDim {
                expected: geometry.embed_dim,
                got: dim as usize,
            });
        }
        if rows.len() != raw.len() {
            return Err(Error::CountMismatch {
                detections: raw.len(),
                embeddings: rows.len(),
            });
        }
        let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); num_frames];
        let s = geometry.stride as f64;
        for (r, row) in raw.iter().zip(rows) {
            if r.frame as usize >= num_frames {
                return Err(Error::invalid(
                    "detection file",
                    format!("frame {} beyond manifest num_frames {num_frames}", r.frame + 1),
                ));
            }
            let bbox = BBox::from_tlwh(r.x / s, r.y / s, r.w / s, r.h / s)?;
            let det = Detection::new(bbox, r.confidence, r.class_id, Embedding::new(row)?)?;
            detections[r.frame as usize].push(det);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            geometry,
            num_frames,
            detections,
        })
    }

    pub fn ground_truth(&self) -> Result<Vec<Trajectory>> {
        read_trajectories(&self.dir.join("gt.txt"))
    }

    /// Frames 0, k, 2k, ... re-indexed consecutively; k = 1 is the full
    /// sequence. Feature maps load lazily per yielded frame.
    pub fn frames_subsampled(
        &self,
        k: usize,
    ) -> Result<impl Iterator<Item = Result<(Vec<Detection>, FeatureMap)>> + '_> {
        if k == 0 {
            return Err(Error::invalid("subsample", "interval must be >= 1"));
        }
        if self.num_frames > 0 && k > self.num_frames {
            return Err(Error::invalid(
                "subsample",
                format!("interval {k} larger than the {}-frame sequence", self.num_frames),
            ));
        }
        let stride = self.geometry.stride;
        let dir = self.dir.clone();
        Ok((0..self.num_frames).step_by(k).map(move |idx| {
            let fm = read_feature_map(&dir.join("fm").join(fm_file_name(idx)), stride)?;
            Ok((self.detections[idx].clone(), fm))
        }))
    }

    pub fn frames(
        &self,
    ) -> Result<impl Iterator<Item = Result<(Vec<Detection>, FeatureMap)>> + '_> {
        self.frames_subsampled(1)
    }
}
