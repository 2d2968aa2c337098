//! Synthetic UAV scenario generator.
//!
//! Stands in for the detector/ReID network: produces ground truth,
//! detections with confidences and embeddings, and planted-peak feature maps
//! with controllable displacement, camera motion, dropout, clutter and
//! appearance noise. Everything is a pure function of the spec, seed
//! included.
//!
//! Feature maps are built by first filling every cell with a low-norm random
//! vector (norm in [0.01, 0.1]), then blending each visible object's noisy
//! embedding over the cells of its box with a Gaussian spatial weight that
//! peaks at 1 on the center cell. The center cell therefore holds the
//! embedding exactly while off-center cells keep a shrinking background
//! component, which keeps cosine responses strictly below the peak away from
//! the center (the norm floor keeps that margin far above roundoff).
//! Overlapping boxes write additively; the bundle records how many cells
//! that touched.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::parse_kv_lines;
use crate::error::{Error, Result};
use crate::metrics::{FrameBox, Trajectory};
use crate::types::{BBox, Detection, Embedding, FeatureMap, GridGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionModel {
    ConstantVelocity,
    Turning,
    RandomWalk,
}

impl MotionModel {
    pub fn name(self) -> &'static str {
        match self {
            MotionModel::ConstantVelocity => "constant-velocity",
            MotionModel::Turning => "turning",
            MotionModel::RandomWalk => "random-walk",
        }
    }
}

impl std::str::FromStr for MotionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-velocity" => Ok(MotionModel::ConstantVelocity),
            "turning" => Ok(MotionModel::Turning),
            "random-walk" => Ok(MotionModel::RandomWalk),
            other => Err(Error::BadKey {
                key: "motion".into(),
                why: format!("`{other}` is not constant-velocity, turning or random-walk"),
            }),
        }
    }
}

/// Optional per-object overrides for engineered scenarios.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectInit {
    pub pos: Option<(f64, f64)>,
    pub vel: Option<(f64, f64)>,
}

/// Full description of a random scenario. The seed determines every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub num_objects: usize,
    pub num_frames: usize,
    pub geometry: GridGeometry,
    pub motion: MotionModel,
    pub speed_range: (f64, f64),
    /// Radians per frame for the turning model; sign alternates per object.
    pub turn_rate: f64,
    /// Global per-frame translation amplitude, cells/frame.
    pub camera_amplitude: f64,
    /// Per-object per-frame probability of a missed detection.
    pub dropout: f64,
    pub conf_range: (f64, f64),
    /// Expected false detections per frame (Poisson).
    pub clutter_rate: f64,
    /// Std of Gaussian noise added to identity embeddings before normalizing.
    pub embed_noise: f64,
    /// Cosine of clutter embeddings to a randomly chosen target identity.
    pub distractor_similarity: f64,
    pub num_classes: u32,
    pub box_w_range: (f64, f64),
    pub box_h_range: (f64, f64),
    pub object_inits: Vec<ObjectInit>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_objects: 5,
            num_frames: 50,
            geometry: GridGeometry::new(64, 96, 32, 4).expect("static geometry"),
            motion: MotionModel::ConstantVelocity,
            speed_range: (0.5, 1.5),
            turn_rate: 0.15,
            camera_amplitude: 0.0,
            dropout: 0.0,
            conf_range: (0.6, 0.95),
            clutter_rate: 0.0,
            embed_noise: 0.0,
            distractor_similarity: 0.0,
            num_classes: 1,
            box_w_range: (4.0, 8.0),
            box_h_range: (4.0, 8.0),
            object_inits: Vec::new(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(Error::BadKey {
                key: "num_objects".into(),
                why: "must be >= 1".into(),
            });
        }
        if self.num_frames == 0 {
            return Err(Error::BadKey {
                key: "num_frames".into(),
                why: "must be >= 1".into(),
            });
        }
        if self.num_classes == 0 {
            return Err(Error::BadKey {
                key: "num_classes".into(),
                why: "must be >= 1".into(),
            });
        }
        for (key, p) in [
            ("dropout", self.dropout),
            ("distractor_similarity", self.distractor_similarity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadKey {
                    key: key.into(),
                    why: format!("probability {p} outside [0, 1]"),
                });
            }
        }
        let ranges = [
            ("speed", self.speed_range, 0.0),
            ("conf", self.conf_range, 0.0),
            ("box_w", self.box_w_range, f64::MIN_POSITIVE),
            ("box_h", self.box_h_range, f64::MIN_POSITIVE),
        ];
        for (key, (lo, hi), min) in ranges {
            if lo < min || hi < lo {
                return Err(Error::BadKey {
                    key: format!("{key}_min/{key}_max"),
                    why: format!("bad range [{lo}, {hi}]"),
                });
            }
        }
        if self.conf_range.1 > 1.0 {
            return Err(Error::BadKey {
                key: "conf_max".into(),
                why: "confidence above 1".into(),
            });
        }
        if self.camera_amplitude < 0.0 || self.clutter_rate < 0.0 || self.embed_noise < 0.0 {
            return Err(Error::invalid(
                "scenario",
                "camera_amplitude, clutter_rate and embed_noise must be >= 0",
            ));
        }
        if self.object_inits.len() > self.num_objects {
            return Err(Error::BadKey {
                key: "object".into(),
                why: format!(
                    "{} overrides for {} objects",
                    self.object_inits.len(),
                    self.num_objects
                ),
            });
        }
        Ok(())
    }

    /// Parse the flat key=value spec file. `seed` is required; everything
    /// else falls back to defaults. Unknown keys are errors.
    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut saw_seed = false;
        let mut geom = (
            spec.geometry.height,
            spec.geometry.width,
            spec.geometry.embed_dim,
            spec.geometry.stride,
        );
        for (key, value) in parse_kv_lines(text)? {
            let bad = |why: String| Error::BadKey {
                key: key.clone(),
                why,
            };
            let f64_v = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| bad(format!("`{v}` is not a number")))
            };
            match key.as_str() {
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| bad(format!("`{value}` is not an integer")))?;
                    saw_seed = true;
                }
                "num_objects" => {
                    spec.num_objects =
                        value.parse().map_err(|_| bad("not an integer".into()))?
                }
                "num_frames" => {
                    spec.num_frames = value.parse().map_err(|_| bad("not an integer".into()))?
                }
                "grid_height" => geom.0 = value.parse().map_err(|_| bad("not an integer".into()))?,
                "grid_width" => geom.1 = value.parse().map_err(|_| bad("not an integer".into()))?,
                "embed_dim" => geom.2 = value.parse().map_err(|_| bad("not an integer".into()))?,
                "stride" => geom.3 = value.parse().map_err(|_| bad("not an integer".into()))?,
                "motion" => spec.motion = value.parse()?,
                "speed_min" => spec.speed_range.0 = f64_v(&value)?,
                "speed_max" => spec.speed_range.1 = f64_v(&value)?,
                "turn_rate" => spec.turn_rate = f64_v(&value)?,
                "camera_amplitude" => spec.camera_amplitude = f64_v(&value)?,
                "dropout" => spec.dropout = f64_v(&value)?,
                "conf_min" => spec.conf_range.0 = f64_v(&value)?,
                "conf_max" => spec.conf_range.1 = f64_v(&value)?,
                "clutter_rate" => spec.clutter_rate = f64_v(&value)?,
                "embed_noise" => spec.embed_noise = f64_v(&value)?,
                "distractor_similarity" => spec.distractor_similarity = f64_v(&value)?,
                "num_classes" => {
                    spec.num_classes = value.parse().map_err(|_| bad("not an integer".into()))?
                }
                "box_w_min" => spec.box_w_range.0 = f64_v(&value)?,
                "box_w_max" => spec.box_w_range.1 = f64_v(&value)?,
                "box_h_min" => spec.box_h_range.0 = f64_v(&value)?,
                "box_h_max" => spec.box_h_range.1 = f64_v(&value)?,
                other => {
                    let Some(rest) = other.strip_prefix("object") else {
                        return Err(Error::UnknownKey(key));
                    };
                    let Some((idx, field)) = rest.split_once('.') else {
                        return Err(Error::UnknownKey(key));
                    };
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| Error::UnknownKey(key.clone()))?;
                    if spec.object_inits.len() <= idx {
                        spec.object_inits.resize(idx + 1, ObjectInit::default());
                    }
                    let init = &mut spec.object_inits[idx];
                    let v = f64_v(&value)?;
                    match field {
                        "pos_x" => init.pos = Some((v, init.pos.map_or(0.0, |p| p.1))),
                        "pos_y" => init.pos = Some((init.pos.map_or(0.0, |p| p.0), v)),
                        "vel_x" => init.vel = Some((v, init.vel.map_or(0.0, |p| p.1))),
                        "vel_y" => init.vel = Some((init.vel.map_or(0.0, |p| p.0), v)),
                        _ => return Err(Error::UnknownKey(key)),
                    }
                }
            }
        }
        if !saw_seed {
            return Err(Error::MissingKey("seed".into()));
        }
        spec.geometry = GridGeometry::new(geom.0, geom.1, geom.2, geom.3)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Serialize as key=value lines; the manifest echoes these.
    pub fn to_kv_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("num_objects", self.num_objects.to_string());
        push("num_frames", self.num_frames.to_string());
        push("grid_height", self.geometry.height.to_string());
        push("grid_width", self.geometry.width.to_string());
        push("embed_dim", self.geometry.embed_dim.to_string());
        push("stride", self.geometry.stride.to_string());
        push("motion", self.motion.name().to_string());
        push("speed_min", self.speed_range.0.to_string());
        push("speed_max", self.speed_range.1.to_string());
        push("turn_rate", self.turn_rate.to_string());
        push("camera_amplitude", self.camera_amplitude.to_string());
        push("dropout", self.dropout.to_string());
        push("conf_min", self.conf_range.0.to_string());
        push("conf_max", self.conf_range.1.to_string());
        push("clutter_rate", self.clutter_rate.to_string());
        push("embed_noise", self.embed_noise.to_string());
        push("distractor_similarity", self.distractor_similarity.to_string());
        push("num_classes", self.num_classes.to_string());
        push("box_w_min", self.box_w_range.0.to_string());
        push("box_w_max", self.box_w_range.1.to_string());
        push("box_h_min", self.box_h_range.0.to_string());
        push("box_h_max", self.box_h_range.1.to_string());
        for (i, init) in self.object_inits.iter().enumerate() {
            if let Some((x, y)) = init.pos {
                push(&format!("object{i}.pos_x"), x.to_string());
                push(&format!("object{i}.pos_y"), y.to_string());
            }
            if let Some((x, y)) = init.vel {
                push(&format!("object{i}.vel_x"), x.to_string());
                push(&format!("object{i}.vel_y"), y.to_string());
            }
        }
        out
    }
}

/// One generated frame.
#[derive(Debug, Clone)]
pub struct ScenarioFrame {
    pub detections: Vec<Detection>,
    pub feature_map: FeatureMap,
}

/// A complete generated scenario: ground truth in image pixels, per-frame
/// detections and feature maps in grid space.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub spec: ScenarioSpec,
    pub gt: Vec<Trajectory>,
    pub frames: Vec<ScenarioFrame>,
    /// Cells written by more than one object across all frames.
    pub overlap_cells: u64,
}

impl ScenarioBundle {
    /// Frames in the shape the tracker consumes, by cloning.
    pub fn frame_iter(
        &self,
    ) -> impl Iterator<Item = Result<(Vec<Detection>, FeatureMap)>> + '_ {
        self.frames
            .iter()
            .map(|f| Ok((f.detections.clone(), f.feature_map.clone())))
    }
}

struct ObjectState {
    id: u64,
    class_id: u32,
    embedding: Vec<f32>,
    pos: (f64, f64),
    vel: (f64, f64),
    w: f64,
    h: f64,
    turn: f64,
}

/// Streaming frame-by-frame generator; `next()` yields frames in order
/// without retaining them, so arbitrarily long scenarios run in constant
/// memory.
pub struct ScenarioStream {
    spec: ScenarioSpec,
    rng: ChaCha12Rng,
    objects: Vec<ObjectState>,
    frame: u64,
}

/// One frame from the stream, ground truth still in grid cells.
#[derive(Debug, Clone)]
pub struct StreamFrame {
    pub frame: u64,
    pub gt: Vec<FrameBox>,
    pub detections: Vec<Detection>,
    pub feature_map: FeatureMap,
    pub overlap_cells: u64,
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_unit_embedding(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                g as f32
            })
            .collect();
        if let Ok(e) = Embedding::new(v) {
            return e.as_slice().to_vec();
        }
    }
}

impl ScenarioStream {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let g = spec.geometry;
        let mut objects = Vec::with_capacity(spec.num_objects);
        for i in 0..spec.num_objects {
            let embedding = random_unit_embedding(&mut rng, g.embed_dim);
            let w = uniform(&mut rng, spec.box_w_range.0, spec.box_w_range.1);
            let h = uniform(&mut rng, spec.box_h_range.0, spec.box_h_range.1);
            let mut pos = (
                uniform(&mut rng, 2.0, (g.width - 3) as f64),
                uniform(&mut rng, 2.0, (g.height - 3) as f64),
            );
            let speed = uniform(&mut rng, spec.speed_range.0, spec.speed_range.1);
            let angle = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let mut vel = (speed * angle.cos(), speed * angle.sin());
            if let Some(init) = spec.object_inits.get(i) {
                if let Some(p) = init.pos {
                    pos = p;
                }
                if let Some(v) = init.vel {
                    vel = v;
                }
            }
            let turn = if i % 2 == 0 {
                spec.turn_rate
            } else {
                -spec.turn_rate
            };
            objects.push(ObjectState {
                id: i as u64 + 1,
                class_id: i as u32 % spec.num_classes,
                embedding,
                pos,
                vel,
                w,
                h,
                turn,
            });
        }
        let mut stream = Self {
            spec,
            rng,
            objects,
            frame: 0,
        };
        stream.clamp_all();
        Ok(stream)
    }

    fn clamp_all(&mut self) {
        let g = self.spec.geometry;
        let max_x = (g.width - 1) as f64;
        let max_y = (g.height - 1) as f64;
        for o in &mut self.objects {
            // Reflect at the walls so centers never leave the grid.
            if o.pos.0 < 0.0 {
                o.pos.0 = -o.pos.0;
                o.vel.0 = o.vel.0.abs();
            }
            if o.pos.0 > max_x {
                o.pos.0 = 2.0 * max_x - o.pos.0;
                o.vel.0 = -o.vel.0.abs();
            }
            if o.pos.1 < 0.0 {
                o.pos.1 = -o.pos.1;
                o.vel.1 = o.vel.1.abs();
            }
            if o.pos.1 > max_y {
                o.pos.1 = 2.0 * max_y - o.pos.1;
                o.vel.1 = -o.vel.1.abs();
            }
            o.pos.0 = o.pos.0.clamp(0.0, max_x);
            o.pos.1 = o.pos.1.clamp(0.0, max_y);
        }
    }

    fn advance_motion(&mut self) {
        let camera = if self.spec.camera_amplitude > 0.0 {
            let angle = uniform(&mut self.rng, 0.0, std::f64::consts::TAU);
            (
                self.spec.camera_amplitude * angle.cos(),
                self.spec.camera_amplitude * angle.sin(),
            )
        } else {
            (0.0, 0.0)
        };
        let (speed_lo, speed_hi) = self.spec.speed_range;
        for idx in 0..self.objects.len() {
            match self.spec.motion {
                MotionModel::ConstantVelocity => {}
                MotionModel::Turning => {
                    let o = &mut self.objects[idx];
                    let (vx, vy) = o.vel;
                    let (s, c) = o.turn.sin_cos();
                    o.vel = (vx * c - vy * s, vx * s + vy * c);
                }
                MotionModel::RandomWalk => {
                    let speed = uniform(&mut self.rng, speed_lo, speed_hi);
                    let angle = uniform(&mut self.rng, 0.0, std::f64::consts::TAU);
                    self.objects[idx].vel = (speed * angle.cos(), speed * angle.sin());
                }
            }
            let o = &mut self.objects[idx];
            o.pos.0 += o.vel.0 + camera.0;
            o.pos.1 += o.vel.1 + camera.1;
        }
        self.clamp_all();
    }
}

impl Iterator for ScenarioStream {
    type Item = StreamFrame;

    fn next(&mut self) -> Option<StreamFrame> {
        if self.frame as usize >= self.spec.num_frames {
            return None;
        }
        if self.frame > 0 {
            self.advance_motion();
        }
        let spec_dropout = self.spec.dropout;
        let (conf_lo, conf_hi) = self.spec.conf_range;
        let g = self.spec.geometry;

        let mut gt = Vec::with_capacity(self.objects.len());
        let mut detections = Vec::new();
        let mut plants: Vec<(Vec<f32>, BBox)> = Vec::new();
        for i in 0..self.objects.len() {
            let (bbox, class_id, id) = {
                let o = &self.objects[i];
                (
                    BBox::new(o.pos.0, o.pos.1, o.w, o.h).expect("generated box is valid"),
                    o.class_id,
                    o.id,
                )
            };
            gt.push(FrameBox {
                id,
                class_id,
                bbox,
            });
            let noisy = {
                let o = &self.objects[i];
                if self.spec.embed_noise > 0.0 {
                    let v: Vec<f32> = o
                        .embedding
                        .iter()
                        .map(|&e| {
                            let n: f64 = self.rng.sample(StandardNormal);
                            (e as f64 + self.spec.embed_noise * n) as f32
                        })
                        .collect();
                    Embedding::new(v)
                        .unwrap_or_else(|_| Embedding::new(o.embedding.clone()).unwrap())
                } else {
                    Embedding::new(o.embedding.clone()).unwrap()
                }
            };
            let dropped = self.rng.random::<f64>() < spec_dropout;
            if !dropped {
                let conf = uniform(&mut self.rng, conf_lo, conf_hi);
                detections.push(
                    Detection::new(bbox, conf, class_id, noisy.clone())
                        .expect("generated detection is valid"),
                );
            }
            plants.push((noisy.as_slice().to_vec(), bbox));
        }

        // Clutter: false detections not present in the feature map.
        if self.spec.clutter_rate > 0.0 {
            let count = Poisson::new(self.spec.clutter_rate)
                .expect("validated rate")
                .sample(&mut self.rng) as usize;
            for _ in 0..count {
                let cx = uniform(&mut self.rng, 0.0, (g.width - 1) as f64);
                let cy = uniform(&mut self.rng, 0.0, (g.height - 1) as f64);
                let w = uniform(&mut self.rng, self.spec.box_w_range.0, self.spec.box_w_range.1);
                let h = uniform(&mut self.rng, self.spec.box_h_range.0, self.spec.box_h_range.1);
                let class_id = self.rng.random_range(0..self.spec.num_classes);
                let conf = uniform(&mut self.rng, conf_lo, conf_hi);
                let target = self.rng.random_range(0..self.objects.len());
                let alpha = self.spec.distractor_similarity;
                let raw = random_unit_embedding(&mut self.rng, g.embed_dim);
                let t_emb = &self.objects[target].embedding;
                let dot: f64 = raw
                    .iter()
                    .zip(t_emb)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                let perp: Vec<f64> = raw
                    .iter()
                    .zip(t_emb)
                    .map(|(&a, &b)| a as f64 - dot * b as f64)
                    .collect();
                let perp_norm = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
                let emb: Vec<f32> = if perp_norm == 0.0 {
                    raw
                } else {
                    let beta = (1.0 - alpha * alpha).sqrt() / perp_norm;
                    t_emb
                        .iter()
                        .zip(&perp)
                        .map(|(&t, &p)| (alpha * t as f64 + beta * p) as f32)
                        .collect()
                };
                if let (Ok(bbox), Ok(e)) = (BBox::new(cx, cy, w, h), Embedding::new(emb)) {
                    if let Ok(det) = Detection::new(bbox, conf, class_id, e) {
                        detections.push(det);
                    }
                }
            }
        }

        let (feature_map, overlap_cells) = plant_frame(&g, &plants, &mut self.rng);
        let frame = StreamFrame {
            frame: self.frame,
            gt,
            detections,
            feature_map,
            overlap_cells,
        };
        self.frame += 1;
        Some(frame)
    }
}

/// Cells of `bbox` with their Gaussian weights; weight is exactly 1 at the
/// rounded center cell.
fn box_cells(geom: &GridGeometry, bbox: &BBox) -> Vec<(usize, usize, f64)> {
    let max_x = geom.width as isize - 1;
    let max_y = geom.height as isize - 1;
    let ccx = (bbox.cx.round() as isize).clamp(0, max_x);
    let ccy = (bbox.cy.round() as isize).clamp(0, max_y);
    let x0 = ((bbox.cx - bbox.w / 2.0).floor() as isize).clamp(0, max_x);
    let x1 = ((bbox.cx + bbox.w / 2.0).ceil() as isize).clamp(0, max_x);
    let y0 = ((bbox.cy - bbox.h / 2.0).floor() as isize).clamp(0, max_y);
    let y1 = ((bbox.cy + bbox.h / 2.0).ceil() as isize).clamp(0, max_y);
    let s = (bbox.w.max(bbox.h) / 4.0).max(0.5);
    let denom = 2.0 * s * s;
    let mut cells = Vec::with_capacity(((x1 - x0 + 1) * (y1 - y0 + 1)) as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = ((x - ccx).pow(2) + (y - ccy).pow(2)) as f64;
            cells.push((x as usize, y as usize, (-d2 / denom).exp()));
        }
    }
    cells
}

/// Build one frame's feature map from (embedding, box) plants.
fn plant_frame(
    geom: &GridGeometry,
    plants: &[(Vec<f32>, BBox)],
    rng: &mut ChaCha12Rng,
) -> (FeatureMap, u64) {
    let (h, w, d) = (geom.height, geom.width, geom.embed_dim);
    let mut values = Array3::<f32>::zeros((h, w, d));
    {
        let flat = values.as_slice_mut().expect("freshly allocated");
        for cell in flat.chunks_exact_mut(d) {
            let mut norm_sq = 0.0f64;
            for v in cell.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = g as f32;
                norm_sq += g * g;
            }
            let target = rng.random_range(0.01..0.1);
            let scale = if norm_sq > 0.0 {
                target / norm_sq.sqrt()
            } else {
                0.0
            };
            for v in cell.iter_mut() {
                *v = (*v as f64 * scale) as f32;
            }
        }
    }

    let mut weight_sum = Array2::<f64>::zeros((h, w));
    let mut writers = Array2::<u8>::zeros((h, w));
    for (_, bbox) in plants {
        for (x, y, wt) in box_cells(geom, bbox) {
            weight_sum[(y, x)] += wt;
            writers[(y, x)] = writers[(y, x)].saturating_add(1);
        }
    }
    let overlap_cells = writers.iter().filter(|&&c| c >= 2).count() as u64;

    // Shrink the background where objects write, then add contributions.
    for y in 0..h {
        for x in 0..w {
            if writers[(y, x)] > 0 {
                let keep = (1.0 - weight_sum[(y, x)].min(1.0)) as f32;
                for k in 0..d {
                    values[(y, x, k)] *= keep;
                }
            }
        }
    }
    for (embedding, bbox) in plants {
        for (x, y, wt) in box_cells(geom, bbox) {
            for (k, &e) in embedding.iter().enumerate() {
                values[(y, x, k)] += (wt * e as f64) as f32;
            }
        }
    }
    (
        FeatureMap::new(*geom, values).expect("planted map is valid"),
        overlap_cells,
    )
}

fn grid_box_to_pixels(bbox: &BBox, geom: &GridGeometry) -> BBox {
    let s = geom.stride as f64;
    BBox {
        cx: bbox.cx * s,
        cy: bbox.cy * s,
        w: bbox.w * s,
        h: bbox.h * s,
    }
}

fn trajectories_from_stream(
    frames: &[(u64, Vec<FrameBox>)],
    geom: &GridGeometry,
) -> Vec<Trajectory> {
    let mut by_id: std::collections::BTreeMap<u64, (u32, Vec<(u64, BBox)>)> =
        std::collections::BTreeMap::new();
    for (frame, boxes) in frames {
        for fb in boxes {
            by_id
                .entry(fb.id)
                .or_insert((fb.class_id, Vec::new()))
                .1
                .push((*frame, grid_box_to_pixels(&fb.bbox, geom)));
        }
    }
    by_id
        .into_iter()
        .map(|(id, (class_id, boxes))| {
            Trajectory::new(id, class_id, boxes).expect("frames emitted in order")
        })
        .collect()
}

/// Generate a full scenario in memory.
pub fn generate(spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    let geom = spec.geometry;
    let stream = ScenarioStream::new(spec.clone())?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut gt_frames = Vec::with_capacity(spec.num_frames);
    let mut overlap_cells = 0;
    for sf in stream {
        gt_frames.push((sf.frame, sf.gt));
        overlap_cells += sf.overlap_cells;
        frames.push(ScenarioFrame {
            detections: sf.detections,
            feature_map: sf.feature_map,
        });
    }
    Ok(ScenarioBundle {
        spec: spec.clone(),
        gt: trajectories_from_stream(&gt_frames, &geom),
        frames,
        overlap_cells,
    })
}

/// A hand-scripted identity: explicit per-frame boxes plus the frames where
/// its detection is deliberately suppressed (the box is still planted).
#[derive(Debug, Clone)]
pub struct ScriptedObject {
    pub id: u64,
    pub class_id: u32,
    pub boxes: Vec<(u64, BBox)>,
    pub dropped_frames: BTreeSet<u64>,
}

/// Deterministic scenario from scripted trajectories, sharing the planting
/// machinery of the random generator.
#[derive(Debug, Clone)]
pub struct ScriptedScenario {
    pub seed: u64,
    pub geometry: GridGeometry,
    pub num_frames: usize,
    pub confidence: f64,
    pub embed_noise: f64,
    pub objects: Vec<ScriptedObject>,
}

pub fn generate_scripted(script: &ScriptedScenario) -> Result<ScenarioBundle> {
    if script.num_frames == 0 || script.objects.is_empty() {
        return Err(Error::invalid(
            "scripted scenario",
            "need at least one frame and one object",
        ));
    }
    let geom = script.geometry;
    let mut rng = ChaCha12Rng::seed_from_u64(script.seed);
    let identities: Vec<Vec<f32>> = script
        .objects
        .iter()
        .map(|_| random_unit_embedding(&mut rng, geom.embed_dim))
        .collect();

    let mut frames = Vec::with_capacity(script.num_frames);
    let mut gt_frames = Vec::with_capacity(script.num_frames);
    let mut overlap_total = 0;
    for frame in 0..script.num_frames as u64 {
        let mut gt = Vec::new();
        let mut detections = Vec::new();
        let mut plants = Vec::new();
        for (obj, identity) in script.objects.iter().zip(&identities) {
            let Some(&(_, bbox)) = obj.boxes.iter().find(|(f, _)| *f == frame) else {
                continue;
            };
            gt.push(FrameBox {
                id: obj.id,
                class_id: obj.class_id,
                bbox,
            });
            let noisy = if script.embed_noise > 0.0 {
                let v: Vec<f32> = identity
                    .iter()
                    .map(|&e| {
                        let n: f64 = rng.sample(StandardNormal);
                        (e as f64 + script.embed_noise * n) as f32
                    })
                    .collect();
                Embedding::new(v)?
            } else {
                Embedding::new(identity.clone())?
            };
            if !obj.dropped_frames.contains(&frame) {
                detections.push(Detection::new(
                    bbox,
                    script.confidence,
                    obj.class_id,
                    noisy.clone(),
                )?);
            }
            plants.push((noisy.as_slice().to_vec(), bbox));
        }
        let (feature_map, overlap) = plant_frame(&geom, &plants, &mut rng);
        overlap_total += overlap;
        gt_frames.push((frame, gt));
        frames.push(ScenarioFrame {
            detections,
            feature_map,
        });
    }

    let spec = ScenarioSpec {
        seed: script.seed,
        num_objects: script.objects.len(),
        num_frames: script.num_frames,
        geometry: geom,
        ..ScenarioSpec::default()
    };
    Ok(ScenarioBundle {
        spec,
        gt: trajectories_from_stream(&gt_frames, &geom),
        frames,
        overlap_cells: overlap_total,
    })
}

/// Decode heatmap-form detector output: strict 3x3 local maxima above `tau`
/// become detections, reading size from the regression map and the
/// embedding from the feature map at the same cell.
pub fn decode_detections(
    heatmap: &Array3<f32>,
    regmap: &Array3<f32>,
    embmap: &FeatureMap,
    tau: f64,
) -> Result<Vec<Detection>> {
    let g = embmap.geometry();
    let hs = heatmap.shape();
    if hs[0] != g.height || hs[1] != g.width {
        return Err(Error::GeometryMismatch {
            expected: g.to_string(),
            got: format!("heatmap {}x{}x{}", hs[0], hs[1], hs[2]),
        });
    }
    let rs = regmap.shape();
    if rs != [g.height, g.width, 2] {
        return Err(Error::GeometryMismatch {
            expected: format!("{}x{}x2", g.height, g.width),
            got: format!("regmap {}x{}x{}", rs[0], rs[1], rs[2]),
        });
    }
    let classes = hs[2];
    let mut out = Vec::new();
    for c in 0..classes {
        for y in 0..g.height {
            for x in 0..g.width {
                let score = heatmap[(y, x, c)];
                if (score as f64) <= tau {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= g.height as i64 || nx >= g.width as i64 {
                            continue;
                        }
                        if heatmap[(ny as usize, nx as usize, c)] >= score {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let bbox = BBox::new(
                    x as f64,
                    y as f64,
                    regmap[(y, x, 0)] as f64,
                    regmap[(y, x, 1)] as f64,
                )?;
                let embedding = Embedding::new(embmap.cell(x, y).to_vec())?;
                out.push(Detection::new(bbox, score as f64, c as u32, embedding)?);
            }
        }
    }
    Ok(out)
}

/// Keep frames 0, k, 2k, ... and re-index them consecutively, so effective
/// per-frame displacement scales by k. Ground truth is filtered identically.
pub fn subsample(bundle: &ScenarioBundle, k: usize) -> Result<ScenarioBundle> {
    if k == 0 {
        return Err(Error::invalid("subsample", "interval must be >= 1"));
    }
    if k > bundle.frames.len() {
        return Err(Error::invalid(
            "subsample",
            format!(
                "interval {k} larger than the {}-frame sequence",
                bundle.frames.len()
            ),
        ));
    }
    let frames: Vec<ScenarioFrame> = bundle.frames.iter().step_by(k).cloned().collect();
    let mut spec = bundle.spec.clone();
    spec.num_frames = frames.len();
    Ok(ScenarioBundle {
        spec,
        gt: subsample_trajectories(&bundle.gt, k),
        frames,
        overlap_cells: bundle.overlap_cells,
    })
}

/// The ground-truth half of [`subsample`].
pub fn subsample_trajectories(trajectories: &[Trajectory], k: usize) -> Vec<Trajectory> {
    trajectories
        .iter()
        .filter_map(|t| {
            let boxes: Vec<(u64, BBox)> = t
                .boxes
                .iter()
                .filter(|(f, _)| f % k as u64 == 0)
                .map(|&(f, b)| (f / k as u64, b))
                .collect();
            if boxes.is_empty() {
                None
            } else {
                Some(Trajectory::new(t.id, t.class_id, boxes).expect("order preserved"))
            }
        })
        .collect()
}
