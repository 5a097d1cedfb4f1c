//! Deterministic synthetic multi-view video with exact ground truth.
//!
//! A rigid object carries `K` landmarks and a few extra texture points. Each
//! point is rendered as an isotropic Gaussian splat at its projection, on top
//! of a flat background with static blobs placed away from the object. The
//! object follows a smooth sinusoidal rotation and translation, so frame to
//! frame motion stays small. Ground-truth flow blends the displacements of
//! the object points with Gaussian partition-of-unity weights and falls back
//! to zero (static background) away from them.

pub mod affine;
pub mod io;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraMatrix, Landmark3D, Mat3, Vec3};
use crate::flow::FlowField;
use crate::rng::{StreamKey, StreamRng};
use crate::tensor::{BoundingBox, Point2D, ScalarField};
use crate::{Error, Result};

pub use affine::{
    augment, elt_pair_from, elt_transform_pair, eval_transform, warp_crop, AffineTransform, AugmentParams, Augmented,
    EltParams, TransformPair, CROP_EXPAND,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Peak yaw, degrees.
    pub max_yaw_deg: f64,
    /// Peak pitch, degrees.
    pub max_pitch_deg: f64,
    /// Peak translation per axis, world units.
    pub max_translation: f64,
    /// Range of sinusoid periods, frames.
    pub period_min: f64,
    pub period_max: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            max_yaw_deg: 25.0,
            max_pitch_deg: 10.0,
            max_translation: 0.25,
            period_min: 40.0,
            period_max: 60.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    /// Landmark splat scale, pixels.
    pub landmark_sigma: f64,
    /// Extra object-anchored splats.
    pub texture_points: usize,
    pub background_blobs: usize,
    pub background_level: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            landmark_sigma: 2.0,
            texture_points: 6,
            background_blobs: 8,
            background_level: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Probability that a (frame, view) with `t >= 1` gets an occluder.
    pub fraction: f64,
    /// Occluder side, pixels.
    pub size: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { fraction: 0.0, size: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub landmarks: usize,
    pub views: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Cameras are spread evenly over `[-azimuth_span/2, azimuth_span/2]`.
    pub azimuth_span_deg: f64,
    /// Cameras alternate between `+elevation` and `-elevation`.
    pub elevation_deg: f64,
    /// Seeds the object shape, shared by every scene of a benchmark.
    pub object_seed: u64,
    /// Per-scene perturbation of the object shape, world units.
    pub object_jitter: f64,
    pub motion: MotionConfig,
    pub texture: TextureConfig,
    pub corruption: CorruptionConfig,
    /// Landmarks and texture must stay this many pixels inside the frame.
    pub margin: f64,
    /// Label noise applied when the labels are used for training, pixels.
    pub label_noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            landmarks: 5,
            views: 4,
            frames: 50,
            width: 64,
            height: 64,
            focal: 160.0,
            camera_distance: 8.0,
            azimuth_span_deg: 72.0,
            elevation_deg: 8.0,
            object_seed: 0,
            object_jitter: 0.03,
            motion: MotionConfig::default(),
            texture: TextureConfig::default(),
            corruption: CorruptionConfig::default(),
            margin: 8.0,
            label_noise_std: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks == 0 || self.views == 0 || self.frames == 0 {
            return Err(Error::Config("landmarks, views and frames must be >= 1".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("images must be at least 16x16".into()));
        }
        let positive = [
            ("focal", self.focal),
            ("camera_distance", self.camera_distance),
            ("landmark_sigma", self.texture.landmark_sigma),
            ("period_min", self.motion.period_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("object_jitter", self.object_jitter),
            ("max_yaw_deg", self.motion.max_yaw_deg),
            ("max_pitch_deg", self.motion.max_pitch_deg),
            ("max_translation", self.motion.max_translation),
            ("margin", self.margin),
            ("label_noise_std", self.label_noise_std),
            ("azimuth_span_deg", self.azimuth_span_deg),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.motion.period_max < self.motion.period_min {
            return Err(Error::Config("period_max must be >= period_min".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption.fraction) {
            return Err(Error::Config("corruption fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything known about one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub images: Vec<ScalarField>,
    /// `[view][landmark]`, pixels.
    pub landmarks_2d: Vec<Vec<Point2D>>,
    pub landmarks_3d: Vec<Landmark3D>,
    /// Per view, displacement from the previous frame; zero for frame 0.
    pub flows: Vec<FlowField>,
    pub bboxes: Vec<BoundingBox>,
}

/// An occluder pasted over landmark `landmark` in `(frame, view)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corruption {
    pub frame: usize,
    pub view: usize,
    pub landmark: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub cameras: Vec<CameraMatrix>,
    pub frames: Vec<FrameBundle>,
    pub corruptions: Vec<Corruption>,
}

/// Tight box around the landmarks grown by 25%.
pub const BBOX_EXPAND: f64 = 0.25;

pub fn landmark_bbox(points: &[Point2D]) -> Result<BoundingBox> {
    Ok(BoundingBox::around(points)?.expanded(BBOX_EXPAND))
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    r
}

fn apply(r: &Mat3, t: &Vec3, p: &Vec3) -> Vec3 {
    let mut out = *t;
    for i in 0..3 {
        out[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
    }
    out
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// A ring of cameras looking at the origin. World `y` points down so that an
/// unrotated camera sees an upright image.
pub fn camera_rig(config: &SceneConfig) -> Result<Vec<CameraMatrix>> {
    let m = config.views;
    let cx = (config.width as f64 - 1.0) / 2.0;
    let cy = (config.height as f64 - 1.0) / 2.0;
    (0..m)
        .map(|i| {
            let az = if m == 1 {
                0.0
            } else {
                (-0.5 + i as f64 / (m - 1) as f64) * config.azimuth_span_deg.to_radians()
            };
            let el = if i % 2 == 0 { 1.0 } else { -1.0 } * config.elevation_deg.to_radians();
            let d = config.camera_distance;
            let center = [d * az.sin() * el.cos(), d * el.sin(), -d * az.cos() * el.cos()];
            let fwd = normalize([-center[0], -center[1], -center[2]]);
            let right = normalize(cross(&[0.0, 1.0, 0.0], &fwd));
            let down = cross(&fwd, &right);
            let r = [right, down, fwd];
            let t = [
                -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
                -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
                -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
            ];
            CameraMatrix::from_pose(config.focal, cx, cy, &r, &t)
        })
        .collect()
}

/// Object-frame point with its rendering parameters.
#[derive(Clone, Copy, Debug)]
struct Splat {
    position: Vec3,
    contrast: f64,
    sigma: f64,
}

/// Smallest image distance between `p` and any of `others` over all views
/// and the given object rotations.
fn min_distance(p: &Vec3, others: &[Vec3], cameras: &[CameraMatrix], poses: &[Mat3]) -> f64 {
    let proj = |x: &Vec3| -> Vec<Point2D> {
        poses
            .iter()
            .flat_map(|r| {
                let y = apply(r, &[0.0; 3], x);
                cameras
                    .iter()
                    .filter_map(move |c| project(c, &Landmark3D::new(y[0], y[1], y[2])).ok())
            })
            .collect()
    };
    let pp = proj(p);
    others
        .iter()
        .flat_map(|q| {
            let pq = proj(q);
            pp.iter().zip(pq).map(|(a, b)| a.distance(&b)).collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn sample_points(
    rng: &mut StreamRng,
    n: usize,
    avoid: &[Vec3],
    min_sep: f64,
    cameras: &[CameraMatrix],
    poses: &[Mat3],
) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let p = [
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.3..0.3),
        ];
        attempts += 1;
        // Relax the spacing gradually if the box is too crowded.
        let sep = min_sep * 0.9f64.powi(attempts / 1000);
        if min_distance(&p, &out, cameras, poses) >= sep && min_distance(&p, avoid, cameras, poses) >= sep {
            out.push(p);
        }
    }
    out
}

/// The object shape: landmarks first, then texture points.
fn object_splats(config: &SceneConfig, cameras: &[CameraMatrix], scene_key: StreamKey) -> Vec<Splat> {
    let mut rng = StreamKey::root(config.object_seed).named("object").rng();
    // Spacing in pixels at the rest pose.
    let unit = config.focal / config.camera_distance;
    let (yaw, pitch) = (
        config.motion.max_yaw_deg.to_radians(),
        config.motion.max_pitch_deg.to_radians(),
    );
    let mut poses = Vec::new();
    for a in [-yaw, 0.0, yaw] {
        for b in [-pitch, 0.0, pitch] {
            poses.push(mat_mul(&rot_y(a), &rot_x(b)));
        }
    }
    let landmarks = sample_points(&mut rng, config.landmarks, &[], 0.45 * unit, cameras, &poses);
    let texture = sample_points(
        &mut rng,
        config.texture.texture_points,
        &landmarks,
        0.35 * unit,
        cameras,
        &poses,
    );
    let mut splats = Vec::with_capacity(landmarks.len() + texture.len());
    for (k, p) in landmarks.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        splats.push(Splat {
            position: *p,
            contrast: sign * rng.gen_range(0.6..1.0),
            sigma: config.texture.landmark_sigma,
        });
    }
    for p in &texture {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        splats.push(Splat {
            position: *p,
            contrast: sign * rng.gen_range(0.3..0.6),
            sigma: rng.gen_range(1.5..2.5),
        });
    }
    if config.object_jitter > 0.0 {
        let normal = Normal::new(0.0, config.object_jitter).expect("positive std");
        let mut jrng = scene_key.named("jitter").rng();
        for s in &mut splats {
            for c in &mut s.position {
                *c += normal.sample(&mut jrng);
            }
        }
    }
    splats
}

#[derive(Clone, Copy, Debug)]
struct Trajectory {
    amp: [f64; 5],
    period: [f64; 5],
    phase: [f64; 5],
}

impl Trajectory {
    fn sample(config: &SceneConfig, rng: &mut StreamRng) -> Self {
        let m = &config.motion;
        let caps = [
            m.max_yaw_deg.to_radians(),
            m.max_pitch_deg.to_radians(),
            m.max_translation,
            m.max_translation,
            m.max_translation * 0.5,
        ];
        let mut t = Trajectory {
            amp: [0.0; 5],
            period: [1.0; 5],
            phase: [0.0; 5],
        };
        for i in 0..5 {
            t.amp[i] = caps[i] * rng.gen_range(0.5..=1.0);
            t.period[i] = if m.period_max > m.period_min {
                rng.gen_range(m.period_min..m.period_max)
            } else {
                m.period_min
            };
            t.phase[i] = rng.gen_range(0.0..2.0 * PI);
        }
        t
    }

    fn pose(&self, frame: usize) -> (Mat3, Vec3) {
        let v: Vec<f64> = (0..5)
            .map(|i| self.amp[i] * (2.0 * PI * frame as f64 / self.period[i] + self.phase[i]).sin())
            .collect();
        (mat_mul(&rot_y(v[0]), &rot_x(v[1])), [v[2], v[3], v[4]])
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: Point2D,
    contrast: f64,
    sigma: f64,
}

fn splat_value(x: f64, y: f64, c: Point2D, contrast: f64, sigma: f64) -> f64 {
    let d2 = (x - c.x).powi(2) + (y - c.y).powi(2);
    contrast * (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Width of the flow partition-of-unity weights, pixels.
const FLOW_SPREAD: f64 = 3.0;
/// Weight of the zero-motion background in the flow blend.
const FLOW_FLOOR: f64 = 1e-3;

/// Continuous description of a scene, before rasterization.
struct World {
    cameras: Vec<CameraMatrix>,
    splats: Vec<Splat>,
    /// `[frame][view][splat]`.
    projected: Vec<Vec<Vec<Point2D>>>,
    /// `[frame][splat]`.
    positions: Vec<Vec<Vec3>>,
    background: Vec<Vec<Blob>>,
    /// `[frame][view]` occluder centre and level.
    occluders: Vec<Vec<Option<(Point2D, f64)>>>,
    corruptions: Vec<Corruption>,
    bg_level: f64,
    occluder_half: f64,
}

impl World {
    fn build(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let key = StreamKey::root(config.seed).named("scene");
        let cameras = camera_rig(config)?;
        let splats = object_splats(config, &cameras, key);
        let trajectory = Trajectory::sample(config, &mut key.named("motion").rng());
        let (w, h) = (config.width, config.height);
        let margin = config.margin;

        let mut projected = Vec::with_capacity(config.frames);
        let mut positions = Vec::with_capacity(config.frames);
        for t in 0..config.frames {
            let (r, tr) = trajectory.pose(t);
            let pts: Vec<Vec3> = splats.iter().map(|s| apply(&r, &tr, &s.position)).collect();
            let mut per_view = Vec::with_capacity(cameras.len());
            for (m, cam) in cameras.iter().enumerate() {
                let mut row = Vec::with_capacity(pts.len());
                for p in &pts {
                    if cam.homogeneous(p)[2] <= 0.0 {
                        return Err(Error::Infeasible(format!(
                            "frame {t}, view {m}: object behind the camera"
                        )));
                    }
                    let q = project(cam, &Landmark3D::new(p[0], p[1], p[2]))
                        .map_err(|e| Error::Infeasible(format!("frame {t}, view {m}: {e}")))?;
                    if q.x < margin || q.y < margin || q.x > w as f64 - 1.0 - margin || q.y > h as f64 - 1.0 - margin {
                        return Err(Error::Infeasible(format!(
                            "frame {t}, view {m}: object point at ({:.2}, {:.2}) leaves the {margin}-pixel margin",
                            q.x, q.y
                        )));
                    }
                    row.push(q);
                }
                per_view.push(row);
            }
            projected.push(per_view);
            positions.push(pts);
        }

        // Static background blobs kept clear of the object's footprint.
        let mut bg_rng = key.named("background").rng();
        let background: Vec<Vec<Blob>> = (0..cameras.len())
            .map(|m| {
                let all: Vec<Point2D> = projected
                    .iter()
                    .flat_map(|f: &Vec<Vec<Point2D>>| f[m].iter().copied())
                    .collect();
                let footprint = BoundingBox::around(&all).ok();
                let mut blobs = Vec::new();
                for _ in 0..config.texture.background_blobs {
                    for _attempt in 0..200 {
                        let c = Point2D::new(bg_rng.gen_range(0.0..w as f64), bg_rng.gen_range(0.0..h as f64));
                        let clear = footprint.is_none_or(|b| {
                            let dx = (b.x0 - c.x).max(c.x - b.x1).max(0.0);
                            let dy = (b.y0 - c.y).max(c.y - b.y1).max(0.0);
                            (dx * dx + dy * dy).sqrt() >= 8.0
                        });
                        if clear {
                            let sign = if bg_rng.gen_bool(0.5) { 0.3 } else { -0.3 };
                            blobs.push(Blob {
                                center: c,
                                contrast: sign * bg_rng.gen_range(0.5..1.0),
                                sigma: bg_rng.gen_range(2.0..4.0),
                            });
                            break;
                        }
                    }
                }
                blobs
            })
            .collect();

        let mut corruptions = Vec::new();
        let mut occluders: Vec<Vec<Option<(Point2D, f64)>>> = vec![vec![None; cameras.len()]; config.frames];
        if config.corruption.fraction > 0.0 {
            let mut c_rng = key.named("corruption").rng();
            for (t, row) in occluders.iter_mut().enumerate().skip(1) {
                for (m, slot) in row.iter_mut().enumerate() {
                    if c_rng.gen_bool(config.corruption.fraction) {
                        let k = c_rng.gen_range(0..config.landmarks);
                        let p = projected[t][m][k];
                        let c = Point2D::new(p.x + c_rng.gen_range(-2.0..2.0), p.y + c_rng.gen_range(-2.0..2.0));
                        let level = if c_rng.gen_bool(0.5) { 1.2 } else { -0.8 };
                        *slot = Some((c, level));
                        corruptions.push(Corruption {
                            frame: t,
                            view: m,
                            landmark: k,
                        });
                    }
                }
            }
        }
        Ok(World {
            cameras,
            splats,
            projected,
            positions,
            background,
            occluders,
            corruptions,
            bg_level: config.texture.background_level,
            occluder_half: config.corruption.size as f64 / 2.0,
        })
    }

    /// Intensity of view `m` at frame `t` at a continuous position.
    fn value(&self, t: usize, m: usize, x: f64, y: f64) -> f64 {
        if let Some((c, level)) = self.occluders[t][m] {
            if (x - c.x).abs() <= self.occluder_half && (y - c.y).abs() <= self.occluder_half {
                return level;
            }
        }
        let mut v = self.bg_level;
        for b in &self.background[m] {
            v += splat_value(x, y, b.center, b.contrast, b.sigma);
        }
        for (s, p) in self.splats.iter().zip(&self.projected[t][m]) {
            v += splat_value(x, y, *p, s.contrast, s.sigma);
        }
        v
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    let world = World::build(config)?;
    let (w, h) = (config.width, config.height);
    let k = config.landmarks;
    let views = world.cameras.len();
    let frames: Vec<FrameBundle> = (0..config.frames)
        .into_par_iter()
        .map(|t| {
            let mut images = Vec::with_capacity(views);
            let mut flows = Vec::with_capacity(views);
            let mut bboxes = Vec::with_capacity(views);
            let mut lm2d = Vec::with_capacity(views);
            for m in 0..views {
                let pts = &world.projected[t][m];
                images.push(ScalarField::from_fn(w, h, |x, y| world.value(t, m, x as f64, y as f64)));
                flows.push(if t == 0 {
                    FlowField::zeros(w, h)
                } else {
                    blended_flow(&world.projected[t - 1][m], pts, w, h)?
                });
                let lm: Vec<Point2D> = pts[..k].to_vec();
                bboxes.push(landmark_bbox(&lm)?);
                lm2d.push(lm);
            }
            Ok(FrameBundle {
                images,
                landmarks_2d: lm2d,
                landmarks_3d: world.positions[t][..k]
                    .iter()
                    .map(|p| Landmark3D::new(p[0], p[1], p[2]))
                    .collect(),
                flows,
                bboxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        config: *config,
        cameras: world.cameras,
        frames,
        corruptions: world.corruptions,
    })
}

/// Flow on the previous frame's grid from the motion of the object points.
fn blended_flow(prev: &[Point2D], curr: &[Point2D], w: usize, h: usize) -> Result<FlowField> {
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    let two_s2 = 2.0 * FLOW_SPREAD * FLOW_SPREAD;
    for y in 0..h {
        for x in 0..w {
            let (mut sw, mut su, mut sv) = (FLOW_FLOOR, 0.0, 0.0);
            for (p, c) in prev.iter().zip(curr) {
                let wt = (-((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)) / two_s2).exp();
                sw += wt;
                su += wt * (c.x - p.x);
                sv += wt * (c.y - p.y);
            }
            u[y * w + x] = su / sw;
            v[y * w + x] = sv / sw;
        }
    }
    FlowField::new(ScalarField::new(w, h, u)?, ScalarField::new(w, h, v)?)
}

/// Adds i.i.d. Gaussian noise of scale `std` to both coordinates.
pub fn perturb_annotations(labels: &[Point2D], std: f64, key: StreamKey) -> Result<Vec<Point2D>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Config(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(labels.to_vec());
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = key.rng();
    Ok(labels
        .iter()
        .map(|p| Point2D::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng)))
        .collect())
}
