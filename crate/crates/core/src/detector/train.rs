//! Two-stage training: detection loss only, then detection together with
//! registration (SBR) and triangulation (SBT) supervision on unlabeled video.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::batch::{Batch, BatchSampler, BatchSamplerState, BatchSpec, Quadruplet, Triplet, VideoShape};
use super::{gt_heatmap, Detector, DetectorConfig, DetectorMode, Forward, OutputGrad, Prediction};
use crate::camera::{reproject_with_jacobian, CameraMatrix, ViewObservationSet};
use crate::flow::{
    dense_flow_lk, forward_backward_check, interp_track_gradient, lk_track_gradient, track_landmark_interp,
    track_landmark_lk, warp_field_adjoint, warp_field_by_flow, FlowField, PatchSpec, TrackerKind,
};
use crate::metrics::{evaluate, EvalSample, MetricConfig};
use crate::rng::StreamKey;
use crate::supervision::{
    detection_loss_heatmap, detection_loss_regression, sbr_loss_coords, sbr_loss_heatmap, sbt_loss_heatmap,
    sbt_multiview_masked, HeatmapSet, LandmarkSet, LossWeights, Thresholds,
};
use crate::synth::affine::{augment, eval_transform, warp_crop, AffineTransform, AugmentParams};
use crate::synth::{perturb_annotations, Scene};
use crate::tensor::{BoundingBox, Point2D, ScalarField};
use crate::{Error, Result};

/// Frames in one registration clip.
const CLIP_LEN: usize = 3;
/// Grid step of the dense LK flow used for heatmap warping.
const DENSE_FLOW_STRIDE: usize = 4;

/// Where dense flow comes from when a dense field is needed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// LK tracks on a grid, upsampled.
    Lk,
    /// The generator's exact flow.
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the labeled pool.
    pub steps_per_epoch: usize,
    pub batch: BatchSpec,
    pub adam: AdamConfig,
    /// Learning-rate factor applied in stage 2.
    pub stage2_lr_scale: f64,
    /// Used in stage 2 only.
    pub weights: LossWeights,
    pub thresholds: Thresholds,
    pub tracker: TrackerKind,
    pub flow_source: FlowSource,
    pub patch: PatchSpec,
    /// Stop the registration gradient from reaching the source frame.
    pub stop_grad_source: bool,
    /// Heatmap detectors: triangulation loss on soft-argmax coordinates
    /// instead of on translated heatmaps.
    pub heatmap_sbt_coords: bool,
    pub augment: bool,
    /// Labeled samples evaluated for the per-epoch NME and P-error.
    pub log_samples: usize,
    pub log_p_error_pairs: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 20,
            stage2_epochs: 20,
            steps_per_epoch: 0,
            batch: BatchSpec::default(),
            adam: AdamConfig::default(),
            stage2_lr_scale: 1.0,
            weights: LossWeights::baseline(),
            thresholds: Thresholds::default(),
            tracker: TrackerKind::Lk,
            flow_source: FlowSource::Gt,
            patch: PatchSpec::default(),
            stop_grad_source: false,
            heatmap_sbt_coords: false,
            augment: true,
            log_samples: 32,
            log_p_error_pairs: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.stage2_lr_scale > 0.0) || !self.stage2_lr_scale.is_finite() {
            return Err(Error::Config("stage2_lr_scale must be positive".into()));
        }
        self.weights.validate()?;
        self.thresholds.validate()?;
        self.patch.validate()?;
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        if self.batch.n_labeled == 0 {
            return Err(Error::Config("n_labeled must be >= 1".into()));
        }
        if self.log_p_error_pairs == 0 {
            return Err(Error::Config("log_p_error_pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Weights in force during `epoch`.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        if epoch < self.stage1_epochs {
            LossWeights::baseline()
        } else {
            self.weights
        }
    }

    /// Batch composition for a weight setting: unlabeled groups are only
    /// drawn when their loss is active.
    pub fn batch_for(&self, w: &LossWeights) -> BatchSpec {
        BatchSpec {
            n_labeled: self.batch.n_labeled,
            n_triplets: if w.w_sbr > 0.0 { self.batch.n_triplets } else { 0 },
            n_quadruplets: if w.w_sbt > 0.0 { self.batch.n_quadruplets } else { 0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: ScalarField,
    pub bbox: BoundingBox,
    /// Training labels in image pixels, possibly noisy.
    pub labels: Vec<Point2D>,
}

/// One view of one unlabeled frame, with its evaluation crop.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoView {
    pub image: ScalarField,
    pub bbox: BoundingBox,
    pub crop: ScalarField,
    pub to_crop: AffineTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub cameras: Vec<CameraMatrix>,
    /// `[frame][view]`.
    pub frames: Vec<Vec<VideoView>>,
    /// `[frame][view]` flow from frame `t - 1` to `t`; frame 0 holds zeros.
    pub flows: Option<Vec<Vec<FlowField>>>,
    scene_flows: Vec<Vec<FlowField>>,
}

impl VideoData {
    pub fn from_scene(scene: &Scene, crop_size: usize) -> Result<Self> {
        let mut frames = Vec::with_capacity(scene.frames.len());
        for f in &scene.frames {
            let mut views = Vec::with_capacity(f.images.len());
            for (image, bbox) in f.images.iter().zip(&f.bboxes) {
                let to_crop = eval_transform(bbox, crop_size)?;
                views.push(VideoView {
                    crop: warp_crop(image, &to_crop, crop_size),
                    image: image.clone(),
                    bbox: *bbox,
                    to_crop,
                });
            }
            frames.push(views);
        }
        Ok(VideoData {
            cameras: scene.cameras.clone(),
            frames,
            flows: None,
            scene_flows: scene.frames.iter().map(|f| f.flows.clone()).collect(),
        })
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape {
            views: self.cameras.len(),
            frames: self.frames.len(),
        }
    }

    /// Fills [`VideoData::flows`] from `source`.
    pub fn prepare_flows(&mut self, source: FlowSource, patch: &PatchSpec) -> Result<()> {
        if self.flows.is_some() {
            return Ok(());
        }
        let flows = match source {
            FlowSource::Gt => self.scene_flows.clone(),
            FlowSource::Lk => {
                let mut all = Vec::with_capacity(self.frames.len());
                for t in 0..self.frames.len() {
                    let row = (0..self.cameras.len())
                        .into_par_iter()
                        .map(|m| {
                            let cur = &self.frames[t][m].image;
                            if t == 0 {
                                Ok(FlowField::zeros(cur.width(), cur.height()))
                            } else {
                                dense_flow_lk(&self.frames[t - 1][m].image, cur, patch, DENSE_FLOW_STRIDE)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    all.push(row);
                }
                all
            }
        };
        self.flows = Some(flows);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub labeled: Vec<LabeledSample>,
    pub video: Option<VideoData>,
    pub crop_size: usize,
}

/// Labeled samples from every (frame, view) of a scene, in frame-major
/// order. The first `fraction` of them are kept and each gets label noise.
pub fn labeled_from_scene(scene: &Scene, noise_std: f64, fraction: f64, key: StreamKey) -> Result<Vec<LabeledSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "data fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut all = Vec::new();
    for f in &scene.frames {
        for (m, image) in f.images.iter().enumerate() {
            all.push((image, f.bboxes[m], &f.landmarks_2d[m]));
        }
    }
    let keep = ((all.len() as f64 * fraction).round() as usize).clamp(1, all.len());
    let noise = key.named("noise");
    all.into_iter()
        .take(keep)
        .enumerate()
        .map(|(i, (image, bbox, labels))| {
            Ok(LabeledSample {
                image: image.clone(),
                bbox,
                labels: perturb_annotations(labels, noise_std, noise.indexed(i as u64))?,
            })
        })
        .collect()
}

impl TrainingData {
    /// Computes any dense flow the configuration will need.
    pub fn prepare(&mut self, cfg: &TrainConfig, mode: DetectorMode) -> Result<()> {
        let heatmap_sbr = mode == DetectorMode::Heatmap && cfg.weights.w_sbr > 0.0;
        let needs_flow =
            cfg.stage2_epochs > 0 && cfg.weights.w_sbr > 0.0 && (cfg.tracker == TrackerKind::Interp || heatmap_sbr);
        if let (true, Some(v)) = (needs_flow, self.video.as_mut()) {
            v.prepare_flows(cfg.flow_source, &cfg.patch)?;
        }
        Ok(())
    }

    fn video(&self) -> Result<&VideoData> {
        self.video
            .as_ref()
            .ok_or_else(|| Error::Config("unlabeled supervision needs a video scene".into()))
    }

    fn flows(&self) -> Result<&[Vec<FlowField>]> {
        self.video()?
            .flows
            .as_deref()
            .ok_or_else(|| Error::Config("dense flow was not prepared".into()))
    }

    pub fn eval_samples(&self, limit: usize) -> Vec<EvalSample<'_>> {
        self.labeled
            .iter()
            .take(limit)
            .map(|s| EvalSample {
                image: &s.image,
                bbox: s.bbox,
                gt: &s.labels,
            })
            .collect()
    }
}

/// Reliability flags used in one step, kept so that a gradient check can
/// hold them fixed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMasks {
    /// `[triplet][pair][landmark]`.
    pub sbr: Vec<Vec<Vec<bool>>>,
    /// `[quadruplet][view][landmark]`.
    pub sbt: Vec<Vec<Vec<bool>>>,
}

#[derive(Clone, Debug)]
pub struct StepEval {
    pub l_det: f64,
    pub l_sbr: f64,
    pub l_sbt: f64,
    pub total: f64,
    pub grads: Vec<f64>,
    pub masks: StepMasks,
}

impl StepEval {
    fn zero_fraction(flags: &[Vec<Vec<bool>>]) -> (usize, usize) {
        let mut zero = 0;
        let mut all = 0;
        for f in flags.iter().flatten().flatten() {
            all += 1;
            zero += usize::from(!f);
        }
        (zero, all)
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn transpose_mul(m: &[[f64; 2]; 2], g: [f64; 2]) -> [f64; 2] {
    [m[0][0] * g[0] + m[1][0] * g[1], m[0][1] * g[0] + m[1][1] * g[1]]
}

fn labels_set(points: Vec<Point2D>) -> Result<LandmarkSet> {
    LandmarkSet::new(points, 0, 0)
}

fn labeled_term(
    det: &Detector,
    sample: &LabeledSample,
    params: &AugmentParams,
    size: usize,
) -> Result<(f64, Vec<f64>)> {
    let aug = augment(&sample.image, &sample.bbox, &sample.labels, params, size)?;
    let fwd = det.forward(&aug.crop)?;
    let (loss, grad) = match &fwd.prediction {
        Prediction::Coords(c) => {
            let (l, g) = detection_loss_regression(&labels_set(c.clone())?, &labels_set(aug.labels)?)?;
            (l, OutputGrad::Coords(g))
        }
        Prediction::Heatmaps(maps) => {
            let f = det.config().feature_size();
            let hi = (f - 1) as f64;
            let targets = aug
                .labels
                .iter()
                .map(|p| {
                    // Labels pushed out of the crop by augmentation are pinned to its edge.
                    let q = Point2D::new((p.x / 2.0).clamp(0.0, hi), (p.y / 2.0).clamp(0.0, hi));
                    gt_heatmap(q, det.config().sigma_gt, f, f)
                })
                .collect::<Result<Vec<_>>>()?;
            let (l, g) = detection_loss_heatmap(&HeatmapSet::new(maps.clone())?, &HeatmapSet::new(targets)?)?;
            (l, OutputGrad::Heatmaps(g))
        }
    };
    let mut grads = vec![0.0; det.param_count()];
    det.backward(&fwd, &grad, &mut grads)?;
    Ok((loss, grads))
}

/// A video frame run through the detector.
struct FrameOut<'a> {
    view: &'a VideoView,
    /// Image-to-crop map of the crop the detector saw.
    to_crop: AffineTransform,
    fwd: Forward,
    /// Image-pixel detections.
    points: Vec<Point2D>,
    /// `d loss / d points`.
    grad_points: Vec<[f64; 2]>,
    /// Direct `d loss / d heatmaps`.
    grad_maps: Option<Vec<ScalarField>>,
}

impl<'a> FrameOut<'a> {
    /// Runs the detector on the evaluation crop, or on an augmented crop
    /// when `params` is given.
    fn run(det: &Detector, view: &'a VideoView, params: Option<&AugmentParams>) -> Result<Self> {
        let (fwd, to_crop) = match params {
            Some(p) => {
                let a = augment(&view.image, &view.bbox, &[], p, view.crop.width())?;
                (det.forward(&a.crop)?, a.to_crop)
            }
            None => (det.forward(&view.crop)?, view.to_crop),
        };
        let inv = to_crop.inverse();
        let points: Vec<Point2D> = det
            .coords_of(&fwd.prediction)
            .into_iter()
            .map(|c| inv.apply(c))
            .collect();
        let k = points.len();
        Ok(FrameOut {
            view,
            to_crop,
            fwd,
            points,
            grad_points: vec![[0.0; 2]; k],
            grad_maps: None,
        })
    }

    fn maps(&self) -> &[ScalarField] {
        match &self.fwd.prediction {
            Prediction::Heatmaps(m) => m,
            Prediction::Coords(_) => &[],
        }
    }

    /// Heatmap-grid position of an image point.
    fn to_map(&self, p: Point2D) -> Point2D {
        let c = self.to_crop.apply(p);
        Point2D::new(c.x / 2.0, c.y / 2.0)
    }

    /// Adds a gradient given with respect to heatmap-grid coordinates of
    /// landmark `k` as an image-point gradient.
    fn add_map_coord_grad(&mut self, k: usize, g: [f64; 2]) {
        let l = self.to_crop.linear();
        let half = [[l[0][0] / 2.0, l[0][1] / 2.0], [l[1][0] / 2.0, l[1][1] / 2.0]];
        let gi = transpose_mul(&half, g);
        self.grad_points[k][0] += gi[0];
        self.grad_points[k][1] += gi[1];
    }

    fn add_map_grads(&mut self, g: Vec<ScalarField>) -> Result<()> {
        match &mut self.grad_maps {
            None => self.grad_maps = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.samples_mut().iter_mut().zip(b.samples()) {
                        *x += y;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward(self, det: &Detector, grads: &mut [f64]) -> Result<()> {
        let li = self.to_crop.inverse().linear();
        let crop_grad: Vec<[f64; 2]> = self.grad_points.iter().map(|g| transpose_mul(&li, *g)).collect();
        let mut out = det.coord_grad_to_output(&self.fwd.prediction, &crop_grad)?;
        if let (OutputGrad::Heatmaps(h), Some(extra)) = (&mut out, self.grad_maps) {
            for (a, b) in h.iter_mut().zip(&extra) {
                for (x, y) in a.samples_mut().iter_mut().zip(b.samples()) {
                    *x += y;
                }
            }
        }
        det.backward(&self.fwd, &out, grads)
    }
}

/// Flow on the heatmap grid of `curr` that pulls `prev`'s heatmaps onto it,
/// given the image flow from `prev` to `curr`.
fn heatmap_flow(prev: &AffineTransform, curr: &AffineTransform, flow: &FlowField, size: usize) -> Result<FlowField> {
    let inv = curr.inverse();
    let mut u = vec![0.0; size * size];
    let mut v = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = inv.apply(Point2D::new(2.0 * x as f64, 2.0 * y as f64));
            // Invert the forward flow by fixed-point iteration.
            let mut s = p;
            for _ in 0..3 {
                s = p - flow.sample_zero_padded(s);
            }
            let c = prev.apply(s);
            u[y * size + x] = x as f64 - c.x / 2.0;
            v[y * size + x] = y as f64 - c.y / 2.0;
        }
    }
    FlowField::new(ScalarField::new(size, size, u)?, ScalarField::new(size, size, v)?)
}

/// Augmentation of the `slot`-th crop of an unlabeled group.
fn video_params(cfg: &TrainConfig, key: StreamKey, slot: usize) -> Option<AugmentParams> {
    cfg.augment
        .then(|| AugmentParams::sample(&mut key.indexed(slot as u64).rng()))
}

struct Track {
    point: Point2D,
    jacobian: [[f64; 2]; 2],
    ok: bool,
}

fn track(
    cfg: &TrainConfig,
    flows: Option<&[Vec<FlowField>]>,
    prev: &VideoView,
    curr: &VideoView,
    t_curr: usize,
    m: usize,
    x: Point2D,
) -> Result<Track> {
    let failed = Track {
        point: x,
        jacobian: [[0.0; 2]; 2],
        ok: false,
    };
    match cfg.tracker {
        TrackerKind::Lk => {
            let t = track_landmark_lk(&prev.image, &curr.image, x, &cfg.patch);
            if !(t.valid && t.converged) {
                return Ok(failed);
            }
            match lk_track_gradient(&prev.image, &curr.image, x, &cfg.patch) {
                Ok(j) => Ok(Track {
                    point: t.point,
                    jacobian: j,
                    ok: true,
                }),
                Err(_) => Ok(failed),
            }
        }
        TrackerKind::Interp => {
            let flow = &flows.ok_or_else(|| Error::Config("dense flow was not prepared".into()))?[t_curr][m];
            match (track_landmark_interp(flow, x), interp_track_gradient(flow, x)) {
                (Ok(p), Ok(j)) if curr.image.contains(&p) => Ok(Track {
                    point: p,
                    jacobian: j,
                    ok: true,
                }),
                _ => Ok(failed),
            }
        }
    }
}

fn sbr_term(
    det: &Detector,
    data: &TrainingData,
    tri: &Triplet,
    key: StreamKey,
    cfg: &TrainConfig,
    fixed: Option<&[Vec<bool>]>,
) -> Result<(f64, Vec<f64>, Vec<Vec<bool>>)> {
    let video = data.video()?;
    let end = (tri.start + CLIP_LEN).min(video.frames.len());
    let m = tri.view;
    let mut outs = (tri.start..end)
        .map(|t| FrameOut::run(det, &video.frames[t][m], video_params(cfg, key, t - tri.start).as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let heatmaps = det.config().mode == DetectorMode::Heatmap;
    let flows = if heatmaps || cfg.tracker == TrackerKind::Interp {
        Some(data.flows()?)
    } else {
        None
    };
    let k_count = det.config().landmarks;
    let mut loss = 0.0;
    let mut all_flags = Vec::new();
    for i in 0..outs.len().saturating_sub(1) {
        let t_curr = tri.start + i + 1;
        let (head, tail) = outs.split_at_mut(i + 1);
        let (a, b) = (&mut head[i], &mut tail[0]);
        let mut tracks = Vec::with_capacity(k_count);
        let mut flags = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let tr = track(cfg, flows, a.view, b.view, t_curr, m, a.points[k])?;
            let flag = tr.ok
                && match fixed {
                    Some(f) => f[i][k],
                    None => {
                        forward_backward_check(
                            &a.view.image,
                            &b.view.image,
                            a.points[k],
                            tr.point,
                            b.points[k],
                            &b.view.bbox,
                            &cfg.thresholds,
                            &cfg.patch,
                        )
                        .reliable
                    }
                };
            flags.push(flag);
            tracks.push(tr);
        }
        if heatmaps {
            let f = det.config().feature_size();
            let hflow = heatmap_flow(&a.to_crop, &b.to_crop, &flows.expect("heatmap flows")[t_curr][m], f)?;
            let warped = a
                .maps()
                .iter()
                .map(|mp| warp_field_by_flow(mp, &hflow))
                .collect::<Result<Vec<_>>>()?;
            let r = sbr_loss_heatmap(&HeatmapSet::new(b.maps().to_vec())?, &HeatmapSet::new(warped)?, &flags)?;
            loss += r.loss;
            b.add_map_grads(r.grad_a)?;
            if !cfg.stop_grad_source {
                let back = r
                    .grad_b
                    .iter()
                    .map(|g| warp_field_adjoint(g, &hflow))
                    .collect::<Result<Vec<_>>>()?;
                a.add_map_grads(back)?;
            }
        } else {
            let tracked = labels_set(tracks.iter().map(|t| t.point).collect())?;
            let r = sbr_loss_coords(&labels_set(b.points.clone())?, &tracked, &flags)?;
            loss += r.loss;
            for k in 0..k_count {
                b.grad_points[k][0] += r.grad_a[k][0];
                b.grad_points[k][1] += r.grad_a[k][1];
                if !cfg.stop_grad_source && flags[k] {
                    let g = transpose_mul(&tracks[k].jacobian, r.grad_b[k]);
                    a.grad_points[k][0] += g[0];
                    a.grad_points[k][1] += g[1];
                }
            }
        }
        all_flags.push(flags);
    }
    let mut grads = vec![0.0; det.param_count()];
    for o in outs {
        o.backward(det, &mut grads)?;
    }
    Ok((loss, grads, all_flags))
}

fn sbt_term(
    det: &Detector,
    data: &TrainingData,
    quad: &Quadruplet,
    key: StreamKey,
    cfg: &TrainConfig,
    fixed: Option<&[Vec<bool>]>,
) -> Result<(f64, Vec<f64>, Vec<Vec<bool>>)> {
    let video = data.video()?;
    let mut outs = quad
        .views
        .iter()
        .enumerate()
        .map(|(j, &m)| FrameOut::run(det, &video.frames[quad.frame][m], video_params(cfg, key, j).as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let cameras: Vec<CameraMatrix> = quad.views.iter().map(|&m| video.cameras[m]).collect();
    let scales: Vec<f64> = outs.iter().map(|o| o.view.bbox.scale()).collect();
    let k_count = det.config().landmarks;
    let n = outs.len();
    let heatmap_maps = det.config().mode == DetectorMode::Heatmap && !cfg.heatmap_sbt_coords;
    let (loss, flags) = if !heatmap_maps {
        let dets: Vec<&[Point2D]> = outs.iter().map(|o| o.points.as_slice()).collect();
        let r = sbt_multiview_masked(&dets, &cameras, &scales, &cfg.thresholds, fixed)?;
        for (o, g) in outs.iter_mut().zip(&r.grads) {
            for k in 0..k_count {
                o.grad_points[k][0] += g[k][0];
                o.grad_points[k][1] += g[k][1];
            }
        }
        (r.loss, r.flags)
    } else {
        let mut reproj: Vec<Vec<Point2D>> = outs.iter().map(|o| o.points.clone()).collect();
        let mut blocks = vec![None; k_count];
        let mut flags = vec![vec![false; k_count]; n];
        for k in 0..k_count {
            let pts: Vec<Point2D> = outs.iter().map(|o| o.points[k]).collect();
            let obs = ViewObservationSet::new(cameras.clone(), pts.clone())?;
            let Ok(rep) = reproject_with_jacobian(&obs) else {
                continue;
            };
            for v in 0..n {
                reproj[v][k] = rep.points[v];
                flags[v][k] = match fixed {
                    Some(f) => f[v][k],
                    None => pts[v].distance(&rep.points[v]) <= cfg.thresholds.t_tri_frac * scales[v],
                };
            }
            blocks[k] = Some(rep.blocks);
        }
        let mut loss = 0.0;
        // Image-point gradients collected first so the reprojection chain
        // can reach every view.
        let mut grad_reproj = vec![vec![[0.0; 2]; k_count]; n];
        for v in 0..n {
            let o = &mut outs[v];
            let det_map = labels_set(o.points.iter().map(|p| o.to_map(*p)).collect())?;
            let rep_map = labels_set(reproj[v].iter().map(|p| o.to_map(*p)).collect())?;
            let r = sbt_loss_heatmap(&HeatmapSet::new(o.maps().to_vec())?, &det_map, &rep_map, &flags[v])?;
            loss += r.loss;
            o.add_map_grads(r.grad_maps)?;
            for k in 0..k_count {
                o.add_map_coord_grad(k, r.grad_det[k]);
                let l = o.to_crop.linear();
                let half = [[l[0][0] / 2.0, l[0][1] / 2.0], [l[1][0] / 2.0, l[1][1] / 2.0]];
                grad_reproj[v][k] = transpose_mul(&half, r.grad_reproj[k]);
            }
        }
        for k in 0..k_count {
            let Some(b) = &blocks[k] else { continue };
            for v in 0..n {
                for j in 0..n {
                    let g = transpose_mul(&b[v][j], grad_reproj[v][k]);
                    outs[j].grad_points[k][0] += g[0];
                    outs[j].grad_points[k][1] += g[1];
                }
            }
        }
        (loss, flags)
    };
    let mut grads = vec![0.0; det.param_count()];
    for o in outs {
        o.backward(det, &mut grads)?;
    }
    Ok((loss, grads, flags))
}

/// Loss and parameter gradient for one batch. With `masks`, the reliability
/// flags are taken from there instead of being recomputed.
pub fn step_objective(
    det: &Detector,
    data: &TrainingData,
    batch: &Batch,
    augment_key: StreamKey,
    cfg: &TrainConfig,
    weights: &LossWeights,
    masks: Option<&StepMasks>,
) -> Result<StepEval> {
    let size = data.crop_size;
    let labeled: Vec<(f64, Vec<f64>)> = batch
        .labeled
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let params = if cfg.augment {
                AugmentParams::sample(&mut augment_key.indexed(slot as u64).rng())
            } else {
                AugmentParams::identity()
            };
            labeled_term(det, &data.labeled[i], &params, size)
        })
        .collect::<Result<_>>()?;
    let mut grads = vec![0.0; det.param_count()];
    let mut l_det = 0.0;
    for (l, g) in &labeled {
        l_det += l;
        add_into(&mut grads, g);
    }
    if !labeled.is_empty() {
        let s = 1.0 / labeled.len() as f64;
        l_det *= s;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    let mut out = StepEval {
        l_det,
        l_sbr: 0.0,
        l_sbt: 0.0,
        total: 0.0,
        grads,
        masks: StepMasks::default(),
    };

    if weights.w_sbr > 0.0 && !batch.triplets.is_empty() {
        let terms: Vec<_> = batch
            .triplets
            .par_iter()
            .enumerate()
            .map(|(i, tri)| {
                sbr_term(
                    det,
                    data,
                    tri,
                    augment_key.named("sbr").indexed(i as u64),
                    cfg,
                    masks.map(|m| m.sbr[i].as_slice()),
                )
            })
            .collect::<Result<_>>()?;
        let s = 1.0 / terms.len() as f64;
        let mut acc = vec![0.0; det.param_count()];
        for (l, g, f) in terms {
            out.l_sbr += l;
            add_into(&mut acc, &g);
            out.masks.sbr.push(f);
        }
        out.l_sbr *= s;
        for (o, a) in out.grads.iter_mut().zip(&acc) {
            *o += weights.w_sbr * s * a;
        }
    }
    if weights.w_sbt > 0.0 && !batch.quadruplets.is_empty() {
        let terms: Vec<_> = batch
            .quadruplets
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                sbt_term(
                    det,
                    data,
                    q,
                    augment_key.named("sbt").indexed(i as u64),
                    cfg,
                    masks.map(|m| m.sbt[i].as_slice()),
                )
            })
            .collect::<Result<_>>()?;
        let s = 1.0 / terms.len() as f64;
        let mut acc = vec![0.0; det.param_count()];
        for (l, g, f) in terms {
            out.l_sbt += l;
            add_into(&mut acc, &g);
            out.masks.sbt.push(f);
        }
        out.l_sbt *= s;
        for (o, a) in out.grads.iter_mut().zip(&acc) {
            *o += weights.w_sbt * s * a;
        }
    }
    out.total = out.l_det + weights.w_sbr * out.l_sbr + weights.w_sbt * out.l_sbt;
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub l_det: f64,
    pub l_sbr: f64,
    pub l_sbt: f64,
    pub beta_sbr_zero_frac: f64,
    pub beta_sbt_zero_frac: f64,
    pub nme: f64,
    pub p_error: f64,
    pub w_sbr: f64,
    pub w_sbt: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub detector: Detector,
    pub adam: AdamState,
    pub sampler: BatchSamplerState,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn fresh(config: DetectorConfig, key: StreamKey) -> Result<Self> {
        let detector = Detector::init(config, key.named("init"))?;
        let n = detector.param_count();
        let probe = BatchSampler::new(key.named("batch"), 0, VideoShape { views: 0, frames: 0 });
        Ok(TrainState {
            detector,
            adam: AdamState::new(n),
            sampler: probe.state(),
            step: 0,
            epoch: 0,
            log: Vec::new(),
        })
    }
}

fn check_data(data: &TrainingData, det: &DetectorConfig, cfg: &TrainConfig) -> Result<()> {
    if data.labeled.is_empty() {
        return Err(Error::Config("no labeled training samples".into()));
    }
    if data.crop_size != det.arch.input_size {
        return Err(Error::Config(format!(
            "crop size {} does not match the detector input {}",
            data.crop_size, det.arch.input_size
        )));
    }
    for s in &data.labeled {
        if s.labels.len() != det.landmarks {
            return Err(Error::Config(format!(
                "labeled sample has {} landmarks, detector expects {}",
                s.labels.len(),
                det.landmarks
            )));
        }
    }
    if cfg.stage2_epochs > 0 && (cfg.weights.w_sbr > 0.0 || cfg.weights.w_sbt > 0.0) {
        let v = data.video()?;
        if cfg.weights.w_sbr > 0.0 && v.frames.len() < CLIP_LEN {
            return Err(Error::Config(format!(
                "registration needs at least {CLIP_LEN} video frames"
            )));
        }
        if cfg.weights.w_sbt > 0.0 && v.cameras.len() < 2 {
            return Err(Error::Config("triangulation needs at least 2 views".into()));
        }
        if cfg.weights.w_sbr > 0.0 && (det.mode == DetectorMode::Heatmap || cfg.tracker == TrackerKind::Interp) {
            data.flows()?;
        }
    }
    Ok(())
}

pub fn steps_per_epoch(cfg: &TrainConfig, labeled: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        labeled.div_ceil(cfg.batch.n_labeled).max(1)
    }
}

/// Runs the remaining epochs of `state`. `on_epoch` sees the state after
/// every completed epoch.
pub fn train<F>(
    data: &TrainingData,
    cfg: &TrainConfig,
    mut state: TrainState,
    key: StreamKey,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    check_data(data, state.detector.config(), cfg)?;
    let shape = data
        .video
        .as_ref()
        .map_or(VideoShape { views: 0, frames: 0 }, |v| v.shape());
    let mut sampler = BatchSampler::restore(key.named("batch"), data.labeled.len(), shape, state.sampler);
    let steps = steps_per_epoch(cfg, data.labeled.len());
    let metric_cfg = MetricConfig {
        p_error_pairs: cfg.log_p_error_pairs,
        ..MetricConfig::default()
    };
    let size = data.crop_size;
    while state.epoch < cfg.total_epochs() {
        let epoch = state.epoch;
        let weights = cfg.weights_at(epoch);
        let spec = cfg.batch_for(&weights);
        let adam_cfg = if epoch < cfg.stage1_epochs {
            cfg.adam
        } else {
            AdamConfig {
                learning_rate: cfg.adam.learning_rate * cfg.stage2_lr_scale,
                ..cfg.adam
            }
        };
        let (mut l_det, mut l_sbr, mut l_sbt) = (0.0, 0.0, 0.0);
        let (mut sbr_zero, mut sbr_all, mut sbt_zero, mut sbt_all) = (0, 0, 0, 0);
        for _ in 0..steps {
            let batch = sampler.next_batch(&spec)?;
            let eval = step_objective(
                &state.detector,
                data,
                &batch,
                key.named("augment").indexed(state.step),
                cfg,
                &weights,
                None,
            )?;
            if !eval.grads.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite("parameter gradient"));
            }
            adam_step(state.detector.params_mut(), &eval.grads, &mut state.adam, &adam_cfg)?;
            state.step += 1;
            l_det += eval.l_det;
            l_sbr += eval.l_sbr;
            l_sbt += eval.l_sbt;
            let (z, a) = StepEval::zero_fraction(&eval.masks.sbr);
            sbr_zero += z;
            sbr_all += a;
            let (z, a) = StepEval::zero_fraction(&eval.masks.sbt);
            sbt_zero += z;
            sbt_all += a;
        }
        let frac = |z: usize, a: usize| if a == 0 { 0.0 } else { z as f64 / a as f64 };
        let det = &state.detector;
        let summary = evaluate(
            |_, crop: &ScalarField, _: &AffineTransform| det.predict_coords(crop),
            &data.eval_samples(cfg.log_samples.max(1)),
            size,
            &metric_cfg,
            key.named("elt").indexed(epoch as u64),
        )?;
        let s = steps as f64;
        state.log.push(EpochLog {
            epoch,
            stage: if epoch < cfg.stage1_epochs { 1 } else { 2 },
            l_det: l_det / s,
            l_sbr: l_sbr / s,
            l_sbt: l_sbt / s,
            beta_sbr_zero_frac: frac(sbr_zero, sbr_all),
            beta_sbt_zero_frac: frac(sbt_zero, sbt_all),
            nme: summary.nme,
            p_error: summary.p_error,
            w_sbr: weights.w_sbr,
            w_sbt: weights.w_sbt,
        });
        state.epoch += 1;
        state.sampler = sampler.state();
        log::info!(
            "epoch {epoch}: l_det {:.4} l_sbr {:.4} l_sbt {:.4} nme {:.4}",
            l_det / s,
            l_sbr / s,
            l_sbt / s,
            summary.nme
        );
        on_epoch(&state)?;
    }
    Ok(state)
}
