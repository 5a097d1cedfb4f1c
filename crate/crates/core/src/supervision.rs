//! Detection, registration and triangulation losses.
//!
//! Coordinate losses are masked L1 distances; heatmap losses are sums of
//! per-map Frobenius norms. Every loss returns its analytic gradient with
//! respect to each differentiable argument.

use serde::{Deserialize, Serialize};

use crate::camera::{reproject_with_jacobian, CameraMatrix, ViewObservationSet};
use crate::tensor::{Displacement2D, Point2D, ScalarField};
use crate::{Error, Result};

/// Gradient with respect to a set of points, one `[d/dx, d/dy]` per landmark.
pub type CoordGrad = Vec<[f64; 2]>;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    coords: Vec<Point2D>,
    pub view: usize,
    pub frame: usize,
}

impl LandmarkSet {
    pub fn new(coords: Vec<Point2D>, view: usize, frame: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("landmark set"));
        }
        if !coords.iter().all(Point2D::is_finite) {
            return Err(Error::NonFinite("landmark coordinates"));
        }
        Ok(LandmarkSet { coords, view, frame })
    }

    pub fn coords(&self) -> &[Point2D] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    maps: Vec<ScalarField>,
}

impl HeatmapSet {
    pub fn new(maps: Vec<ScalarField>) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("heatmap set"))?;
        if !maps.iter().all(|m| m.same_shape(first)) {
            return Err(Error::Shape("heatmaps differ in size".into()));
        }
        Ok(HeatmapSet { maps })
    }

    pub fn maps(&self) -> &[ScalarField] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<ScalarField> {
        self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Per-landmark reliability indicators for the two unlabeled losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReliabilityMask {
    pub sbr_flags: Vec<bool>,
    pub sbt_flags: Vec<bool>,
}

impl ReliabilityMask {
    pub fn all(k: usize) -> Self {
        ReliabilityMask {
            sbr_flags: vec![true; k],
            sbt_flags: vec![true; k],
        }
    }

    pub fn none(k: usize) -> Self {
        ReliabilityMask {
            sbr_flags: vec![false; k],
            sbt_flags: vec![false; k],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_sbr: f64,
    pub w_sbt: f64,
}

impl LossWeights {
    pub fn new(w_sbr: f64, w_sbt: f64) -> Result<Self> {
        let w = LossWeights { w_sbr, w_sbt };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_sbr", self.w_sbr), ("w_sbt", self.w_sbt)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn baseline() -> Self {
        LossWeights { w_sbr: 0.0, w_sbt: 0.0 }
    }

    pub fn sbr() -> Self {
        LossWeights { w_sbr: 1.0, w_sbt: 0.0 }
    }

    pub fn sbt() -> Self {
        LossWeights { w_sbr: 0.0, w_sbt: 1.0 }
    }

    pub fn srt() -> Self {
        LossWeights { w_sbr: 0.5, w_sbt: 0.5 }
    }
}

/// Rejection thresholds as fractions of the bounding-box scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub t_fb_frac: f64,
    pub t_d_frac: f64,
    pub t_tri_frac: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t_fb_frac: 0.01,
            t_d_frac: 0.01,
            t_tri_frac: 0.01,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_fb_frac", self.t_fb_frac),
            ("t_d_frac", self.t_d_frac),
            ("t_tri_frac", self.t_tri_frac),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss of a symmetric pair term with the gradient for each side.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss<G> {
    pub loss: f64,
    pub grad_a: G,
    pub grad_b: G,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_k(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("landmark counts differ: {a} vs {b}")));
    }
    Ok(())
}

fn masked_l1(a: &[Point2D], b: &[Point2D], flags: &[bool]) -> Result<PairLoss<CoordGrad>> {
    check_k(a.len(), b.len())?;
    check_k(a.len(), flags.len())?;
    let mut loss = 0.0;
    let mut grad_a = vec![[0.0; 2]; a.len()];
    let mut grad_b = vec![[0.0; 2]; a.len()];
    for k in 0..a.len() {
        if !flags[k] {
            continue;
        }
        let d = a[k] - b[k];
        loss += d.l1();
        grad_a[k] = [sign(d.dx), sign(d.dy)];
        grad_b[k] = [-sign(d.dx), -sign(d.dy)];
    }
    Ok(PairLoss { loss, grad_a, grad_b })
}

/// `sum_k |pred_k - gt_k|_1`; returns the gradient with respect to `pred`.
pub fn detection_loss_regression(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<(f64, CoordGrad)> {
    let flags = vec![true; pred.len()];
    let r = masked_l1(pred.coords(), gt.coords(), &flags)?;
    Ok((r.loss, r.grad_a))
}

fn frobenius_pair(a: &ScalarField, b: &ScalarField) -> Result<(f64, ScalarField)> {
    if !a.same_shape(b) {
        return Err(Error::Shape("heatmaps differ in size".into()));
    }
    let diff: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(x, y)| x - y).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad = if norm > 0.0 {
        diff.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; diff.len()]
    };
    Ok((norm, ScalarField::new(a.width(), a.height(), grad)?))
}

fn masked_frobenius(a: &HeatmapSet, b: &HeatmapSet, flags: &[bool]) -> Result<PairLoss<Vec<ScalarField>>> {
    check_k(a.len(), b.len())?;
    check_k(a.len(), flags.len())?;
    let mut loss = 0.0;
    let mut grad_a = Vec::with_capacity(a.len());
    let mut grad_b = Vec::with_capacity(a.len());
    for (k, (ma, mb)) in a.maps().iter().zip(b.maps()).enumerate() {
        if !ma.same_shape(mb) {
            return Err(Error::Shape("heatmaps differ in size".into()));
        }
        if !flags[k] {
            grad_a.push(ScalarField::zeros(ma.width(), ma.height()));
            grad_b.push(ScalarField::zeros(ma.width(), ma.height()));
            continue;
        }
        let (n, g) = frobenius_pair(ma, mb)?;
        loss += n;
        let neg: Vec<f64> = g.samples().iter().map(|v| -v).collect();
        grad_b.push(ScalarField::new(g.width(), g.height(), neg)?);
        grad_a.push(g);
    }
    Ok(PairLoss { loss, grad_a, grad_b })
}

/// `sum_k ||M_k - M*_k||_F`; returns the gradient with respect to `pred`.
pub fn detection_loss_heatmap(pred: &HeatmapSet, gt: &HeatmapSet) -> Result<(f64, Vec<ScalarField>)> {
    let flags = vec![true; pred.len()];
    let r = masked_frobenius(pred, gt, &flags)?;
    Ok((r.loss, r.grad_a))
}

/// `sum_k beta_k ||L_k - L~_k||_1`. `grad_a` is for the detections, `grad_b`
/// for the tracked points.
pub fn sbr_loss_coords(det_curr: &LandmarkSet, tracked: &LandmarkSet, flags: &[bool]) -> Result<PairLoss<CoordGrad>> {
    masked_l1(det_curr.coords(), tracked.coords(), flags)
}

/// `sum_k beta_k ||M_k - M~_k||_F` against warped previous-frame heatmaps.
pub fn sbr_loss_heatmap(
    maps_curr: &HeatmapSet,
    warped_prev: &HeatmapSet,
    flags: &[bool],
) -> Result<PairLoss<Vec<ScalarField>>> {
    masked_frobenius(maps_curr, warped_prev, flags)
}

/// `beta_k = 0` exactly when the reprojection is farther than
/// `t_tri_frac * bbox_scale` from the detection.
pub fn sbt_reliability(det: &LandmarkSet, reproj: &LandmarkSet, bbox_scale: f64, th: &Thresholds) -> Vec<bool> {
    reliability_flags(det.coords(), reproj.coords(), th.t_tri_frac * bbox_scale)
}

fn reliability_flags(det: &[Point2D], reproj: &[Point2D], limit: f64) -> Vec<bool> {
    det.iter().zip(reproj).map(|(d, r)| d.distance(r) <= limit).collect()
}

/// `sum_k beta_k ||L_k - L^_k||_1`. `grad_a` is for the detections, `grad_b`
/// for the reprojections.
pub fn sbt_loss_coords(det: &LandmarkSet, reproj: &LandmarkSet, flags: &[bool]) -> Result<PairLoss<CoordGrad>> {
    masked_l1(det.coords(), reproj.coords(), flags)
}

/// Translates a map by `d`: `out(x) = map(x - d)`, zero outside.
pub fn shift_map(map: &ScalarField, d: Displacement2D) -> ScalarField {
    ScalarField::from_fn(map.width(), map.height(), |x, y| {
        map.sample_zero_padded(Point2D::new(x as f64 - d.dx, y as f64 - d.dy))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbtHeatmapLoss {
    pub loss: f64,
    pub grad_maps: Vec<ScalarField>,
    pub grad_det: CoordGrad,
    pub grad_reproj: CoordGrad,
}

/// `sum_k beta_k ||M_k - M^_k||_F` where `M^_k` is `M_k` translated by the
/// displacement from the detection to the reprojection.
pub fn sbt_loss_heatmap(
    maps: &HeatmapSet,
    det: &LandmarkSet,
    reproj: &LandmarkSet,
    flags: &[bool],
) -> Result<SbtHeatmapLoss> {
    check_k(maps.len(), det.len())?;
    check_k(maps.len(), reproj.len())?;
    check_k(maps.len(), flags.len())?;
    let k_count = maps.len();
    let mut out = SbtHeatmapLoss {
        loss: 0.0,
        grad_maps: Vec::with_capacity(k_count),
        grad_det: vec![[0.0; 2]; k_count],
        grad_reproj: vec![[0.0; 2]; k_count],
    };
    for k in 0..k_count {
        let m = &maps.maps()[k];
        let (w, h) = (m.width(), m.height());
        if !flags[k] {
            out.grad_maps.push(ScalarField::zeros(w, h));
            continue;
        }
        let d = reproj.coords()[k] - det.coords()[k];
        let shifted = shift_map(m, d);
        let (norm, g) = frobenius_pair(m, &shifted)?;
        out.loss += norm;
        // d loss / d M = g - S^T g, and d loss / d d = sum g(x) grad M(x - d).
        let mut gm = g.samples().to_vec();
        let mut gd = [0.0; 2];
        for y in 0..h {
            for x in 0..w {
                let gv = g.get(x, y);
                if gv == 0.0 {
                    continue;
                }
                let src = Point2D::new(x as f64 - d.dx, y as f64 - d.dy);
                for (i, wt, wx, wy) in m.padded_stencil(src).taps() {
                    gm[i] -= gv * wt;
                    gd[0] += gv * wx * m.samples()[i];
                    gd[1] += gv * wy * m.samples()[i];
                }
            }
        }
        out.grad_maps.push(ScalarField::new(w, h, gm)?);
        out.grad_reproj[k] = gd;
        out.grad_det[k] = [-gd[0], -gd[1]];
    }
    Ok(out)
}

/// `l_det + w_sbr l_sbr + w_sbt l_sbt`.
pub fn total_loss(det_loss: f64, sbr_loss: f64, sbt_loss: f64, w: &LossWeights) -> f64 {
    det_loss + w.w_sbr * sbr_loss + w.w_sbt * sbt_loss
}

/// Triangulation supervision over all views of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSbt {
    pub loss: f64,
    /// `[view][landmark]` gradient with respect to each view's detections,
    /// including the terms that flow through the triangulated point.
    pub grads: Vec<CoordGrad>,
    /// Reprojections, `[view][landmark]`; detections are reused where the
    /// landmark could not be triangulated.
    pub reproj: Vec<Vec<Point2D>>,
    /// `[view][landmark]` reliability flags.
    pub flags: Vec<Vec<bool>>,
}

/// Triangulates every landmark from all views' detections, reprojects and
/// applies the masked L1 loss. Gradients reach each view both directly and
/// through the reprojections. Landmarks whose triangulation is degenerate
/// are skipped.
pub fn sbt_multiview(
    dets: &[&[Point2D]],
    cameras: &[CameraMatrix],
    bbox_scales: &[f64],
    th: &Thresholds,
) -> Result<MultiViewSbt> {
    sbt_multiview_masked(dets, cameras, bbox_scales, th, None)
}

/// [`sbt_multiview`] with the `[view][landmark]` flags optionally given
/// instead of computed.
pub fn sbt_multiview_masked(
    dets: &[&[Point2D]],
    cameras: &[CameraMatrix],
    bbox_scales: &[f64],
    th: &Thresholds,
    fixed: Option<&[Vec<bool>]>,
) -> Result<MultiViewSbt> {
    let views = dets.len();
    check_k(views, cameras.len())?;
    check_k(views, bbox_scales.len())?;
    let k_count = dets.first().map(|d| d.len()).ok_or(Error::Empty("views"))?;
    for d in dets {
        check_k(d.len(), k_count)?;
    }
    if let Some(f) = fixed {
        check_k(f.len(), views)?;
        for row in f {
            check_k(row.len(), k_count)?;
        }
    }
    let mut out = MultiViewSbt {
        loss: 0.0,
        grads: vec![vec![[0.0; 2]; k_count]; views],
        reproj: dets.iter().map(|d| d.to_vec()).collect(),
        flags: vec![vec![false; k_count]; views],
    };
    if views < 2 {
        return Ok(out);
    }
    for k in 0..k_count {
        let points: Vec<Point2D> = dets.iter().map(|d| d[k]).collect();
        let obs = ViewObservationSet::new(cameras.to_vec(), points.clone())?;
        let rep = match reproject_with_jacobian(&obs) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("landmark {k} skipped for triangulation: {e}");
                continue;
            }
        };
        for m in 0..views {
            out.reproj[m][k] = rep.points[m];
            out.flags[m][k] = match fixed {
                Some(f) => f[m][k],
                None => points[m].distance(&rep.points[m]) <= th.t_tri_frac * bbox_scales[m],
            };
        }
        for m in 0..views {
            if !out.flags[m][k] {
                continue;
            }
            let d = points[m] - rep.points[m];
            out.loss += d.l1();
            let s = [sign(d.dx), sign(d.dy)];
            out.grads[m][k][0] += s[0];
            out.grads[m][k][1] += s[1];
            for (j, block) in rep.blocks[m].iter().enumerate() {
                for c in 0..2 {
                    out.grads[j][k][c] -= s[0] * block[0][c] + s[1] * block[1][c];
                }
            }
        }
    }
    Ok(out)
}
