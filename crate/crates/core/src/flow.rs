//! Inverse-compositional Lucas-Kanade point tracking and flow-field helpers.
//!
//! The warp family is pure translation, `W(x; p) = x + p`. The template
//! Jacobian and Hessian are computed once from the previous frame; every
//! iteration samples the current frame at `x + p`, solves
//! `dp = H^-1 sum alpha J^T (F_t(x + p) - F_{t-1}(x))` and updates `p <- p - dp`.

use serde::{Deserialize, Serialize};

use crate::supervision::Thresholds;
use crate::tensor::{BoundingBox, Displacement2D, FeatureMap, Point2D, ScalarField};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    /// Patch side in pixels, odd.
    pub side: usize,
    /// Scale of the Gaussian weights over the patch.
    pub sigma: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Added to the Hessian diagonal so it is always invertible.
    pub hessian_eps: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            side: 13,
            sigma: 13.0 / 4.0,
            max_iterations: 20,
            convergence_eps: 1e-6,
            hessian_eps: 1e-8,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 3 || self.side.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch side must be odd and >= 3, got {}",
                self.side
            )));
        }
        if !(self.sigma > 0.0) || !(self.convergence_eps > 0.0) || !(self.hessian_eps > 0.0) {
            return Err(Error::Config("patch sigma and eps values must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    fn radius(&self) -> i64 {
        (self.side / 2) as i64
    }
}

/// Per-pixel displacement from frame `t-1` to frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    u: ScalarField,
    v: ScalarField,
}

impl FlowField {
    pub fn new(u: ScalarField, v: ScalarField) -> Result<Self> {
        if !u.same_shape(&v) {
            return Err(Error::Shape("flow components differ in size".into()));
        }
        Ok(FlowField { u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            u: ScalarField::zeros(width, height),
            v: ScalarField::zeros(width, height),
        }
    }

    pub fn uniform(width: usize, height: usize, d: Displacement2D) -> Self {
        FlowField {
            u: ScalarField::filled(width, height, d.dx),
            v: ScalarField::filled(width, height, d.dy),
        }
    }

    pub fn u(&self) -> &ScalarField {
        &self.u
    }

    pub fn v(&self) -> &ScalarField {
        &self.v
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    /// Bilinearly interpolated displacement at `p`.
    pub fn sample(&self, p: Point2D) -> Result<Displacement2D> {
        Ok(Displacement2D::new(self.u.sample(p)?, self.v.sample(p)?))
    }

    pub fn sample_zero_padded(&self, p: Point2D) -> Displacement2D {
        Displacement2D::new(self.u.sample_zero_padded(p), self.v.sample_zero_padded(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackResult {
    pub point: Point2D,
    pub converged: bool,
    pub iterations: usize,
    pub valid: bool,
}

/// Everything about the previous frame that stays fixed over iterations.
#[derive(Clone, Debug)]
pub struct Template {
    center: Point2D,
    channels: usize,
    offsets: Vec<(f64, f64)>,
    weights: Vec<f64>,
    /// Template values, indexed `offset * channels + channel`.
    values: Vec<f64>,
    /// Rows of `J`, same indexing as `values`.
    jacobian: Vec<[f64; 2]>,
    hessian: [[f64; 2]; 2],
}

fn invert2(m: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn mat2_vec(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn patch_fits(width: usize, height: usize, center: Point2D, reach: f64) -> bool {
    center.x - reach >= 0.0
        && center.y - reach >= 0.0
        && center.x + reach <= (width - 1) as f64
        && center.y + reach <= (height - 1) as f64
}

impl Template {
    pub fn center(&self) -> Point2D {
        self.center
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Rows of the stacked `(C |Omega|) x 2` Jacobian.
    pub fn jacobian(&self) -> &[[f64; 2]] {
        &self.jacobian
    }

    /// Regularized `J^T A J + eps I`.
    pub fn hessian(&self) -> [[f64; 2]; 2] {
        self.hessian
    }

    /// Builds a template from explicit parts, mostly useful for checking the
    /// solve against hand computations. Offsets are relative to `center`.
    pub fn from_parts(
        center: Point2D,
        offsets: Vec<(f64, f64)>,
        weights: Vec<f64>,
        values: Vec<f64>,
        jacobian: Vec<[f64; 2]>,
        hessian_eps: f64,
    ) -> Result<Self> {
        let n = offsets.len();
        if n == 0 || weights.len() != n || !values.len().is_multiple_of(n) || jacobian.len() != values.len() {
            return Err(Error::Shape("inconsistent template parts".into()));
        }
        let channels = values.len() / n;
        let hessian = accumulate_hessian(&weights, &jacobian, channels, hessian_eps);
        Ok(Template {
            center,
            channels,
            offsets,
            weights,
            values,
            jacobian,
            hessian,
        })
    }
}

fn accumulate_hessian(weights: &[f64], jacobian: &[[f64; 2]], channels: usize, eps: f64) -> [[f64; 2]; 2] {
    let mut h = [[0.0; 2]; 2];
    for (row, j) in jacobian.iter().enumerate() {
        let a = weights[row / channels];
        h[0][0] += a * j[0] * j[0];
        h[0][1] += a * j[0] * j[1];
        h[1][1] += a * j[1] * j[1];
    }
    h[1][0] = h[0][1];
    h[0][0] += eps;
    h[1][1] += eps;
    h
}

/// Extracts the weighted template around `x` and precomputes `J` and `H`.
/// Needs a one-pixel margin around the patch for the gradient stencil.
pub fn precompute_template<F: FeatureMap + ?Sized>(prev: &F, x: Point2D, spec: &PatchSpec) -> Result<Template> {
    spec.validate()?;
    let r = spec.radius();
    if !x.is_finite() || !patch_fits(prev.width(), prev.height(), x, (r + 1) as f64) {
        return Err(Error::InvalidTemplate(format!(
            "{}x{} patch at ({:.3}, {:.3}) leaves the {}x{} frame",
            spec.side,
            spec.side,
            x.x,
            x.y,
            prev.width(),
            prev.height()
        )));
    }
    let channels = prev.channels();
    let n = spec.side * spec.side;
    let mut offsets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * channels);
    let mut jacobian = Vec::with_capacity(n * channels);
    let two_sigma2 = 2.0 * spec.sigma * spec.sigma;
    for dy in -r..=r {
        for dx in -r..=r {
            let (ox, oy) = (dx as f64, dy as f64);
            offsets.push((ox, oy));
            weights.push((-(ox * ox + oy * oy) / two_sigma2).exp());
            let q = Point2D::new(x.x + ox, x.y + oy);
            for c in 0..channels {
                let f = prev.plane(c);
                values.push(f.sample(q)?);
                let gx = 0.5 * (f.sample(Point2D::new(q.x + 1.0, q.y))? - f.sample(Point2D::new(q.x - 1.0, q.y))?);
                let gy = 0.5 * (f.sample(Point2D::new(q.x, q.y + 1.0))? - f.sample(Point2D::new(q.x, q.y - 1.0))?);
                jacobian.push([gx, gy]);
            }
        }
    }
    let hessian = accumulate_hessian(&weights, &jacobian, channels, spec.hessian_eps);
    Ok(Template {
        center: x,
        channels,
        offsets,
        weights,
        values,
        jacobian,
        hessian,
    })
}

/// One Gauss-Newton increment for the current motion estimate `p`.
pub fn solve_delta_p<F: FeatureMap + ?Sized>(
    template: &Template,
    curr: &F,
    p: Displacement2D,
) -> Result<Displacement2D> {
    if curr.channels() != template.channels {
        return Err(Error::Shape(format!(
            "template has {} channels, frame has {}",
            template.channels,
            curr.channels()
        )));
    }
    let c = template.channels;
    let mut b = [0.0; 2];
    for (i, (ox, oy)) in template.offsets.iter().enumerate() {
        let s = Point2D::new(template.center.x + ox + p.dx, template.center.y + oy + p.dy);
        let a = template.weights[i];
        for ch in 0..c {
            let row = i * c + ch;
            let residual = curr.plane(ch).sample(s)? - template.values[row];
            let j = template.jacobian[row];
            b[0] += a * j[0] * residual;
            b[1] += a * j[1] * residual;
        }
    }
    let inv = invert2(&template.hessian).ok_or_else(|| Error::InvalidTemplate("singular Hessian".into()))?;
    let d = mat2_vec(&inv, b);
    Ok(Displacement2D::new(d[0], d[1]))
}

fn invalid_track(x: Point2D, iterations: usize) -> TrackResult {
    TrackResult {
        point: x,
        converged: false,
        iterations,
        valid: false,
    }
}

/// Tracks `x` from `prev` into `curr`. Failures are reported through
/// `valid = false` rather than as errors.
pub fn track_landmark_lk<F: FeatureMap + ?Sized>(prev: &F, curr: &F, x: Point2D, spec: &PatchSpec) -> TrackResult {
    let Ok(template) = precompute_template(prev, x, spec) else {
        return invalid_track(x, 0);
    };
    let mut p = Displacement2D::default();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=spec.max_iterations {
        iterations = iter;
        let Ok(dp) = solve_delta_p(&template, curr, p) else {
            return invalid_track(x + p, iter);
        };
        p = p - dp;
        if dp.norm() < spec.convergence_eps {
            converged = true;
            break;
        }
    }
    let point = x + p;
    let valid = point.is_finite() && curr.plane(0).contains(&point);
    TrackResult {
        point,
        converged,
        iterations,
        valid,
    }
}

/// Tracks by reading the flow field at `x`.
pub fn track_landmark_interp(flow: &FlowField, x: Point2D) -> Result<Point2D> {
    Ok(x + flow.sample(x)?)
}

/// `d tracked / d x` for the flow-interpolation tracker: `I + d flow / d x`.
pub fn interp_track_gradient(flow: &FlowField, x: Point2D) -> Result<[[f64; 2]; 2]> {
    let (ux, uy) = flow.u().sample_jacobian(x)?;
    let (vx, vy) = flow.v().sample_jacobian(x)?;
    Ok([[1.0 + ux, uy], [vx, 1.0 + vy]])
}

/// `d tracked / d x` for the LK tracker.
///
/// At convergence `b(p, x) = sum alpha J^T r = 0`, so the tracked point
/// `x + p*(x)` has derivative `I - (db/dp)^-1 db/dx` by the implicit function
/// theorem. Both partials are exact derivatives of the bilinear sampling and
/// of the template's central-difference gradients.
pub fn lk_track_gradient<F: FeatureMap + ?Sized>(
    prev: &F,
    curr: &F,
    x: Point2D,
    spec: &PatchSpec,
) -> Result<[[f64; 2]; 2]> {
    let track = track_landmark_lk(prev, curr, x, spec);
    if !track.valid || !track.converged {
        return Err(Error::NotConverged);
    }
    let p = track.point - x;
    let r = spec.radius();
    let mut db_dx = [[0.0; 2]; 2];
    let mut db_dp = [[spec.hessian_eps, 0.0], [0.0, spec.hessian_eps]];
    let two_sigma2 = 2.0 * spec.sigma * spec.sigma;
    for dy in -r..=r {
        for dx in -r..=r {
            let (ox, oy) = (dx as f64, dy as f64);
            let alpha = (-(ox * ox + oy * oy) / two_sigma2).exp();
            let q = Point2D::new(x.x + ox, x.y + oy);
            let s = q + p;
            for c in 0..prev.channels() {
                let f0 = prev.plane(c);
                let f1 = curr.plane(c);
                let t = f0.sample(q)?;
                let dt = f0.sample_jacobian(q)?;
                let ex = [Point2D::new(q.x + 1.0, q.y), Point2D::new(q.x - 1.0, q.y)];
                let ey = [Point2D::new(q.x, q.y + 1.0), Point2D::new(q.x, q.y - 1.0)];
                let j = [
                    0.5 * (f0.sample(ex[0])? - f0.sample(ex[1])?),
                    0.5 * (f0.sample(ey[0])? - f0.sample(ey[1])?),
                ];
                let (jxp, jxm) = (f0.sample_jacobian(ex[0])?, f0.sample_jacobian(ex[1])?);
                let (jyp, jym) = (f0.sample_jacobian(ey[0])?, f0.sample_jacobian(ey[1])?);
                // dj[a][c] = d J_a / d x_c
                let dj = [
                    [0.5 * (jxp.0 - jxm.0), 0.5 * (jxp.1 - jxm.1)],
                    [0.5 * (jyp.0 - jym.0), 0.5 * (jyp.1 - jym.1)],
                ];
                let g = f1.sample_jacobian(s)?;
                let g = [g.0, g.1];
                let residual = f1.sample(s)? - t;
                let dr = [g[0] - dt.0, g[1] - dt.1];
                for a in 0..2 {
                    for cc in 0..2 {
                        db_dx[a][cc] += alpha * (dj[a][cc] * residual + j[a] * dr[cc]);
                        db_dp[a][cc] += alpha * j[a] * g[cc];
                    }
                }
            }
        }
    }
    let inv = invert2(&db_dp).ok_or(Error::NotConverged)?;
    let mut out = [[1.0, 0.0], [0.0, 1.0]];
    for a in 0..2 {
        for cc in 0..2 {
            out[a][cc] -= inv[a][0] * db_dx[0][cc] + inv[a][1] * db_dx[1][cc];
        }
    }
    Ok(out)
}

/// Which tracker turns a previous-frame point into a current-frame point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerKind {
    /// Bilinear interpolation of a precomputed dense flow.
    Interp,
    /// Differentiable Lucas-Kanade on the frames.
    Lk,
}

/// Backward warp: `out(x) = field(x - flow(x))`, zero outside the source.
pub fn warp_field_by_flow(field: &ScalarField, flow: &FlowField) -> Result<ScalarField> {
    if field.width() != flow.width() || field.height() != flow.height() {
        return Err(Error::Shape(format!(
            "field is {}x{}, flow is {}x{}",
            field.width(),
            field.height(),
            flow.width(),
            flow.height()
        )));
    }
    Ok(ScalarField::from_fn(field.width(), field.height(), |x, y| {
        let src = Point2D::new(x as f64 - flow.u().get(x, y), y as f64 - flow.v().get(x, y));
        field.sample_zero_padded(src)
    }))
}

/// Gradient of a scalar loss with respect to the source field of
/// [`warp_field_by_flow`], given the gradient with respect to its output.
pub fn warp_field_adjoint(grad_out: &ScalarField, flow: &FlowField) -> Result<ScalarField> {
    if grad_out.width() != flow.width() || grad_out.height() != flow.height() {
        return Err(Error::Shape("gradient and flow differ in size".into()));
    }
    let mut acc = vec![0.0; grad_out.width() * grad_out.height()];
    for y in 0..grad_out.height() {
        for x in 0..grad_out.width() {
            let g = grad_out.get(x, y);
            if g == 0.0 {
                continue;
            }
            let src = Point2D::new(x as f64 - flow.u().get(x, y), y as f64 - flow.v().get(x, y));
            for (i, w, _, _) in grad_out.padded_stencil(src).taps() {
                acc[i] += g * w;
            }
        }
    }
    ScalarField::new(grad_out.width(), grad_out.height(), acc)
}

/// Outcome of the forward-backward reliability test for one landmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbCheck {
    pub reliable: bool,
    /// `|| L_{t-1} - G(F_t, F_{t-1}, L~_t) ||`, infinite when the backward track fails.
    pub round_trip_error: f64,
    /// `|| L~_t - L_t ||`.
    pub detection_gap: f64,
    pub inside: bool,
}

/// Decides whether a tracked landmark is trustworthy supervision.
///
/// Rejected when the backward track misses the start point by more than
/// `T_FB`, when the tracked point is more than `T_D` from the current
/// detection, or when the detection or track leaves the box or the frame.
/// Both thresholds are fractions of the box scale.
#[allow(clippy::too_many_arguments)]
pub fn forward_backward_check<F: FeatureMap + ?Sized>(
    prev: &F,
    curr: &F,
    l_prev: Point2D,
    l_tracked: Point2D,
    l_det_curr: Point2D,
    bbox: &BoundingBox,
    thresholds: &Thresholds,
    spec: &PatchSpec,
) -> FbCheck {
    let scale = bbox.scale();
    let t_fb = thresholds.t_fb_frac * scale;
    let t_d = thresholds.t_d_frac * scale;
    let frame = curr.plane(0);
    let finite = l_prev.is_finite() && l_tracked.is_finite() && l_det_curr.is_finite();
    let inside = finite
        && [l_tracked, l_det_curr]
            .iter()
            .all(|p| bbox.contains(p) && frame.contains(p));
    let detection_gap = if finite {
        l_tracked.distance(&l_det_curr)
    } else {
        f64::INFINITY
    };
    let round_trip_error = if finite {
        let back = track_landmark_lk(curr, prev, l_tracked, spec);
        if back.valid {
            l_prev.distance(&back.point)
        } else {
            f64::INFINITY
        }
    } else {
        f64::INFINITY
    };
    FbCheck {
        reliable: inside && round_trip_error <= t_fb && detection_gap <= t_d,
        round_trip_error,
        detection_gap,
        inside,
    }
}

/// Dense flow from LK tracks on a regular grid every `stride` pixels,
/// bilinearly upsampled. Grid points whose track fails get zero motion.
pub fn dense_flow_lk(prev: &ScalarField, curr: &ScalarField, spec: &PatchSpec, stride: usize) -> Result<FlowField> {
    if stride == 0 {
        return Err(Error::Config("dense flow stride must be >= 1".into()));
    }
    if !prev.same_shape(curr) {
        return Err(Error::Shape("frames differ in size".into()));
    }
    let (w, h) = (prev.width(), prev.height());
    let gw = (w - 1) / stride + 1;
    let gh = (h - 1) / stride + 1;
    let mut gu = vec![0.0; gw * gh];
    let mut gv = vec![0.0; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let x = Point2D::new((gx * stride) as f64, (gy * stride) as f64);
            let t = track_landmark_lk(prev, curr, x, spec);
            if t.valid && t.converged {
                gu[gy * gw + gx] = t.point.x - x.x;
                gv[gy * gw + gx] = t.point.y - x.y;
            }
        }
    }
    let gu = ScalarField::new(gw, gh, gu)?;
    let gv = ScalarField::new(gw, gh, gv)?;
    let up = |g: &ScalarField| {
        ScalarField::from_fn(w, h, |x, y| {
            let p = Point2D::new(
                (x as f64 / stride as f64).min((gw - 1) as f64),
                (y as f64 / stride as f64).min((gh - 1) as f64),
            );
            g.sample_zero_padded(p)
        })
    };
    FlowField::new(up(&gu), up(&gv))
}
