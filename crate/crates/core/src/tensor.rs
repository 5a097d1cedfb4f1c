//! Sampled 2D fields with sub-pixel bilinear access.
//!
//! Coordinates follow the image convention used throughout the crate: `x` is
//! the column, `y` the row, and the integer point `(c, r)` is the center of the
//! sample stored at column `c`, row `r`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Offset added before picking the bilinear cell for derivatives, so that a
/// point on a cell boundary always takes the cell to its lower right.
pub const CELL_TIE_BREAK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Displacement2D {
    pub dx: f64,
    pub dy: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (*self - *other).norm()
    }
}

impl Displacement2D {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Displacement2D { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn l1(&self) -> f64 {
        self.dx.abs() + self.dy.abs()
    }
}

impl Add<Displacement2D> for Point2D {
    type Output = Point2D;
    fn add(self, d: Displacement2D) -> Point2D {
        Point2D::new(self.x + d.dx, self.y + d.dy)
    }
}

impl Sub<Displacement2D> for Point2D {
    type Output = Point2D;
    fn sub(self, d: Displacement2D) -> Point2D {
        Point2D::new(self.x - d.dx, self.y - d.dy)
    }
}

impl Sub for Point2D {
    type Output = Displacement2D;
    fn sub(self, o: Point2D) -> Displacement2D {
        Displacement2D::new(self.x - o.x, self.y - o.y)
    }
}

impl Add for Displacement2D {
    type Output = Displacement2D;
    fn add(self, o: Displacement2D) -> Displacement2D {
        Displacement2D::new(self.dx + o.dx, self.dy + o.dy)
    }
}

impl AddAssign for Displacement2D {
    fn add_assign(&mut self, o: Displacement2D) {
        self.dx += o.dx;
        self.dy += o.dy;
    }
}

impl Sub for Displacement2D {
    type Output = Displacement2D;
    fn sub(self, o: Displacement2D) -> Displacement2D {
        Displacement2D::new(self.dx - o.dx, self.dy - o.dy)
    }
}

impl Neg for Displacement2D {
    type Output = Displacement2D;
    fn neg(self) -> Displacement2D {
        Displacement2D::new(-self.dx, -self.dy)
    }
}

impl Mul<f64> for Displacement2D {
    type Output = Displacement2D;
    fn mul(self, s: f64) -> Displacement2D {
        Displacement2D::new(self.dx * s, self.dy * s)
    }
}

/// Axis-aligned box in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::NonFinite("bounding box"));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Shape(format!("empty box [{x0}, {x1}]x[{y0}, {y1}]")));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    /// Tight box around `points`.
    pub fn around(points: &[Point2D]) -> Result<Self> {
        let first = points.first().ok_or(Error::Empty("bounding box points"))?;
        let mut b = BoundingBox {
            x0: first.x,
            y0: first.y,
            x1: first.x,
            y1: first.y,
        };
        for p in points {
            b.x0 = b.x0.min(p.x);
            b.y0 = b.y0.min(p.y);
            b.x1 = b.x1.max(p.x);
            b.y1 = b.y1.max(p.y);
        }
        // A single point still gets a non-empty box.
        if b.x1 - b.x0 < 1e-6 {
            b.x0 -= 0.5;
            b.x1 += 0.5;
        }
        if b.y1 - b.y0 < 1e-6 {
            b.y0 -= 0.5;
            b.y1 += 0.5;
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Square root of the box area, the size normalizer used by thresholds and
    /// metrics.
    pub fn scale(&self) -> f64 {
        (self.width() * self.height()).sqrt()
    }

    /// Grows width and height by `fraction` about the center.
    pub fn expanded(&self, fraction: f64) -> Self {
        let c = self.center();
        let hw = 0.5 * self.width() * (1.0 + fraction);
        let hh = 0.5 * self.height() * (1.0 + fraction);
        BoundingBox {
            x0: c.x - hw,
            y0: c.y - hh,
            x1: c.x + hw,
            y1: c.y + hh,
        }
    }

    /// Smallest square with the same center containing the box.
    pub fn squared(&self) -> Self {
        let c = self.center();
        let h = 0.5 * self.width().max(self.height());
        BoundingBox {
            x0: c.x - h,
            y0: c.y - h,
            x1: c.x + h,
            y1: c.y + h,
        }
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// A single-channel sampled grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

/// Bilinear cell lookup: lower-left indices plus fractional offsets.
#[derive(Clone, Copy, Debug)]
struct Cell {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn cell_axis(v: f64, n: usize, tie_break: f64) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = ((v + tie_break).floor().max(0.0) as usize).min(n - 2);
    (i0, i0 + 1, v - i0 as f64)
}

impl ScalarField {
    pub fn new(width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("field must be non-empty, got {width}x{height}")));
        }
        if samples.len() != width * height {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height} field",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field samples"));
        }
        Ok(ScalarField { width, height, samples })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        ScalarField {
            width,
            height,
            samples: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Builds a field by evaluating `f(x, y)` at every sample center.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y));
            }
        }
        assert!(
            samples.iter().all(|v| v.is_finite()),
            "from_fn produced a non-finite sample"
        );
        ScalarField { width, height, samples }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Mutable access for in-place arithmetic. Callers must keep samples finite.
    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.samples[y * self.width + x] = value;
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    fn out_of_bounds(&self, p: &Point2D) -> Error {
        Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: self.width,
            height: self.height,
        }
    }

    fn cell(&self, p: &Point2D, tie_break: f64) -> Cell {
        let (x0, x1, fx) = cell_axis(p.x, self.width, tie_break);
        let (y0, y1, fy) = cell_axis(p.y, self.height, tie_break);
        Cell { x0, y0, x1, y1, fx, fy }
    }

    #[inline]
    fn blend(&self, c: &Cell) -> f64 {
        let f00 = self.get(c.x0, c.y0);
        let f10 = self.get(c.x1, c.y0);
        let f01 = self.get(c.x0, c.y1);
        let f11 = self.get(c.x1, c.y1);
        f00 * (1.0 - c.fx) * (1.0 - c.fy) + f10 * c.fx * (1.0 - c.fy) + f01 * (1.0 - c.fx) * c.fy + f11 * c.fx * c.fy
    }

    /// Bilinear interpolation; errors outside `[0, w-1] x [0, h-1]`.
    pub fn sample(&self, p: Point2D) -> Result<f64> {
        if !self.contains(&p) {
            return Err(self.out_of_bounds(&p));
        }
        Ok(self.blend(&self.cell(&p, 0.0)))
    }

    /// Partial derivatives of [`ScalarField::sample`] with respect to `p`.
    pub fn sample_jacobian(&self, p: Point2D) -> Result<(f64, f64)> {
        if !self.contains(&p) {
            return Err(self.out_of_bounds(&p));
        }
        let c = self.cell(&p, CELL_TIE_BREAK);
        let f00 = self.get(c.x0, c.y0);
        let f10 = self.get(c.x1, c.y0);
        let f01 = self.get(c.x0, c.y1);
        let f11 = self.get(c.x1, c.y1);
        let ddx = if self.width == 1 {
            0.0
        } else {
            (f10 - f00) * (1.0 - c.fy) + (f11 - f01) * c.fy
        };
        let ddy = if self.height == 1 {
            0.0
        } else {
            (f01 - f00) * (1.0 - c.fx) + (f11 - f10) * c.fx
        };
        Ok((ddx, ddy))
    }

    /// Taps and weights of the zero-padded bilinear stencil at `p`. Taps that
    /// fall outside the grid are omitted (they read as zero).
    pub(crate) fn padded_stencil(&self, p: Point2D) -> PaddedStencil {
        let xf = p.x.floor();
        let yf = p.y.floor();
        let fx = p.x - xf;
        let fy = p.y - yf;
        let mut st = PaddedStencil::default();
        let corners = [
            (xf, yf, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (xf + 1.0, yf, fx * (1.0 - fy), 1.0 - fy, -fx),
            (xf, yf + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (xf + 1.0, yf + 1.0, fx * fy, fy, fx),
        ];
        for (cx, cy, w, wx, wy) in corners {
            if cx >= 0.0 && cy >= 0.0 && cx < self.width as f64 && cy < self.height as f64 {
                st.push(cy as usize * self.width + cx as usize, w, wx, wy);
            }
        }
        st
    }

    /// Bilinear interpolation where samples beyond the grid read as zero.
    /// Agrees with [`ScalarField::sample`] inside the grid.
    pub fn sample_zero_padded(&self, p: Point2D) -> f64 {
        if !p.is_finite() {
            return 0.0;
        }
        // Exact fast path for in-grid points keeps integer reads bit-exact at
        // the right and bottom borders.
        if self.contains(&p) {
            return self.blend(&self.cell(&p, 0.0));
        }
        let st = self.padded_stencil(p);
        st.taps().map(|(i, w, _, _)| self.samples[i] * w).sum()
    }

    /// Value and position derivatives of [`ScalarField::sample_zero_padded`].
    pub fn sample_zero_padded_with_grad(&self, p: Point2D) -> (f64, f64, f64) {
        if !p.is_finite() {
            return (0.0, 0.0, 0.0);
        }
        let st = self.padded_stencil(p);
        let mut v = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (i, w, wx, wy) in st.taps() {
            let s = self.samples[i];
            v += s * w;
            gx += s * wx;
            gy += s * wy;
        }
        (v, gx, gy)
    }

    /// Sum of squared samples.
    pub fn squared_norm(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Up to four weighted taps of a zero-padded bilinear read, with the
/// derivatives of each weight along x and y.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PaddedStencil {
    idx: [usize; 4],
    w: [f64; 4],
    wx: [f64; 4],
    wy: [f64; 4],
    len: usize,
}

impl PaddedStencil {
    fn push(&mut self, i: usize, w: f64, wx: f64, wy: f64) {
        self.idx[self.len] = i;
        self.w[self.len] = w;
        self.wx[self.len] = wx;
        self.wy[self.len] = wy;
        self.len += 1;
    }

    pub(crate) fn taps(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..self.len).map(move |j| (self.idx[j], self.w[j], self.wx[j], self.wy[j]))
    }
}

/// Bilinear value at `p`; out-of-range points are an error.
pub fn bilinear_sample(field: &ScalarField, p: Point2D) -> Result<f64> {
    field.sample(p)
}

/// `(d/dx, d/dy)` of [`bilinear_sample`] at `p`.
pub fn bilinear_sample_jacobian(field: &ScalarField, p: Point2D) -> Result<(f64, f64)> {
    field.sample_jacobian(p)
}

/// Central differences in the interior, one-sided differences on the border.
pub fn spatial_gradient(field: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    let (w, h) = (field.width(), field.height());
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!("gradient needs at least 3x3, got {w}x{h}")));
    }
    let gx = ScalarField::from_fn(w, h, |x, y| {
        if x == 0 {
            field.get(1, y) - field.get(0, y)
        } else if x == w - 1 {
            field.get(w - 1, y) - field.get(w - 2, y)
        } else {
            0.5 * (field.get(x + 1, y) - field.get(x - 1, y))
        }
    });
    let gy = ScalarField::from_fn(w, h, |x, y| {
        if y == 0 {
            field.get(x, 1) - field.get(x, 0)
        } else if y == h - 1 {
            field.get(x, h - 1) - field.get(x, h - 2)
        } else {
            0.5 * (field.get(x, y + 1) - field.get(x, y - 1))
        }
    });
    Ok((gx, gy))
}

/// Several same-sized planes, e.g. the channels of a feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelField {
    planes: Vec<ScalarField>,
}

impl MultiChannelField {
    pub fn new(planes: Vec<ScalarField>) -> Result<Self> {
        let first = planes.first().ok_or(Error::Empty("channel planes"))?;
        if planes.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Shape("channel planes differ in size".into()));
        }
        Ok(MultiChannelField { planes })
    }

    pub fn planes(&self) -> &[ScalarField] {
        &self.planes
    }
}

/// Anything that can be tracked over: one or more same-sized planes.
pub trait FeatureMap {
    fn channels(&self) -> usize;
    fn plane(&self, c: usize) -> &ScalarField;

    fn width(&self) -> usize {
        self.plane(0).width()
    }

    fn height(&self) -> usize {
        self.plane(0).height()
    }
}

impl FeatureMap for ScalarField {
    fn channels(&self) -> usize {
        1
    }

    fn plane(&self, _c: usize) -> &ScalarField {
        self
    }
}

impl FeatureMap for MultiChannelField {
    fn channels(&self) -> usize {
        self.planes.len()
    }

    fn plane(&self, c: usize) -> &ScalarField {
        &self.planes[c]
    }
}
