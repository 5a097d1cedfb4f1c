//! Image-to-crop affine maps, augmentation and transform pairs for P-error.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{BoundingBox, Point2D, ScalarField};
use crate::{Error, Result};

/// `q = A p + b` with `A` the left 2x2 block of `m` and `b` its last column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine transform"));
        }
        let t = AffineTransform { m };
        if t.determinant().abs() < 1e-12 {
            return Err(Error::DegenerateGeometry {
                condition: f64::INFINITY,
            });
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn linear(&self) -> [[f64; 2]; 2] {
        [[self.m[0][0], self.m[0][1]], [self.m[1][0], self.m[1][1]]]
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        Point2D::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.m[0][2],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.m[1][2],
        )
    }

    pub fn inverse(&self) -> Self {
        let d = self.determinant();
        let a = [
            [self.m[1][1] / d, -self.m[0][1] / d],
            [-self.m[1][0] / d, self.m[0][0] / d],
        ];
        let b = [
            -(a[0][0] * self.m[0][2] + a[0][1] * self.m[1][2]),
            -(a[1][0] * self.m[0][2] + a[1][1] * self.m[1][2]),
        ];
        AffineTransform {
            m: [[a[0][0], a[0][1], b[0]], [a[1][0], a[1][1], b[1]]],
        }
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn after(&self, first: &AffineTransform) -> Self {
        let a = &self.m;
        let b = &first.m;
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] += a[i][2];
        }
        AffineTransform { m }
    }

    /// Maps a square window of side `side` centred at `center`, rotated by
    /// `angle` radians, onto a `size`-pixel crop. The window edges land on
    /// the outer edges of the crop's border pixels.
    pub fn window(center: Point2D, side: f64, angle: f64, size: usize) -> Result<Self> {
        if !(side > 0.0) || size == 0 {
            return Err(Error::Shape(format!("empty crop window (side {side}, size {size})")));
        }
        let s = size as f64 / side;
        let (sin, cos) = angle.sin_cos();
        let c = (size as f64 - 1.0) / 2.0;
        let a = [[s * cos, -s * sin], [s * sin, s * cos]];
        Self::new([
            [a[0][0], a[0][1], c - a[0][0] * center.x - a[0][1] * center.y],
            [a[1][0], a[1][1], c - a[1][0] * center.x - a[1][1] * center.y],
        ])
    }

    /// Window over the square box around `bbox` expanded by `expand`.
    pub fn for_box(bbox: &BoundingBox, expand: f64, size: usize) -> Result<Self> {
        let b = bbox.expanded(expand).squared();
        Self::window(b.center(), b.width(), 0.0, size)
    }
}

/// Resamples `image` into a `size x size` crop: `crop(q) = image(T^-1 q)`,
/// zero outside the image.
pub fn warp_crop(image: &ScalarField, to_crop: &AffineTransform, size: usize) -> ScalarField {
    let inv = to_crop.inverse();
    ScalarField::from_fn(size, size, |x, y| {
        image.sample_zero_padded(inv.apply(Point2D::new(x as f64, y as f64)))
    })
}

/// Fraction each side of the box grows by before cropping.
pub const CROP_EXPAND: f64 = 0.2;

/// The deterministic evaluation crop: the box expanded by 20%, made square.
pub fn eval_transform(bbox: &BoundingBox, size: usize) -> Result<AffineTransform> {
    AffineTransform::for_box(bbox, CROP_EXPAND, size)
}

/// Random draws of the six-step augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Image resize factor; 1 when the resize step is skipped.
    pub resize: f64,
    /// Window shift as a fraction of the window side.
    pub shift: (f64, f64),
    /// Radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            resize: 1.0,
            shift: (0.0, 0.0),
            rotation: 0.0,
            intensity: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let resize = if rng.gen_bool(0.5) {
            rng.gen_range(0.9..=1.1)
        } else {
            1.0
        };
        let shift = (rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1));
        let rotation = rng.gen_range(-40.0..=40.0) * PI / 180.0;
        let intensity = rng.gen_range(0.6..=1.4);
        AugmentParams {
            resize,
            shift,
            rotation,
            intensity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub crop: ScalarField,
    pub to_crop: AffineTransform,
    /// Labels in crop pixels.
    pub labels: Vec<Point2D>,
}

/// Expand the box by 20%, optionally resize, shift, rotate, crop to
/// `size x size` and scale intensities. Labels follow the pixel map.
pub fn augment(
    image: &ScalarField,
    bbox: &BoundingBox,
    labels: &[Point2D],
    params: &AugmentParams,
    size: usize,
) -> Result<Augmented> {
    let b = bbox.expanded(CROP_EXPAND).squared();
    if !(b.width() > 0.0) {
        return Err(Error::Shape("augmentation box is empty".into()));
    }
    // Resizing the image by r is the same as shrinking the window by 1/r.
    let side = b.width() / params.resize;
    let c = b.center();
    let center = Point2D::new(c.x + params.shift.0 * side, c.y + params.shift.1 * side);
    let to_crop = AffineTransform::window(center, side, params.rotation, size)?;
    let mut crop = warp_crop(image, &to_crop, size);
    if params.intensity != 1.0 {
        for v in crop.samples_mut() {
            *v *= params.intensity;
        }
    }
    Ok(Augmented {
        crop,
        to_crop,
        labels: labels.iter().map(|p| to_crop.apply(*p)).collect(),
    })
}

/// Random window perturbation used to build P-error pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EltParams {
    pub scale: f64,
    pub shift: (f64, f64),
    pub rotation: f64,
}

impl EltParams {
    pub fn identity() -> Self {
        EltParams {
            scale: 1.0,
            shift: (0.0, 0.0),
            rotation: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        EltParams {
            scale: rng.gen_range(0.8..=1.2),
            shift: (rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1)),
            rotation: rng.gen_range(-30.0..=30.0) * PI / 180.0,
        }
    }

    pub fn transform(&self, bbox: &BoundingBox, size: usize) -> Result<AffineTransform> {
        let b = bbox.expanded(CROP_EXPAND).squared();
        let side = b.width() * self.scale;
        let c = b.center();
        let center = Point2D::new(c.x + self.shift.0 * side, c.y + self.shift.1 * side);
        AffineTransform::window(center, side, self.rotation, size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformPair {
    pub crop_a: ScalarField,
    pub theta_a: AffineTransform,
    pub crop_b: ScalarField,
    pub theta_b: AffineTransform,
}

pub fn elt_transform_pair<R: Rng + ?Sized>(
    image: &ScalarField,
    bbox: &BoundingBox,
    size: usize,
    rng: &mut R,
) -> Result<TransformPair> {
    let a = EltParams::sample(rng);
    let b = EltParams::sample(rng);
    elt_pair_from(image, bbox, size, &a, &b)
}

pub fn elt_pair_from(
    image: &ScalarField,
    bbox: &BoundingBox,
    size: usize,
    a: &EltParams,
    b: &EltParams,
) -> Result<TransformPair> {
    let theta_a = a.transform(bbox, size)?;
    let theta_b = b.transform(bbox, size)?;
    Ok(TransformPair {
        crop_a: warp_crop(image, &theta_a, size),
        theta_a,
        crop_b: warp_crop(image, &theta_b, size),
        theta_b,
    })
}
