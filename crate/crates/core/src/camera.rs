//! Linear multi-view triangulation and pinhole projection.
//!
//! Each view contributes two rows to the constraint matrix `B`:
//! `u = M[0] - x * M[2]` and `v = M[1] - y * M[2]`. The landmark is the
//! least-squares solution of `B[:, :3] X = -B[:, 3]`, obtained from the 3x3
//! normal equations. Because the solution is closed form, its derivative with
//! respect to every observed 2D point is available analytically.

use serde::{Deserialize, Serialize};

use crate::tensor::Point2D;
use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Normal matrices with a larger 1-norm condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
const MIN_DEPTH: f64 = 1e-12;

/// A 3x4 projection matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMatrix {
    rows: [[f64; 4]; 3],
}

/// A triangulated or ground-truth 3D landmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark3D {
    pub position: Vec3,
}

/// Observations of one landmark in `M >= 2` calibrated views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewObservationSet {
    cameras: Vec<CameraMatrix>,
    points: Vec<Point2D>,
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Cofactor of (j, i) gives the adjugate entry (i, j).
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    Some(r)
}

fn norm1(m: &Mat3) -> f64 {
    (0..3)
        .map(|j| (0..3).map(|i| m[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl CameraMatrix {
    pub fn new(rows: [[f64; 4]; 3]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera matrix"));
        }
        let left = [
            [rows[0][0], rows[0][1], rows[0][2]],
            [rows[1][0], rows[1][1], rows[1][2]],
            [rows[2][0], rows[2][1], rows[2][2]],
        ];
        let det = det3(&left);
        if det.abs() <= 1e-12 {
            return Err(Error::DegenerateGeometry {
                condition: f64::INFINITY,
            });
        }
        Ok(CameraMatrix { rows })
    }

    /// `K [R | t]` with square pixels, focal length `focal` and principal
    /// point `(cx, cy)`.
    pub fn from_pose(focal: f64, cx: f64, cy: f64, rotation: &Mat3, translation: &Vec3) -> Result<Self> {
        let k = [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]];
        let mut rows = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[i][j] = (0..3).map(|l| k[i][l] * rotation[l][j]).sum();
            }
            rows[i][3] = (0..3).map(|l| k[i][l] * translation[l]).sum();
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[[f64; 4]; 3] {
        &self.rows
    }

    /// Row-major entries, as written to the scene manifest.
    pub fn to_flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, v) in self.rows.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::Shape(format!("camera needs 12 values, got {}", values.len())));
        }
        let mut rows = [[0.0; 4]; 3];
        for (i, v) in values.iter().enumerate() {
            rows[i / 4][i % 4] = *v;
        }
        Self::new(rows)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let mut rows = self.rows;
        rows.iter_mut().flatten().for_each(|v| *v *= s);
        Self::new(rows)
    }

    /// Homogeneous image point `q = M [X; 1]`.
    pub fn homogeneous(&self, x: &Vec3) -> Vec3 {
        let mut q = [0.0; 3];
        for (qi, row) in q.iter_mut().zip(&self.rows) {
            *qi = dot3(row, x) + row[3];
        }
        q
    }
}

impl Landmark3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Landmark3D { position: [x, y, z] }
    }
}

impl ViewObservationSet {
    pub fn new(cameras: Vec<CameraMatrix>, points: Vec<Point2D>) -> Result<Self> {
        if cameras.len() != points.len() {
            return Err(Error::Shape(format!(
                "{} cameras but {} points",
                cameras.len(),
                points.len()
            )));
        }
        if cameras.len() < 2 {
            return Err(Error::Shape(format!(
                "triangulation needs at least 2 views, got {}",
                cameras.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("observed points"));
        }
        Ok(ViewObservationSet { cameras, points })
    }

    pub fn cameras(&self) -> &[CameraMatrix] {
        &self.cameras
    }

    pub fn points(&self) -> &[Point2D] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `2M x 4` constraint matrix: all `u` rows, then all `v` rows.
    pub fn constraint_matrix(&self) -> Vec<[f64; 4]> {
        let u = self.cameras.iter().zip(&self.points).map(|(c, p)| {
            let r = c.rows();
            std::array::from_fn(|j| r[0][j] - r[2][j] * p.x)
        });
        let v = self.cameras.iter().zip(&self.points).map(|(c, p)| {
            let r = c.rows();
            std::array::from_fn(|j| r[1][j] - r[2][j] * p.y)
        });
        u.chain(v).collect()
    }

    /// `|| B[:, :3] X + B[:, 3] ||^2`.
    pub fn algebraic_residual(&self, x: &Vec3) -> f64 {
        self.constraint_matrix()
            .iter()
            .map(|row| {
                let r = dot3(row, x) + row[3];
                r * r
            })
            .sum()
    }
}

/// Solved normal equations, kept so the Jacobian can reuse the inverse.
struct NormalSolution {
    x: Vec3,
    inv: Mat3,
}

fn solve_normal_equations(obs: &ViewObservationSet) -> Result<NormalSolution> {
    let b = obs.constraint_matrix();
    let mut n = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for row in &b {
        for i in 0..3 {
            for j in 0..3 {
                n[i][j] += row[i] * row[j];
            }
            rhs[i] -= row[i] * row[3];
        }
    }
    let inv = inverse3(&n).ok_or(Error::DegenerateGeometry {
        condition: f64::INFINITY,
    })?;
    let condition = norm1(&n) * norm1(&inv);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::DegenerateGeometry { condition });
    }
    Ok(NormalSolution {
        x: mat_vec(&inv, &rhs),
        inv,
    })
}

fn warn_on_cheirality(obs: &ViewObservationSet, x: &Vec3) {
    for (m, cam) in obs.cameras().iter().enumerate() {
        let depth = cam.homogeneous(x)[2];
        if depth <= 0.0 {
            log::warn!("triangulated point lies behind camera {m} (depth {depth:.3e})");
        }
    }
}

/// Least-squares DLT triangulation from the normal equations.
pub fn triangulate_dlt(obs: &ViewObservationSet) -> Result<Landmark3D> {
    let sol = solve_normal_equations(obs)?;
    warn_on_cheirality(obs, &sol.x);
    Ok(Landmark3D { position: sol.x })
}

/// Pinhole projection `(q0 / q2, q1 / q2)`.
pub fn project(camera: &CameraMatrix, x: &Landmark3D) -> Result<Point2D> {
    let q = camera.homogeneous(&x.position);
    if q[2].abs() <= MIN_DEPTH {
        return Err(Error::PointAtInfinity { depth: q[2] });
    }
    Ok(Point2D::new(q[0] / q[2], q[1] / q[2]))
}

/// `d project / d X` as a 2x3 matrix.
pub fn projection_jacobian(camera: &CameraMatrix, x: &Landmark3D) -> Result<[[f64; 3]; 2]> {
    let q = camera.homogeneous(&x.position);
    if q[2].abs() <= MIN_DEPTH {
        return Err(Error::PointAtInfinity { depth: q[2] });
    }
    let r = camera.rows();
    let inv2 = 1.0 / (q[2] * q[2]);
    let mut j = [[0.0; 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            j[a][c] = (r[a][c] * q[2] - r[2][c] * q[a]) * inv2;
        }
    }
    Ok(j)
}

/// Per-view 3x2 Jacobians `d X / d (x_m, y_m)` of the triangulated point.
pub fn triangulation_jacobian(obs: &ViewObservationSet) -> Result<Vec<[[f64; 2]; 3]>> {
    let sol = solve_normal_equations(obs)?;
    let xh = [sol.x[0], sol.x[1], sol.x[2], 1.0];
    let mut out = Vec::with_capacity(obs.len());
    for (cam, p) in obs.cameras().iter().zip(obs.points()) {
        let r = cam.rows();
        let mut jac = [[0.0; 2]; 3];
        for (col, (src, coord)) in [(0usize, p.x), (1usize, p.y)].into_iter().enumerate() {
            // Row of B that depends on this coordinate and its residual.
            let row: [f64; 4] = std::array::from_fn(|j| r[src][j] - r[2][j] * coord);
            let res_row: f64 = row.iter().zip(&xh).map(|(a, b)| a * b).sum();
            let res_m2: f64 = r[2].iter().zip(&xh).map(|(a, b)| a * b).sum();
            // dX = N^-1 (M2' (row . X~) + row' (M2 . X~))
            let g: Vec3 = std::array::from_fn(|i| r[2][i] * res_row + row[i] * res_m2);
            let d = mat_vec(&sol.inv, &g);
            for i in 0..3 {
                jac[i][col] = d[i];
            }
        }
        out.push(jac);
    }
    Ok(out)
}

/// Triangulates and projects the result back into every view.
pub fn reproject_all(obs: &ViewObservationSet) -> Result<Vec<Point2D>> {
    let x = triangulate_dlt(obs)?;
    obs.cameras().iter().map(|c| project(c, &x)).collect()
}

/// Reprojections plus the full block Jacobian: `blocks[m][j]` is the 2x2
/// derivative of view `m`'s reprojection with respect to view `j`'s point.
#[derive(Clone, Debug)]
pub struct Reprojection {
    pub landmark: Landmark3D,
    pub points: Vec<Point2D>,
    pub blocks: Vec<Vec<[[f64; 2]; 2]>>,
}

pub fn reproject_with_jacobian(obs: &ViewObservationSet) -> Result<Reprojection> {
    let landmark = triangulate_dlt(obs)?;
    let tri = triangulation_jacobian(obs)?;
    let mut points = Vec::with_capacity(obs.len());
    let mut blocks = Vec::with_capacity(obs.len());
    for cam in obs.cameras() {
        points.push(project(cam, &landmark)?);
        let pj = projection_jacobian(cam, &landmark)?;
        let row: Vec<[[f64; 2]; 2]> = tri
            .iter()
            .map(|tj| {
                let mut b = [[0.0; 2]; 2];
                for a in 0..2 {
                    for c in 0..2 {
                        b[a][c] = (0..3).map(|i| pj[a][i] * tj[i][c]).sum();
                    }
                }
                b
            })
            .collect();
        blocks.push(row);
    }
    Ok(Reprojection {
        landmark,
        points,
        blocks,
    })
}
