//! Homogeneous-coordinate primitives and the Plane+Parallax parametrization.
//!
//! A homography `H` maps a point in a neighboring frame back into the
//! reference frame so that points on the reference plane line up:
//! `x = <H x'>`. The residual motion of an off-plane point is then
//! `u_p = A b / (A b - 1) * (e - x)`, where `A` is the per-pixel structure
//! and `(H, b, e)` are per-frame parameters.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::field::{BinaryMask, FlowField, ScalarField};

/// Threshold on the third homogeneous coordinate.
pub const EPS_HOMOGENEOUS: f64 = 1e-12;
/// Minimum distance of `A b` from 1.
pub const EPS_STRUCTURE: f64 = 1e-6;
/// Minimum distance of a pixel from the epipole.
pub const EPS_EPIPOLE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Planar homography, stored with unit Frobenius norm and a canonical sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::SingularHomography);
        }
        let mut m = m / norm;
        // relative to unit norm, so this is scale-free
        if m.determinant().abs() < 1e-14 {
            return Err(Error::SingularHomography);
        }
        let flip = if m[(2, 2)] != 0.0 {
            m[(2, 2)] < 0.0
        } else {
            // row-major scan
            let mut first = 0.0;
            'scan: for r in 0..3 {
                for c in 0..3 {
                    if m[(r, c)] != 0.0 {
                        first = m[(r, c)];
                        break 'scan;
                    }
                }
            }
            first < 0.0
        };
        if flip {
            m = -m;
        }
        Ok(Self { m })
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Parse(format!("homography needs 9 values, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is a valid homography")
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)).expect("translation is a valid homography")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.m.try_inverse().ok_or(Error::SingularHomography)?;
        Self::new(inv)
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        hom_apply(self, p)
    }

    /// Distance between two homographies after normalization.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(self.m * other.m)
    }
}

/// Per-direction Plane+Parallax parameters `{H, b, e}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PppParams {
    pub h: Homography,
    pub b: f64,
    pub e: Point2,
}

impl PppParams {
    pub fn new(h: Homography, b: f64, e: Point2) -> Result<Self> {
        if !b.is_finite() || b == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "camera-motion parameter b = {b} must be finite and nonzero"
            )));
        }
        if !e.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { h, b, e })
    }
}

#[inline]
fn project(m: &Matrix3<f64>, p: Point2) -> Result<Point2> {
    // dividing by m22 first keeps affine maps exact
    let scale = if m[(2, 2)] != 0.0 { m[(2, 2)] } else { 1.0 };
    let v = (m / scale) * Vector3::new(p.x, p.y, 1.0);
    let z = v[2] * scale;
    if !(z.abs() > EPS_HOMOGENEOUS) {
        return Err(Error::DegeneratePoint(z));
    }
    Ok(Point2::new(v[0] / v[2], v[1] / v[2]))
}

/// Perspective-normalized `<H p_h>`.
pub fn hom_apply(h: &Homography, p: Point2) -> Result<Point2> {
    project(&h.m, p)
}

/// Residual flow after planar registration, `<H (x + u0)_h> - x`.
///
/// Pixels whose mapping degenerates get a zero vector and are cleared in
/// the returned validity mask.
pub fn residual_flow(h: &Homography, u0: &FlowField) -> (FlowField, BinaryMask) {
    let (w, ht) = u0.dims();
    let mut out = FlowField::zeros(w, ht);
    let mut valid = BinaryMask::filled(w, ht, true);
    for y in 0..ht {
        for x in 0..w {
            let u = u0.get(x, y);
            let p = Point2::new(x as f64, y as f64);
            match hom_apply(h, Point2::new(p.x + u[0], p.y + u[1])) {
                Ok(q) if q.is_finite() && u[0].is_finite() && u[1].is_finite() => out.set(x, y, [q.x - p.x, q.y - p.y]),
                _ => valid.set(x, y, false),
            }
        }
    }
    (out, valid)
}

/// Returns `A b` after checking it is usable. `A b` within
/// [`EPS_STRUCTURE`] of 1 has no finite parallax and is reported as
/// singular.
#[inline]
fn checked_ab(a: f64, b: f64) -> Result<f64> {
    let ab = a * b;
    if !ab.is_finite() || (ab - 1.0).abs() < EPS_STRUCTURE {
        return Err(Error::SingularStructure { ab });
    }
    Ok(ab)
}

/// Scale factor `A b / (A b - 1)` applied to `e - x`.
#[inline]
pub fn parallax_factor(a: f64, b: f64) -> Result<f64> {
    let ab = checked_ab(a, b)?;
    Ok(ab / (ab - 1.0))
}

/// Structural component of the flow at `p`, collinear with `e - p`.
pub fn parallax_flow(a: f64, params: &PppParams, p: Point2) -> Result<Point2> {
    let f = parallax_factor(a, params.b)?;
    Ok((params.e - p) * f)
}

/// Signed parallax magnitude `w = A b |q| / (A b - 1)`.
pub fn parallax_magnitude(a: f64, b: f64, q_norm: f64) -> Result<f64> {
    Ok(parallax_factor(a, b)? * q_norm)
}

/// Inverse of [`parallax_magnitude`]: `A = w / (b (w - |q|))`.
pub fn structure_from_parallax(w: f64, b: f64, q_norm: f64) -> Result<f64> {
    let denom = w - q_norm;
    if !denom.is_finite() || denom.abs() < EPS_STRUCTURE || b == 0.0 || !b.is_finite() {
        return Err(Error::SingularParallax { w, q_norm });
    }
    Ok(w / (b * denom))
}

/// Scalar projection of a residual flow vector onto the line from `p` to `e`.
pub fn project_onto_parallax_line(u_r: Point2, p: Point2, e: Point2) -> Result<f64> {
    let q = e - p;
    let n = q.norm();
    if !(n >= EPS_EPIPOLE) {
        return Err(Error::EpipoleCoincident);
    }
    Ok(u_r.dot(q) / n)
}

/// Correspondence of `p` in the neighboring frame,
/// `s(p, A, theta) = <H^-1 (p + A b / (A b - 1) (e - p))_h>`.
///
/// `h_inv` must be the inverse of `params.h`; it is passed separately so
/// per-pixel callers invert once.
pub fn warp_coords_with(h_inv: &Homography, a: f64, params: &PppParams, p: Point2) -> Result<Point2> {
    let m = p + parallax_flow(a, params, p)?;
    hom_apply(h_inv, m)
}

pub fn warp_coords(p: Point2, a: f64, params: &PppParams) -> Result<Point2> {
    let h_inv = params.h.inverse()?;
    warp_coords_with(&h_inv, a, params, p)
}

/// Warped location and its derivative with respect to `A`.
///
/// `d/dA [A b / (A b - 1)] = -b / (A b - 1)^2`, pushed through the
/// projective Jacobian of `H^-1`.
pub fn warp_coords_and_derivative(
    h_inv: &Homography,
    a: f64,
    params: &PppParams,
    p: Point2,
) -> Result<(Point2, Point2)> {
    let ab = checked_ab(a, params.b)?;
    let q = params.e - p;
    let f = ab / (ab - 1.0);
    let df = -params.b / ((ab - 1.0) * (ab - 1.0));
    let m = p + q * f;
    let dm = q * df;
    let hm = h_inv.matrix();
    let v = hm * Vector3::new(m.x, m.y, 1.0);
    if !(v[2].abs() > EPS_HOMOGENEOUS) {
        return Err(Error::DegeneratePoint(v[2]));
    }
    let inv_z = 1.0 / v[2];
    let s = Point2::new(v[0] * inv_z, v[1] * inv_z);
    let jac = projective_jacobian(hm, &v);
    let ds = Point2::new(
        jac[(0, 0)] * dm.x + jac[(0, 1)] * dm.y,
        jac[(1, 0)] * dm.x + jac[(1, 1)] * dm.y,
    );
    Ok((s, ds))
}

/// Jacobian of `<M m_h>` w.r.t. `m`, given `v = M m_h`.
fn projective_jacobian(m: &Matrix3<f64>, v: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / v[2];
    let mut j = Matrix2x3::zeros();
    for c in 0..3 {
        j[(0, c)] = (m[(0, c)] - v[0] * inv_z * m[(2, c)]) * inv_z;
        j[(1, c)] = (m[(1, c)] - v[1] * inv_z * m[(2, c)]) * inv_z;
    }
    j
}

/// Induced flow field `s(x, A, theta) - x` plus a mask of singular pixels.
pub fn warp_field(a: &ScalarField, params: &PppParams) -> Result<(FlowField, BinaryMask)> {
    let h_inv = params.h.inverse()?;
    let (w, h) = a.dims();
    let mut flow = FlowField::zeros(w, h);
    let mut valid = BinaryMask::filled(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let p = Point2::new(x as f64, y as f64);
            match warp_coords_with(&h_inv, a.get(x, y), params, p) {
                Ok(s) if s.is_finite() => flow.set(x, y, [s.x - p.x, s.y - p.y]),
                _ => valid.set(x, y, false),
            }
        }
    }
    Ok((flow, valid))
}
