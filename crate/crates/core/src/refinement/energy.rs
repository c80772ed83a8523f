//! The rigid-scene energy and its pieces.

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, ScalarField};
use crate::geometry::{warp_coords_and_derivative, warp_coords_with, Homography, Point2, PppParams};
use crate::robust::{charbonnier, lorentzian, mad_scale_or_floor, RobustScale, CHARBONNIER_EPS};
use crate::sampling::{bilinear_sample_into, bilinear_sample_with_gradient};

use super::RefinementInputs;

/// Robust scales of the Lorentzian terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyScales {
    /// `data[d][c]`: direction (0 forward, 1 backward) and augmented channel.
    pub data: [[RobustScale; 3]; 2],
    pub first_order: RobustScale,
    pub second_order: RobustScale,
}

impl EnergyScales {
    /// Elementwise minimum. The Lorentzian grows with its scale, so
    /// replacing the scales by this never raises the energy.
    pub fn min(&self, other: &Self) -> Self {
        let m = |a: RobustScale, b: RobustScale| if b.sigma() < a.sigma() { b } else { a };
        Self {
            data: [0, 1].map(|d| [0, 1, 2].map(|c| m(self.data[d][c], other.data[d][c]))),
            first_order: m(self.first_order, other.first_order),
            second_order: m(self.second_order, other.second_order),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConfig {
    pub lambda_c: f64,
    pub lambda_1st: f64,
    pub lambda_2nd: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub theta_alternations: usize,
    /// Fixed scales. When `None` they are estimated from the initial state
    /// and re-estimated after every outer iteration, never growing.
    pub scales: Option<EnergyScales>,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.0,
            lambda_1st: 0.1,
            lambda_2nd: 5e3,
            outer_iters: 5,
            inner_iters: 1,
            theta_alternations: 2,
            scales: None,
            cg_tol: 1e-6,
            cg_max_iters: 400,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_1st", self.lambda_1st),
            ("lambda_2nd", self.lambda_2nd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidConfig("cg_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub data: f64,
    pub consistency: f64,
    pub first_order: f64,
    pub second_order: f64,
    /// Rigid pixels whose warp is singular in some visible direction.
    pub singular: usize,
}

impl EnergyBreakdown {
    fn finish(mut self, cfg: &EnergyConfig) -> Self {
        self.total = self.data
            + cfg.lambda_c * self.consistency
            + cfg.lambda_1st * self.first_order
            + cfg.lambda_2nd * self.second_order;
        self
    }
}

/// One neighbouring frame as seen by the data term.
pub(crate) struct Direction<'a> {
    pub img: &'a crate::field::Image,
    pub theta: PppParams,
    pub h_inv: Homography,
    pub visible: &'a BinaryMask,
    pub scales: [RobustScale; 3],
}

impl<'a> Direction<'a> {
    pub fn new(inputs: &'a RefinementInputs, forward: bool, theta: &PppParams, scales: &EnergyScales) -> Result<Self> {
        let (img, visible, k) = if forward {
            (&inputs.next, &inputs.v_plus, 0)
        } else {
            (&inputs.prev, &inputs.v_minus, 1)
        };
        Ok(Self {
            img,
            theta: *theta,
            h_inv: theta.h.inverse()?,
            visible,
            scales: scales.data[k],
        })
    }

    /// Photometric residuals of the three channels at `p` for structure `a`.
    #[inline]
    pub fn residuals(&self, reference: &[f64], p: Point2, a: f64) -> Option<[f64; 3]> {
        let s = warp_coords_with(&self.h_inv, a, &self.theta, p).ok()?;
        if !s.is_finite() {
            return None;
        }
        let mut v = [0.0; 3];
        bilinear_sample_into(self.img, s, &mut v);
        Some([v[0] - reference[0], v[1] - reference[1], v[2] - reference[2]])
    }

    /// Residuals and their derivatives with respect to `a`.
    #[inline]
    pub fn linearize(&self, reference: &[f64], p: Point2, a: f64) -> Option<([f64; 3], [f64; 3])> {
        let (s, ds) = warp_coords_and_derivative(&self.h_inv, a, &self.theta, p).ok()?;
        if !s.is_finite() || !ds.is_finite() {
            return None;
        }
        let (mut v, mut gx, mut gy) = ([0.0; 3], [0.0; 3], [0.0; 3]);
        bilinear_sample_with_gradient(self.img, s, &mut v, &mut gx, &mut gy);
        let mut r = [0.0; 3];
        let mut g = [0.0; 3];
        for c in 0..3 {
            r[c] = v[c] - reference[c];
            g[c] = gx[c] * ds.x + gy[c] * ds.y;
        }
        Some((r, g))
    }

    pub fn penalty(&self, r: &[f64; 3]) -> f64 {
        (0..3).map(|c| lorentzian(r[c], self.scales[c])).sum()
    }
}

/// A finite-difference stencil on the structure, `sum_j coef_j A[idx_j]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub coef: [f64; 4],
    pub len: usize,
    /// `w_x`, `w_y` or `w_x w_y` at the center pixel.
    pub weight: f64,
    pub second: bool,
}

impl Stencil {
    #[inline]
    pub fn apply(&self, a: &[f64]) -> f64 {
        (0..self.len).map(|j| self.coef[j] * a[self.idx[j]]).sum()
    }
}

/// All smoothness stencils centered on rigid pixels whose support lies
/// entirely inside the image and inside the rigid set.
pub(crate) fn stencils(r: &BinaryMask, w_x: &ScalarField, w_y: &ScalarField) -> Vec<Stencil> {
    let (w, h) = r.dims();
    let rigid =
        |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && r.get(x as usize, y as usize);
    let id = |x: isize, y: isize| y as usize * w + x as usize;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !rigid(x, y) {
                continue;
            }
            let (wx, wy) = (w_x.get(x as usize, y as usize), w_y.get(x as usize, y as usize));
            let c = id(x, y);
            if rigid(x - 1, y) && rigid(x + 1, y) {
                let (l, rr) = (id(x - 1, y), id(x + 1, y));
                out.push(Stencil {
                    idx: [rr, l, 0, 0],
                    coef: [0.5, -0.5, 0.0, 0.0],
                    len: 2,
                    weight: wx,
                    second: false,
                });
                out.push(Stencil {
                    idx: [rr, c, l, 0],
                    coef: [1.0, -2.0, 1.0, 0.0],
                    len: 3,
                    weight: wx,
                    second: true,
                });
            }
            if rigid(x, y - 1) && rigid(x, y + 1) {
                let (u, d) = (id(x, y - 1), id(x, y + 1));
                out.push(Stencil {
                    idx: [d, u, 0, 0],
                    coef: [0.5, -0.5, 0.0, 0.0],
                    len: 2,
                    weight: wy,
                    second: false,
                });
                out.push(Stencil {
                    idx: [d, c, u, 0],
                    coef: [1.0, -2.0, 1.0, 0.0],
                    len: 3,
                    weight: wy,
                    second: true,
                });
            }
            if rigid(x + 1, y + 1) && rigid(x + 1, y - 1) && rigid(x - 1, y + 1) && rigid(x - 1, y - 1) {
                out.push(Stencil {
                    idx: [id(x + 1, y + 1), id(x + 1, y - 1), id(x - 1, y + 1), id(x - 1, y - 1)],
                    coef: [0.25, -0.25, -0.25, 0.25],
                    len: 4,
                    weight: wx * wy,
                    second: true,
                });
            }
        }
    }
    out
}

pub(crate) fn check_inputs(a: &ScalarField, inputs: &RefinementInputs, r: &BinaryMask) -> Result<()> {
    let d = inputs.reference.dims();
    ensure_same_dims(d, a.dims())?;
    ensure_same_dims(d, r.dims())
}

/// Evaluate the energy for structure values `a` (row-major).
pub(crate) fn energy_raw(
    a: &[f64],
    dirs: &[Direction<'_>; 2],
    inputs: &RefinementInputs,
    r: &BinaryMask,
    stencils: &[Stencil],
    scales: &EnergyScales,
    cfg: &EnergyConfig,
) -> EnergyBreakdown {
    let (w, h) = r.dims();
    let mut e = EnergyBreakdown::default();
    for y in 0..h {
        for x in 0..w {
            if !r.get(x, y) {
                continue;
            }
            let i = y * w + x;
            let p = Point2::new(x as f64, y as f64);
            let reference = inputs.reference.pixel(x, y);
            let mut singular = false;
            for (k, dir) in dirs.iter().enumerate() {
                if !dir.visible.get(x, y) {
                    continue;
                }
                match dir.residuals(reference, p, a[i]) {
                    Some(res) => e.data += dir.penalty(&res),
                    None => singular = true,
                }
                let (target, ok) = inputs.consistency_target(k);
                if ok.get(x, y) {
                    e.consistency += charbonnier(a[i] - target.get(x, y), CHARBONNIER_EPS);
                }
            }
            e.singular += singular as usize;
        }
    }
    for s in stencils {
        let v = s.apply(a);
        if s.second {
            e.second_order += s.weight * lorentzian(v, scales.second_order);
        } else {
            e.first_order += s.weight * lorentzian(v, scales.first_order);
        }
    }
    e.finish(cfg)
}

/// Robust scales measured on a state: MADs of the photometric residuals per
/// direction and channel, and of the first and second differences of `a`.
pub fn estimate_scales(
    a: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
) -> Result<EnergyScales> {
    check_inputs(a, inputs, r)?;
    let floor = RobustScale::new(1.0)?;
    let tmp = EnergyScales {
        data: [[floor; 3]; 2],
        first_order: floor,
        second_order: floor,
    };
    let dirs = [
        Direction::new(inputs, true, theta_plus, &tmp)?,
        Direction::new(inputs, false, theta_minus, &tmp)?,
    ];
    let (w, h) = r.dims();
    let mut res: [[Vec<f64>; 3]; 2] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if !r.get(x, y) {
                continue;
            }
            let p = Point2::new(x as f64, y as f64);
            for (k, dir) in dirs.iter().enumerate() {
                if dir.visible.get(x, y) {
                    if let Some(v) = dir.residuals(inputs.reference.pixel(x, y), p, a.get(x, y)) {
                        for c in 0..3 {
                            res[k][c].push(v[c]);
                        }
                    }
                }
            }
        }
    }
    let data = res.map(|d| d.map(|v| mad_scale_or_floor(&v)));
    let st = stencils(r, &inputs.w_x, &inputs.w_y);
    let (first, second): (Vec<&Stencil>, Vec<&Stencil>) = st.iter().partition(|s| !s.second);
    let first: Vec<f64> = first.iter().map(|s| s.apply(a.data())).collect();
    let second: Vec<f64> = second.iter().map(|s| s.apply(a.data())).collect();
    Ok(EnergyScales {
        data,
        first_order: mad_scale_or_floor(&first),
        second_order: mad_scale_or_floor(&second),
    })
}

fn scales_or_estimate(
    a: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    cfg: &EnergyConfig,
) -> Result<EnergyScales> {
    match cfg.scales {
        Some(s) => Ok(s),
        None => estimate_scales(a, theta_plus, theta_minus, inputs, r),
    }
}

/// Total energy and its components, summed over the rigid pixels `r`.
pub fn energy_eval(
    a: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    cfg: &EnergyConfig,
) -> Result<EnergyBreakdown> {
    check_inputs(a, inputs, r)?;
    let scales = scales_or_estimate(a, theta_plus, theta_minus, inputs, r, cfg)?;
    let dirs = [
        Direction::new(inputs, true, theta_plus, &scales)?,
        Direction::new(inputs, false, theta_minus, &scales)?,
    ];
    let st = stencils(r, &inputs.w_x, &inputs.w_y);
    Ok(energy_raw(a.data(), &dirs, inputs, r, &st, &scales, cfg))
}

/// Analytic derivative of the data term with respect to `A` at each rigid
/// pixel; zero elsewhere and at singular pixels.
pub fn data_term_gradient(
    a: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    scales: &EnergyScales,
) -> Result<ScalarField> {
    check_inputs(a, inputs, r)?;
    let dirs = [
        Direction::new(inputs, true, theta_plus, scales)?,
        Direction::new(inputs, false, theta_minus, scales)?,
    ];
    let (w, h) = r.dims();
    let mut out = ScalarField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if !r.get(x, y) {
                continue;
            }
            let p = Point2::new(x as f64, y as f64);
            let mut g = 0.0;
            for dir in &dirs {
                if !dir.visible.get(x, y) {
                    continue;
                }
                if let Some((res, d)) = dir.linearize(inputs.reference.pixel(x, y), p, a.get(x, y)) {
                    for c in 0..3 {
                        g += crate::robust::lorentzian_derivative(res[c], dir.scales[c]) * d[c];
                    }
                }
            }
            out.set(x, y, g);
        }
    }
    Ok(out)
}

/// Rigid visible pixels of a direction whose warp is regular.
pub(crate) fn regular_pixels(
    a: &ScalarField,
    dir: &Direction<'_>,
    inputs: &RefinementInputs,
    r: &BinaryMask,
) -> Vec<(usize, usize)> {
    let (w, h) = r.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if r.get(x, y)
                && dir.visible.get(x, y)
                && dir
                    .residuals(
                        inputs.reference.pixel(x, y),
                        Point2::new(x as f64, y as f64),
                        a.get(x, y),
                    )
                    .is_some()
            {
                out.push((x, y));
            }
        }
    }
    out
}

/// Data-term energy of one direction over `pixels`, used by the parameter
/// step. A parameter change that makes one of them singular is rejected
/// with an infinite value.
pub(crate) fn data_energy(
    a: &ScalarField,
    dir: &Direction<'_>,
    inputs: &RefinementInputs,
    pixels: &[(usize, usize)],
) -> f64 {
    let mut e = 0.0;
    for &(x, y) in pixels {
        let p = Point2::new(x as f64, y as f64);
        match dir.residuals(inputs.reference.pixel(x, y), p, a.get(x, y)) {
            Some(res) => e += dir.penalty(&res),
            None => return f64::INFINITY,
        }
    }
    e
}
