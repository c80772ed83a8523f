//! Parallax projection, camera-motion scalars, visibility and the fused
//! initial structure.

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, FlowField, ScalarField};
use crate::geometry::{project_onto_parallax_line, structure_from_parallax, Point2};
use crate::robust::{lorentzian, mad, mad_scale, mad_scale_or_floor, median, RobustScale};

/// Minimum number of samples for the b estimates.
pub const MIN_STRUCTURE_SAMPLES: usize = 16;

/// Signed parallax `w` and distance to the epipole `|q|` per pixel.
#[derive(Clone, Debug)]
pub struct ParallaxField {
    pub w: ScalarField,
    pub q_norm: ScalarField,
    pub valid: BinaryMask,
}

pub fn parallax_field(u_r: &FlowField, valid: &BinaryMask, e: Point2) -> ParallaxField {
    let (width, height) = u_r.dims();
    let mut w = ScalarField::zeros(width, height);
    let mut q_norm = ScalarField::zeros(width, height);
    let mut ok = BinaryMask::filled(width, height, false);
    for y in 0..height {
        for x in 0..width {
            let p = Point2::new(x as f64, y as f64);
            q_norm.set(x, y, (e - p).norm());
            if !valid.get(x, y) {
                continue;
            }
            let u = u_r.get(x, y);
            if let Ok(v) = project_onto_parallax_line(Point2::new(u[0], u[1]), p, e) {
                w.set(x, y, v);
                ok.set(x, y, true);
            }
        }
    }
    ParallaxField { w, q_norm, valid: ok }
}

/// Structure for a given `b`; pixels with `w` too close to `|q|` are
/// dropped from the returned mask and set to zero.
pub fn structure_field(p: &ParallaxField, b: f64) -> (ScalarField, BinaryMask) {
    let (width, height) = p.w.dims();
    let mut a = ScalarField::zeros(width, height);
    let mut ok = BinaryMask::filled(width, height, false);
    for y in 0..height {
        for x in 0..width {
            if !p.valid.get(x, y) {
                continue;
            }
            if let Ok(v) = structure_from_parallax(p.w.get(x, y), b, p.q_norm.get(x, y)) {
                a.set(x, y, v);
                ok.set(x, y, true);
            }
        }
    }
    (a, ok)
}

fn masked_values(f: &ScalarField, mask: &BinaryMask) -> Vec<f64> {
    f.data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BPlus {
    pub b: f64,
    /// Set when the structure has zero spread and `b` defaulted to 1.
    pub degenerate: bool,
}

const MAD_ZERO_TOLERANCE: f64 = 1e-9;

/// `b+` such that the structure recomputed with it has unit MAD. `a_unit`
/// is the structure computed with `b = 1`; since `A` scales as `1/b` the
/// answer is the raw MAD itself.
pub fn choose_b_plus(a_unit: &ScalarField, mask: &BinaryMask) -> Result<BPlus> {
    ensure_same_dims(a_unit.dims(), mask.dims())?;
    let vals = masked_values(a_unit, mask);
    if vals.len() < MIN_STRUCTURE_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_STRUCTURE_SAMPLES,
            got: vals.len(),
        });
    }
    let m = mad(&vals).unwrap_or(0.0);
    // a MAD at round-off level of the field means a majority sits exactly
    // on the reference plane
    let peak = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(m > MAD_ZERO_TOLERANCE * peak) || !m.is_finite() {
        log::warn!("structure has zero spread, using b+ = 1");
        return Ok(BPlus {
            b: 1.0,
            degenerate: true,
        });
    }
    Ok(BPlus {
        b: m,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BInitMode {
    #[default]
    Robust,
    Median,
}

const B_GRID_SAMPLES: usize = 200;
const B_MIN: f64 = 1e-3;
const B_MAX: f64 = 1e3;

struct BSamples {
    a_plus: Vec<f64>,
    a_minus_unit: Vec<f64>,
}

impl BSamples {
    fn cost(&self, b: f64, scale: RobustScale) -> f64 {
        self.a_plus
            .iter()
            .zip(&self.a_minus_unit)
            .map(|(&ap, &am)| lorentzian(ap - am / b, scale))
            .sum()
    }

    fn residuals(&self, b: f64) -> Vec<f64> {
        self.a_plus
            .iter()
            .zip(&self.a_minus_unit)
            .map(|(&ap, &am)| ap - am / b)
            .collect()
    }

    fn grid_best(&self, grid: &[f64], scale: RobustScale) -> usize {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for (i, &b) in grid.iter().enumerate() {
            let c = self.cost(b, scale);
            if c < best_cost {
                best_cost = c;
                best = i;
            }
        }
        best
    }
}

fn golden_section(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Estimate `b-` so that the backward structure agrees with `a_plus`.
///
/// `w_minus`/`q_norm_minus` is the backward parallax field; `visible` selects
/// the jointly visible pixels with valid structure in both directions.
pub fn estimate_b_minus(
    a_plus: &ScalarField,
    parallax_minus: &ParallaxField,
    visible: &BinaryMask,
    mode: BInitMode,
) -> Result<f64> {
    ensure_same_dims(a_plus.dims(), visible.dims())?;
    ensure_same_dims(a_plus.dims(), parallax_minus.w.dims())?;
    let (width, height) = a_plus.dims();
    let mut s = BSamples {
        a_plus: Vec::new(),
        a_minus_unit: Vec::new(),
    };
    for y in 0..height {
        for x in 0..width {
            if !visible.get(x, y) || !parallax_minus.valid.get(x, y) {
                continue;
            }
            let Ok(am) = structure_from_parallax(parallax_minus.w.get(x, y), 1.0, parallax_minus.q_norm.get(x, y))
            else {
                continue;
            };
            let ap = a_plus.get(x, y);
            if am.is_finite() && ap.is_finite() {
                s.a_plus.push(ap);
                s.a_minus_unit.push(am);
            }
        }
    }
    if s.a_plus.len() < MIN_STRUCTURE_SAMPLES {
        return Err(Error::NoOverlap(s.a_plus.len()));
    }

    match mode {
        BInitMode::Median => {
            let per_pixel: Vec<f64> = s
                .a_plus
                .iter()
                .zip(&s.a_minus_unit)
                .filter(|(ap, _)| ap.abs() > 1e-3)
                .map(|(ap, am)| am / ap)
                .filter(|b| b.is_finite() && *b != 0.0)
                .collect();
            if per_pixel.len() < MIN_STRUCTURE_SAMPLES {
                return Err(Error::NoOverlap(per_pixel.len()));
            }
            let b = median(&per_pixel).ok_or(Error::NoOverlap(0))?;
            if b == 0.0 {
                return Err(Error::DegenerateStructure);
            }
            Ok(b)
        }
        BInitMode::Robust => {
            let step = (B_MAX / B_MIN).ln() / (B_GRID_SAMPLES - 1) as f64;
            let mags: Vec<f64> = (0..B_GRID_SAMPLES).map(|i| B_MIN * (i as f64 * step).exp()).collect();
            let grid: Vec<f64> = mags.iter().map(|m| -m).chain(mags.iter().copied()).collect();

            let scale0 = mad_scale_or_floor(&s.a_plus);
            let i0 = s.grid_best(&grid, scale0);
            let scale = mad_scale(&s.residuals(grid[i0])).unwrap_or(scale0);
            let i = s.grid_best(&grid, scale);

            // polish in log|b| between the grid neighbours of the same sign
            let sign = grid[i].signum();
            let k = i % B_GRID_SAMPLES;
            let lo = (B_MIN.ln() + k.saturating_sub(1) as f64 * step).max(B_MIN.ln());
            let hi = (B_MIN.ln() + (k + 1) as f64 * step).min(B_MAX.ln());
            let t = golden_section(lo, hi, 1e-12, |t| s.cost(sign * t.exp(), scale));
            let polished = sign * t.exp();
            if s.cost(polished, scale) <= s.cost(grid[i], scale) {
                Ok(polished)
            } else {
                Ok(grid[i])
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OcclusionConfig {
    pub relative: f64,
    pub absolute: f64,
    /// Multiple of the robust forward-backward residual scale added to the
    /// threshold; zero gives the plain fixed threshold.
    pub noise_factor: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            relative: 0.01,
            absolute: 0.5,
            noise_factor: 3.03,
        }
    }
}

/// Forward-backward consistency check. `u_fwd` goes from the reference
/// frame to a neighbour, `u_rev` from that neighbour back.
pub fn occlusion_masks(u_fwd: &FlowField, u_rev: &FlowField, cfg: &OcclusionConfig) -> Result<BinaryMask> {
    ensure_same_dims(u_fwd.dims(), u_rev.dims())?;
    let (width, height) = u_fwd.dims();
    let n = width * height;
    let mut residual = vec![[f64::NAN; 2]; n];
    let mut bound = vec![0.0; n];
    let mut pooled = Vec::with_capacity(2 * n);
    for y in 0..height {
        for x in 0..width {
            let u = u_fwd.get(x, y);
            let p = Point2::new(x as f64 + u[0], y as f64 + u[1]);
            let (ub, oob) = u_rev.sample(p);
            if oob || !p.is_finite() {
                continue;
            }
            let r = [u[0] + ub[0], u[1] + ub[1]];
            let i = y * width + x;
            residual[i] = r;
            bound[i] = cfg.relative * (u[0] * u[0] + u[1] * u[1] + ub[0] * ub[0] + ub[1] * ub[1]) + cfg.absolute;
            pooled.push(r[0]);
            pooled.push(r[1]);
        }
    }
    let noise = if cfg.noise_factor > 0.0 && pooled.len() >= 2 {
        cfg.noise_factor * mad_scale(&pooled).map(|s| s.sigma()).unwrap_or(0.0)
    } else {
        0.0
    };
    let data = residual
        .iter()
        .zip(&bound)
        .map(|(r, &b)| r[0].is_finite() && r[0].hypot(r[1]) <= b + noise)
        .collect();
    BinaryMask::from_vec(width, height, data)
}

/// Visibility-weighted mean of the two structure estimates; zero where
/// neither direction is visible.
pub fn fuse_structure(
    a_plus: &ScalarField,
    a_minus: &ScalarField,
    v_plus: &BinaryMask,
    v_minus: &BinaryMask,
) -> Result<ScalarField> {
    let dims = a_plus.dims();
    ensure_same_dims(dims, a_minus.dims())?;
    ensure_same_dims(dims, v_plus.dims())?;
    ensure_same_dims(dims, v_minus.dims())?;
    let data = (0..dims.0 * dims.1)
        .map(|i| {
            let (vp, vm) = (v_plus.data()[i], v_minus.data()[i]);
            let num = if vp { a_plus.data()[i] } else { 0.0 } + if vm { a_minus.data()[i] } else { 0.0 };
            num / (vp as u8 + vm as u8).max(1) as f64
        })
        .collect();
    ScalarField::from_vec(dims.0, dims.1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::parallax_magnitude;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_structure(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.random_range(-1.5..1.5)).collect();
        ScalarField::from_vec(w, h, data).unwrap()
    }

    /// Backward parallax field realizing `a` with camera scalar `b`.
    fn parallax_for(a: &ScalarField, b: f64, e: Point2) -> ParallaxField {
        let (w, h) = a.dims();
        let mut pf = ParallaxField {
            w: ScalarField::zeros(w, h),
            q_norm: ScalarField::zeros(w, h),
            valid: BinaryMask::filled(w, h, true),
        };
        for y in 0..h {
            for x in 0..w {
                let q = (e - Point2::new(x as f64, y as f64)).norm();
                pf.q_norm.set(x, y, q);
                pf.w.set(x, y, parallax_magnitude(a.get(x, y), b, q).unwrap());
            }
        }
        pf
    }

    #[test]
    fn b_plus_from_raw_mad() {
        let a = ScalarField::from_fn(8, 8, |x, _| 4.0 * x as f64);
        let m = BinaryMask::filled(8, 8, true);
        let raw = mad(a.data()).unwrap();
        let bp = choose_b_plus(&a, &m).unwrap();
        assert_eq!(bp.b, raw);
        let scaled: Vec<f64> = a.data().iter().map(|v| v / bp.b).collect();
        assert!((mad(&scaled).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn b_plus_mad_four() {
        // |A - median| = 4 everywhere
        let a = ScalarField::from_fn(4, 4, |x, y| if (x + y) % 2 == 0 { 4.0 } else { -4.0 });
        let bp = choose_b_plus(&a, &BinaryMask::filled(4, 4, true)).unwrap();
        assert_eq!(bp.b, 4.0);
    }

    #[test]
    fn b_plus_degenerate() {
        let a = ScalarField::zeros(8, 8);
        let bp = choose_b_plus(&a, &BinaryMask::filled(8, 8, true)).unwrap();
        assert_eq!(
            bp,
            BPlus {
                b: 1.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn b_minus_noise_free_both_modes() {
        let a = random_structure(16, 16, 1);
        let e = Point2::new(40.0, -12.0);
        let b_true = -0.37;
        let pf = parallax_for(&a, b_true, e);
        let vis = BinaryMask::filled(16, 16, true);
        for mode in [BInitMode::Robust, BInitMode::Median] {
            let b = estimate_b_minus(&a, &pf, &vis, mode).unwrap();
            assert!(((b - b_true) / b_true).abs() < 1e-6, "{mode:?}: {b}");
        }
    }

    #[test]
    fn b_minus_contaminated() {
        let a = random_structure(32, 32, 2);
        let e = Point2::new(10.0, 20.0);
        let b_true = 0.8;
        let mut pf = parallax_for(&a, b_true, e);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in pf.w.data_mut().iter_mut() {
            if rng.random::<f64>() < 0.2 {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        let vis = BinaryMask::filled(32, 32, true);
        let robust = estimate_b_minus(&a, &pf, &vis, BInitMode::Robust).unwrap();
        assert!(((robust - b_true) / b_true).abs() < 0.02, "robust {robust}");
        let med = estimate_b_minus(&a, &pf, &vis, BInitMode::Median).unwrap();
        assert!(((med - b_true) / b_true).abs() < 0.05, "median {med}");
    }

    #[test]
    fn b_minus_needs_overlap() {
        let a = random_structure(8, 8, 4);
        let pf = parallax_for(&a, 1.0, Point2::new(50.0, 50.0));
        let vis = BinaryMask::filled(8, 8, false);
        assert!(matches!(
            estimate_b_minus(&a, &pf, &vis, BInitMode::Robust),
            Err(Error::NoOverlap(0))
        ));
    }

    #[test]
    fn inverse_flows_are_visible() {
        let f = FlowField::constant(16, 16, [2.0, -1.0]);
        let b = FlowField::constant(16, 16, [-2.0, 1.0]);
        let v = occlusion_masks(&f, &b, &OcclusionConfig::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = x + 2 <= 15 && y >= 1;
                assert_eq!(v.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn flow_leaving_frame_is_occluded() {
        let f = FlowField::constant(16, 16, [32.0, 0.0]);
        let b = FlowField::constant(16, 16, [-32.0, 0.0]);
        let v = occlusion_masks(&f, &b, &OcclusionConfig::default()).unwrap();
        assert_eq!(v.count(), 0);
    }

    #[test]
    fn inconsistent_flow_is_occluded() {
        let f = FlowField::constant(16, 16, [1.0, 0.0]);
        let mut b = FlowField::constant(16, 16, [-1.0, 0.0]);
        for y in 4..8 {
            for x in 4..8 {
                b.set(x, y, [6.0, 0.0]);
            }
        }
        let v = occlusion_masks(&f, &b, &OcclusionConfig::default()).unwrap();
        assert!(!v.get(4, 5));
        assert!(v.get(10, 10));
    }

    #[test]
    fn fusion_cases() {
        let ap = ScalarField::constant(8, 8, 2.0);
        let am = ScalarField::constant(8, 8, 4.0);
        let t = BinaryMask::filled(8, 8, true);
        let f = BinaryMask::filled(8, 8, false);
        assert_eq!(fuse_structure(&ap, &am, &t, &f).unwrap().get(3, 3), 2.0);
        assert_eq!(fuse_structure(&ap, &am, &t, &t).unwrap().get(3, 3), 3.0);
        assert_eq!(fuse_structure(&ap, &am, &f, &f).unwrap().get(3, 3), 0.0);
    }

    proptest! {
        #[test]
        fn b_plus_normalizes_mad(seed in 0u64..1000, k in 0.01f64..100.0) {
            let a = random_structure(8, 8, seed).map(|v| v * k);
            let bp = choose_b_plus(&a, &BinaryMask::filled(8, 8, true)).unwrap();
            let scaled: Vec<f64> = a.data().iter().map(|v| v / bp.b).collect();
            prop_assert!((mad(&scaled).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn fusion_symmetric(vp in any::<bool>(), vm in any::<bool>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let fa = ScalarField::constant(8, 8, a);
            let fb = ScalarField::constant(8, 8, b);
            let mp = BinaryMask::filled(8, 8, vp);
            let mm = BinaryMask::filled(8, 8, vm);
            let x = fuse_structure(&fa, &fb, &mp, &mm).unwrap();
            let y = fuse_structure(&fb, &fa, &mm, &mp).unwrap();
            prop_assert_eq!(x.data(), y.data());
        }
    }
}
