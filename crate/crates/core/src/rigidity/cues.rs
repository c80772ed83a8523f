//! Per-pixel rigidity cues and their fusion.

use super::bessel::bessel_i0_scaled;
use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, FlowField, ScalarField};
use crate::geometry::Point2;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-6;

/// Posterior probability that a residual flow of length `c` at angle
/// `alpha` to the epipolar line is rigid, against a uniform direction.
pub fn direction_rigidity(alpha: f64, c: f64, sigma_d: f64) -> f64 {
    let t = c * c / (4.0 * sigma_d * sigma_d);
    let s = alpha.sin();
    // p = 1 / (1 + g(t) exp(2 t sin^2 a)), evaluated in log space
    let log_ratio = bessel_i0_scaled(t).ln() + 2.0 * t * s * s;
    if log_ratio > 700.0 {
        return (-log_ratio).exp();
    }
    1.0 / (1.0 + log_ratio.exp())
}

/// Direction cue over a residual flow field and its epipole. Pixels outside
/// `valid` or at the epipole are uninformative (0.5).
pub fn direction_field(u_r: &FlowField, valid: &BinaryMask, e: Point2, sigma_d: f64) -> Result<ScalarField> {
    ensure_same_dims(u_r.dims(), valid.dims())?;
    let (w, h) = u_r.dims();
    Ok(ScalarField::from_fn(w, h, |x, y| {
        let u = u_r.get(x, y);
        let q = e - Point2::new(x as f64, y as f64);
        if !valid.get(x, y) || q.norm() < 1e-6 {
            return 0.5;
        }
        let u = Point2::new(u[0], u[1]);
        let alpha = u.cross(q).abs().atan2(u.dot(q));
        direction_rigidity(alpha, u.norm(), sigma_d)
    }))
}

fn check4(a: &ScalarField, b: &ScalarField, vp: &BinaryMask, vm: &BinaryMask) -> Result<()> {
    ensure_same_dims(a.dims(), b.dims())?;
    ensure_same_dims(a.dims(), vp.dims())?;
    ensure_same_dims(a.dims(), vm.dims())
}

/// Visibility-weighted mean of the two direction cues; 1/2 where neither
/// direction is visible.
pub fn fuse_direction(
    p_plus: &ScalarField,
    p_minus: &ScalarField,
    v_plus: &BinaryMask,
    v_minus: &BinaryMask,
) -> Result<ScalarField> {
    check4(p_plus, p_minus, v_plus, v_minus)?;
    let (w, h) = p_plus.dims();
    Ok(ScalarField::from_fn(w, h, |x, y| {
        match (v_plus.get(x, y), v_minus.get(x, y)) {
            (true, true) => 0.5 * (p_plus.get(x, y) + p_minus.get(x, y)),
            (true, false) => p_plus.get(x, y),
            (false, true) => p_minus.get(x, y),
            (false, false) => 0.5,
        }
    }))
}

/// Agreement of the forward and backward structure estimates.
pub fn structure_consistency(
    a_plus: &ScalarField,
    a_minus: &ScalarField,
    v_plus: &BinaryMask,
    v_minus: &BinaryMask,
    sigma_s: f64,
) -> Result<ScalarField> {
    check4(a_plus, a_minus, v_plus, v_minus)?;
    if !(sigma_s > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma_s must be positive, got {sigma_s}")));
    }
    let (w, h) = a_plus.dims();
    Ok(ScalarField::from_fn(w, h, |x, y| {
        if v_plus.get(x, y) && v_minus.get(x, y) {
            let d = a_plus.get(x, y) - a_minus.get(x, y);
            (-(d * d) / (sigma_s * sigma_s)).exp()
        } else {
            0.5
        }
    }))
}

/// Product of the cues where both directions are visible, mean elsewhere.
pub fn motion_rigidity(
    p_dir: &ScalarField,
    p_struct: &ScalarField,
    v_plus: &BinaryMask,
    v_minus: &BinaryMask,
) -> Result<ScalarField> {
    check4(p_dir, p_struct, v_plus, v_minus)?;
    let (w, h) = p_dir.dims();
    Ok(ScalarField::from_fn(w, h, |x, y| {
        let (d, s) = (p_dir.get(x, y), p_struct.get(x, y));
        if v_plus.get(x, y) && v_minus.get(x, y) {
            d * s
        } else {
            0.5 * (d + s)
        }
    }))
}

/// Negative log-likelihoods of the two labels.
#[derive(Clone, Debug)]
pub struct UnaryEnergies {
    pub width: usize,
    pub height: usize,
    pub rigid: Vec<f64>,
    pub moving: Vec<f64>,
}

impl UnaryEnergies {
    pub fn len(&self) -> usize {
        self.rigid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rigid.is_empty()
    }

    pub fn from_probability(p: &ScalarField) -> Self {
        let (width, height) = p.dims();
        let clamped: Vec<f64> = p.data().iter().map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
        Self {
            width,
            height,
            rigid: clamped.iter().map(|v| -v.ln()).collect(),
            moving: clamped.iter().map(|v| -(1.0 - v).ln()).collect(),
        }
    }
}

/// Blend of semantic and motion probabilities plus the label energies.
pub fn rigidity_unary(
    p_sem: &ScalarField,
    p_motion: &ScalarField,
    lambda_rc: f64,
) -> Result<(ScalarField, UnaryEnergies)> {
    ensure_same_dims(p_sem.dims(), p_motion.dims())?;
    if !(0.0..=1.0).contains(&lambda_rc) {
        return Err(Error::InvalidConfig(format!(
            "lambda_rc must lie in [0, 1], got {lambda_rc}"
        )));
    }
    let (w, h) = p_sem.dims();
    let p = ScalarField::from_fn(w, h, |x, y| {
        (lambda_rc * p_sem.get(x, y) + (1.0 - lambda_rc) * p_motion.get(x, y)).clamp(0.0, 1.0)
    });
    let e = UnaryEnergies::from_probability(&p);
    Ok((p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn direction_limits() {
        assert_eq!(direction_rigidity(1.0, 0.0, 0.75), 0.5);
        // t = 50 at sigma_d = 1 means c = sqrt(200)
        assert!(direction_rigidity(PI / 2.0, 200f64.sqrt(), 1.0) < 1e-10);
        assert!(direction_rigidity(0.0, 8.0, 0.75) > 0.9);
        let p = direction_rigidity(0.3, 1e5, 0.75);
        assert!(p.is_finite() && p >= 0.0);
    }

    #[test]
    fn fusion_examples() {
        let one = |v: f64| ScalarField::constant(8, 8, v);
        let t = BinaryMask::filled(8, 8, true);
        let f = BinaryMask::filled(8, 8, false);
        assert_eq!(fuse_direction(&one(0.9), &one(0.1), &t, &f).unwrap().get(0, 0), 0.9);
        assert_relative_eq!(fuse_direction(&one(0.2), &one(0.6), &t, &t).unwrap().get(0, 0), 0.4);
        assert_eq!(fuse_direction(&one(0.2), &one(0.6), &f, &f).unwrap().get(0, 0), 0.5);

        assert_eq!(
            structure_consistency(&one(1.0), &one(1.0), &t, &t, 2.5)
                .unwrap()
                .get(0, 0),
            1.0
        );
        assert_relative_eq!(
            structure_consistency(&one(1.0), &one(3.5), &t, &t, 2.5)
                .unwrap()
                .get(0, 0),
            (-1f64).exp(),
            epsilon = 1e-15
        );
        assert_eq!(
            structure_consistency(&one(1.0), &one(3.5), &t, &f, 2.5)
                .unwrap()
                .get(0, 0),
            0.5
        );

        assert_eq!(motion_rigidity(&one(1.0), &one(1.0), &t, &t).unwrap().get(0, 0), 1.0);
        assert_relative_eq!(motion_rigidity(&one(0.9), &one(0.1), &t, &t).unwrap().get(0, 0), 0.09);
        assert_relative_eq!(motion_rigidity(&one(0.9), &one(0.5), &t, &f).unwrap().get(0, 0), 0.7);
    }

    #[test]
    fn unary_examples() {
        let one = |v: f64| ScalarField::constant(8, 8, v);
        let (p, e) = rigidity_unary(&one(1.0), &one(1.0), 0.1).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert!(e.rigid[0] < 1.1e-6 && e.rigid[0] > 0.0);
        assert!(e.moving[0].is_finite());
        let (_, e) = rigidity_unary(&one(0.5), &one(0.5), 0.1).unwrap();
        assert_relative_eq!(e.rigid[0], 2f64.ln());
        assert_relative_eq!(e.moving[0], 2f64.ln());
        let (p, _) = rigidity_unary(&one(0.2), &one(0.8), 0.5).unwrap();
        assert_relative_eq!(p.get(0, 0), 0.5);
    }

    #[test]
    fn direction_field_uses_angle_to_epipole() {
        let e = Point2::new(20.0, 4.0);
        let toward = FlowField::from_fn(8, 8, |x, y| {
            let q = e - Point2::new(x as f64, y as f64);
            let q = q * (3.0 / q.norm());
            [q.x, q.y]
        });
        let valid = BinaryMask::filled(8, 8, true);
        let p = direction_field(&toward, &valid, e, 0.75).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.8));
        let away = FlowField::from_fn(8, 8, |x, y| {
            let v = toward.get(x, y);
            [-v[1], v[0]]
        });
        let p = direction_field(&away, &valid, e, 0.75).unwrap();
        assert!(p.data().iter().all(|&v| v < 0.05));
    }

    proptest! {
        #[test]
        fn direction_monotone_in_sine(c in 0.0f64..20.0, a in 0.0f64..FRAC_PI_2, b in 0.0f64..FRAC_PI_2) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(direction_rigidity(hi, c, 0.75) <= direction_rigidity(lo, c, 0.75) + 1e-15);
            let p = direction_rigidity(a, c, 0.75);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn direction_tends_to_half(a in 0.0f64..PI) {
            prop_assert!((direction_rigidity(a, 1e-4, 0.75) - 0.5).abs() < 1e-6);
        }

        #[test]
        fn fusion_stays_in_unit_interval(p in 0.0f64..=1.0, q in 0.0f64..=1.0, vp in any::<bool>(), vm in any::<bool>(),
                                         ap in -3.0f64..3.0, am in -3.0f64..3.0, sem in 0.0f64..=1.0, l in 0.0f64..=1.0) {
            let one = |v: f64| ScalarField::constant(8, 8, v);
            let (mp, mm) = (BinaryMask::filled(8, 8, vp), BinaryMask::filled(8, 8, vm));
            let d = fuse_direction(&one(p), &one(q), &mp, &mm).unwrap();
            let d2 = fuse_direction(&one(q), &one(p), &mm, &mp).unwrap();
            prop_assert_eq!(d.data(), d2.data());
            let s = structure_consistency(&one(ap), &one(am), &mp, &mm, 2.5).unwrap();
            let m = motion_rigidity(&d, &s, &mp, &mm).unwrap();
            let (r, e) = rigidity_unary(&one(sem), &m, l).unwrap();
            for f in [&d, &s, &m, &r] {
                prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!(e.rigid.iter().chain(&e.moving).all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
