//! Robust penalties and scale estimation.

use crate::error::{Error, Result};

/// Gaussian-consistency factor for the median absolute deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;
/// Substitute scale when the MAD vanishes.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Default Charbonnier smoothing.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Positive scale parameter of a robust penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustScale(f64);

impl RobustScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "robust scale must be positive, got {sigma}"
            )));
        }
        Ok(Self(sigma))
    }

    pub fn sigma(self) -> f64 {
        self.0
    }
}

/// Lorentzian `sigma^2 log(1 + x^2 / sigma^2)`.
#[inline]
pub fn lorentzian(x: f64, sigma: RobustScale) -> f64 {
    let s2 = sigma.0 * sigma.0;
    s2 * (x * x / s2).ln_1p()
}

#[inline]
pub fn lorentzian_derivative(x: f64, sigma: RobustScale) -> f64 {
    let s2 = sigma.0 * sigma.0;
    2.0 * x / (1.0 + x * x / s2)
}

/// IRLS weight: `rho(x) = phi(x^2)` gives weight `phi'(x^2)`.
#[inline]
pub fn lorentzian_weight(x: f64, sigma: RobustScale) -> f64 {
    let s2 = sigma.0 * sigma.0;
    1.0 / (1.0 + x * x / s2)
}

/// Charbonnier `sqrt(x^2 + eps^2)`.
#[inline]
pub fn charbonnier(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

#[inline]
pub fn charbonnier_derivative(x: f64, eps: f64) -> f64 {
    x / (x * x + eps * eps).sqrt()
}

#[inline]
pub fn charbonnier_weight(x: f64, eps: f64) -> f64 {
    0.5 / (x * x + eps * eps).sqrt()
}

/// Median of the values; reorders the slice.
pub fn median_in_place(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        Some(upper)
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (below + upper))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    median_in_place(&mut values.to_vec())
}

/// Raw median absolute deviation (no consistency factor).
pub fn mad(values: &[f64]) -> Option<f64> {
    let med = median(values)?;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median_in_place(&mut dev)
}

/// `1.4826 * median(|v - median(v)|)`.
pub fn mad_scale(values: &[f64]) -> Result<RobustScale> {
    if values.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let m = mad(values).unwrap_or(0.0);
    if m <= 0.0 {
        return Err(Error::DegenerateScale);
    }
    RobustScale::new(MAD_TO_SIGMA * m)
}

/// [`mad_scale`] with the floor substituted for degenerate inputs.
pub fn mad_scale_or_floor(values: &[f64]) -> RobustScale {
    mad_scale(values).unwrap_or(RobustScale(SCALE_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn lorentzian_values() {
        let s = RobustScale::new(0.7).unwrap();
        assert_eq!(lorentzian(0.0, s), 0.0);
        assert_relative_eq!(lorentzian(0.7, s), 0.49 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn charbonnier_values() {
        assert_eq!(charbonnier(0.0, 1e-3), 1e-3);
        assert_relative_eq!(charbonnier(1.0, 1e-3), 1.0000005, epsilon = 1e-9);
        assert_relative_eq!(charbonnier(-1.0, 1e-3), 1.0000005, epsilon = 1e-9);
    }

    #[test]
    fn mad_scale_hand_example() {
        let s = mad_scale(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_relative_eq!(s.sigma(), 1.4826, epsilon = 1e-12);
        assert!(matches!(mad_scale(&[2.0, 2.0, 2.0]), Err(Error::DegenerateScale)));
        assert!(matches!(mad_scale(&[2.0]), Err(Error::InsufficientData { .. })));
        assert_eq!(mad_scale_or_floor(&[1.0, 1.0]).sigma(), SCALE_FLOOR);
    }

    #[test]
    fn median_even_length() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn lorentzian_derivative_matches_fd(x in -20.0f64..20.0, sigma in 0.1f64..5.0) {
            let s = RobustScale::new(sigma).unwrap();
            let fd = central_difference(|v| lorentzian(v, s), x);
            let an = lorentzian_derivative(x, s);
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2));
        }

        #[test]
        fn charbonnier_derivative_matches_fd(x in -20.0f64..20.0) {
            let eps = CHARBONNIER_EPS;
            let fd = central_difference(|v| charbonnier(v, eps), x);
            let an = charbonnier_derivative(x, eps);
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-2));
        }

        #[test]
        fn charbonnier_is_even(x in -1e3f64..1e3) {
            prop_assert_eq!(charbonnier(x, 1e-3), charbonnier(-x, 1e-3));
            prop_assert!(charbonnier(x, 1e-3) >= 1e-3);
        }

        #[test]
        fn mad_scale_translation_and_scale(v in proptest::collection::vec(-100.0f64..100.0, 3..60),
                                           c in -1e3f64..1e3, k in 0.01f64..100.0) {
            if let Ok(s) = mad_scale(&v) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
                let s_shift = mad_scale(&shifted).unwrap().sigma();
                let s_scale = mad_scale(&scaled).unwrap().sigma();
                prop_assert!((s_shift - s.sigma()).abs() <= 1e-9 * (1.0 + c.abs()));
                prop_assert!((s_scale - k * s.sigma()).abs() <= 1e-12 * k * s.sigma().max(1.0) * 10.0);
            }
        }
    }
}
