//! Exponentially scaled modified Bessel function `e^-t I0(t)`.

use std::f64::consts::PI;

/// Switch from the power series to the asymptotic expansion.
const BRANCH_POINT: f64 = 25.0;

/// `e^-t I0(t)` for `t >= 0`. Negative arguments use `I0(-t) = I0(t)`,
/// which makes the scaled value `e^-|t| I0(|t|)`.
pub fn bessel_i0_scaled(t: f64) -> f64 {
    let t = t.abs();
    if t.is_nan() {
        return f64::NAN;
    }
    if t < BRANCH_POINT {
        series(t) * (-t).exp()
    } else if t.is_infinite() {
        0.0
    } else {
        asymptotic(t)
    }
}

/// `sum (t^2/4)^k / (k!)^2`
fn series(t: f64) -> f64 {
    let x = 0.25 * t * t;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        term *= x / (kf * kf);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Hankel expansion `(2 pi t)^-1/2 sum_k ((2k-1)!!)^2 / (k! (8t)^k)`,
/// truncated before the terms start to grow.
fn asymptotic(t: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..60 {
        let kf = k as f64;
        let next = term * (2.0 * kf + 1.0) * (2.0 * kf + 1.0) / (8.0 * (kf + 1.0) * t);
        if next >= term || next < sum * 1e-17 {
            break;
        }
        term = next;
        sum += term;
    }
    sum / (2.0 * PI * t).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Trapezoid rule on the periodic integrand, which converges
    /// geometrically.
    fn quadrature(t: f64) -> f64 {
        let n = 4096;
        let h = 2.0 * PI / n as f64;
        (0..n).map(|i| (t * ((i as f64 * h).cos() - 1.0)).exp()).sum::<f64>() * h / (2.0 * PI)
    }

    #[test]
    fn known_values() {
        assert_eq!(bessel_i0_scaled(0.0), 1.0);
        assert_relative_eq!(bessel_i0_scaled(1.0), 0.465_759_607_593_640_6, epsilon = 1e-12);
    }

    #[test]
    fn matches_quadrature_across_branch() {
        for i in 0..=500 {
            let t = 50.0 * i as f64 / 500.0 + 0.013;
            let d = (bessel_i0_scaled(t) - quadrature(t)).abs();
            assert!(d < 1e-8, "t = {t}: {d}");
        }
    }

    #[test]
    fn large_arguments() {
        let mut prev = bessel_i0_scaled(0.0);
        let mut t = 1e-3;
        while t <= 1e6 {
            let v = bessel_i0_scaled(t);
            assert!(v.is_finite() && v > 0.0 && v <= prev, "t = {t}");
            prev = v;
            t *= 1.1;
        }
        assert_relative_eq!(
            bessel_i0_scaled(1e6),
            1.0 / (2.0 * PI * 1e6).sqrt(),
            max_relative = 1e-6
        );
    }
}
