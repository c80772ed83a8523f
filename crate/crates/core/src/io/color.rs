//! Flow visualization on the 55-bin Middlebury color wheel.

use std::f64::consts::PI;

use crate::field::{FlowField, Image};

fn color_wheel() -> Vec<[f64; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| (255 * i / n) as f64 / 255.0;
    for i in 0..RY {
        wheel.push([1.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([1.0 - ramp(i, YG), 1.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 1.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 1.0 - ramp(i, CB), 1.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 1.0]);
    }
    for i in 0..MR {
        wheel.push([1.0, 0.0, 1.0 - ramp(i, MR)]);
    }
    wheel
}

fn percentile_99(flow: &FlowField) -> f64 {
    let mut mags: Vec<f64> = flow.data().iter().map(|v| v[0].hypot(v[1])).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let k = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    mags[k]
}

/// Color-coded flow. `max_norm` defaults to the 99th percentile of the
/// flow magnitudes; longer vectors are drawn darkened.
pub fn flow_to_color(flow: &FlowField, max_norm: Option<f64>) -> Image {
    let wheel = color_wheel();
    let n = wheel.len();
    let max = max_norm.unwrap_or_else(|| percentile_99(flow));
    let max = if max > 0.0 && max.is_finite() { max } else { 1.0 };
    let (w, h) = flow.dims();
    let mut img = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.get(x, y);
            let (u, v) = (u / max, v / max);
            let rad = u.hypot(v);
            let a = (-v).atan2(-u) / PI;
            let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
            let k0 = (fk.floor() as usize).min(n - 1);
            let k1 = (k0 + 1) % n;
            let f = fk - k0 as f64;
            for (c, (&w0, &w1)) in wheel[k0].iter().zip(&wheel[k1]).enumerate() {
                let col = (1.0 - f) * w0 + f * w1;
                let col = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                };
                img.set(x, y, c, col);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(8, 8), None);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saturated_at_angle_zero() {
        let img = flow_to_color(&FlowField::constant(8, 8, [3.0, 0.0]), Some(3.0));
        assert_eq!(img.pixel(0, 0), &[1.0, 0.0, 0.0]);
    }

    fn hue(rgb: &[f64]) -> f64 {
        let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let h = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        };
        h * 60.0
    }

    #[test]
    fn rotation_sweeps_hue_continuously() {
        let steps = 720;
        let flow = FlowField::from_fn(steps, 1, |x, _| {
            let t = 2.0 * PI * x as f64 / steps as f64;
            [t.cos(), t.sin()]
        });
        let img = flow_to_color(&flow, Some(1.0));
        let mut prev = hue(img.pixel(0, 0));
        for x in 1..steps {
            let h = hue(img.pixel(x, 0));
            let mut d = (h - prev).abs();
            d = d.min(360.0 - d);
            // one wheel bin spans at most 60 degrees of hue over 4 bins
            assert!(d < 20.0, "hue jump {d} at {x}");
            prev = h;
        }
    }
}
