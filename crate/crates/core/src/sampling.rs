//! Image sampling and finite-difference gradients.

use crate::field::{bilinear_coords, Image};
use crate::geometry::Point2;

/// Bilinear interpolation of every channel at `p`, written into `out`.
///
/// Coordinates outside `[0, W-1] x [0, H-1]` are clamped to the border;
/// the return value is true in that case.
#[inline]
pub fn bilinear_sample_into(img: &Image, p: Point2, out: &mut [f64]) -> bool {
    let (w, h) = img.dims();
    let (x0, y0, fx, fy, oob) = bilinear_coords(w, h, p);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c = img.channels();
    let data = img.data();
    let i00 = (y0 * w + x0) * c;
    let i10 = (y0 * w + x1) * c;
    let i01 = (y1 * w + x0) * c;
    let i11 = (y1 * w + x1) * c;
    for k in 0..c {
        let top = data[i00 + k] + fx * (data[i10 + k] - data[i00 + k]);
        let bot = data[i01 + k] + fx * (data[i11 + k] - data[i01 + k]);
        out[k] = top + fy * (bot - top);
    }
    oob
}

pub fn bilinear_sample(img: &Image, p: Point2) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; img.channels()];
    let oob = bilinear_sample_into(img, p, &mut out);
    (out, oob)
}

/// Bilinear sample plus spatial derivatives of the interpolant (per channel).
/// Along an axis where `p` is clamped the derivative is zero.
#[inline]
pub fn bilinear_sample_with_gradient(
    img: &Image,
    p: Point2,
    value: &mut [f64],
    dx: &mut [f64],
    dy: &mut [f64],
) -> bool {
    let (w, h) = img.dims();
    let (x0, y0, fx, fy, oob) = bilinear_coords(w, h, p);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c = img.channels();
    let data = img.data();
    let i00 = (y0 * w + x0) * c;
    let i10 = (y0 * w + x1) * c;
    let i01 = (y1 * w + x0) * c;
    let i11 = (y1 * w + x1) * c;
    let free_x = p.x >= 0.0 && p.x <= (w - 1) as f64;
    let free_y = p.y >= 0.0 && p.y <= (h - 1) as f64;
    for k in 0..c {
        let (a, b, cc, d) = (data[i00 + k], data[i10 + k], data[i01 + k], data[i11 + k]);
        let top = a + fx * (b - a);
        let bot = cc + fx * (d - cc);
        value[k] = top + fy * (bot - top);
        dx[k] = if free_x {
            (b - a) + fy * ((d - cc) - (b - a))
        } else {
            0.0
        };
        dy[k] = if free_y { bot - top } else { 0.0 };
    }
    oob
}

/// Per-channel x and y derivatives: central differences in the interior,
/// one-sided differences at the border. Output channel `2c` holds d/dx of
/// input channel `c`, channel `2c + 1` holds d/dy.
pub fn image_gradients(img: &Image) -> Image {
    let (w, h) = img.dims();
    let c = img.channels();
    let mut out = Image::new(w, h, 2 * c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let gx = if w < 2 {
                    0.0
                } else if x == 0 {
                    img.get(1, y, k) - img.get(0, y, k)
                } else if x == w - 1 {
                    img.get(x, y, k) - img.get(x - 1, y, k)
                } else {
                    0.5 * (img.get(x + 1, y, k) - img.get(x - 1, y, k))
                };
                let gy = if h < 2 {
                    0.0
                } else if y == 0 {
                    img.get(x, 1, k) - img.get(x, 0, k)
                } else if y == h - 1 {
                    img.get(x, y, k) - img.get(x, y - 1, k)
                } else {
                    0.5 * (img.get(x, y + 1, k) - img.get(x, y - 1, k))
                };
                out.set(x, y, 2 * k, gx);
                out.set(x, y, 2 * k + 1, gy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_and_midpoint_samples() {
        let img = Image::from_fn(8, 8, |x, y| (x + 10 * y) as f64);
        let (v, oob) = bilinear_sample(&img, Point2::new(3.0, 2.0));
        assert_eq!(v[0], 23.0);
        assert!(!oob);
        let img = Image::from_fn(8, 8, |x, _| if x == 0 { 0.0 } else { 1.0 });
        let (v, _) = bilinear_sample(&img, Point2::new(0.5, 4.0));
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn out_of_bounds_clamps_and_flags() {
        let img = Image::from_fn(8, 8, |x, y| (x + 10 * y) as f64);
        let (v, oob) = bilinear_sample(&img, Point2::new(-5.0, -5.0));
        assert_eq!(v[0], 0.0);
        assert!(oob);
        let (v, oob) = bilinear_sample(&img, Point2::new(7.0, 7.0));
        assert_eq!(v[0], 77.0);
        assert!(!oob);
    }

    #[test]
    fn gradients_of_simple_images() {
        let g = image_gradients(&Image::from_fn(8, 8, |_, _| 0.3));
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = image_gradients(&Image::from_fn(8, 8, |x, _| x as f64));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(g.get(x, y, 0), 1.0);
                assert_eq!(g.get(x, y, 1), 0.0);
            }
        }
        let g = image_gradients(&Image::from_fn(9, 8, |x, _| (x * x) as f64));
        for c in 1..8 {
            assert_eq!(g.get(c, 3, 0), 2.0 * c as f64);
        }
    }

    #[test]
    fn sample_gradient_matches_differences() {
        let img = Image::from_fn(8, 8, |x, y| (x * x + 3 * y) as f64 * 0.1);
        let (mut v, mut dx, mut dy) = ([0.0], [0.0], [0.0]);
        bilinear_sample_with_gradient(&img, Point2::new(2.25, 3.5), &mut v, &mut dx, &mut dy);
        let h = 1e-6;
        let (a, _) = bilinear_sample(&img, Point2::new(2.25 + h, 3.5));
        let (b, _) = bilinear_sample(&img, Point2::new(2.25 - h, 3.5));
        assert!((dx[0] - (a[0] - b[0]) / (2.0 * h)).abs() < 1e-6);
        assert!((dy[0] - 0.3).abs() < 1e-9);

        // clamped in x only: the y derivative survives
        let oob = bilinear_sample_with_gradient(&img, Point2::new(-3.0, 3.5), &mut v, &mut dx, &mut dy);
        assert!(oob);
        assert_eq!(dx[0], 0.0);
        assert!((dy[0] - 0.3).abs() < 1e-9);
    }
}
