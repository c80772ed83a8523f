//! Robust intersection of residual-flow lines.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::field::{BinaryMask, FlowField};
use crate::geometry::Point2;
use crate::robust::{lorentzian, lorentzian_weight, mad_scale_or_floor, RobustScale};

/// Minimum residual-flow magnitude for a line to be used.
pub const MIN_PARALLAX: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
pub struct EpipoleConfig {
    pub min_parallax: f64,
    pub min_lines: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub max_condition: f64,
    /// Fixed Lorentzian scale; estimated from the line distances when `None`.
    pub scale: Option<RobustScale>,
}

impl Default for EpipoleConfig {
    fn default() -> Self {
        Self {
            min_parallax: MIN_PARALLAX,
            min_lines: 8,
            max_iters: 100,
            tol: 1e-10,
            max_condition: 1e8,
            scale: None,
        }
    }
}

/// A line through `point` with direction `dir` (not normalized).
#[derive(Clone, Copy, Debug)]
pub struct FlowLine {
    pub point: Point2,
    pub dir: Point2,
}

impl FlowLine {
    /// Signed orthogonal distance of `e` from the line.
    #[inline]
    pub fn distance(&self, e: Point2) -> f64 {
        self.dir.cross(e - self.point) / self.dir.norm().max(1e-12)
    }

    /// Component of the flow perpendicular to the direction towards `e`,
    /// in pixels. Its noise does not depend on the flow magnitude.
    #[inline]
    pub fn residual(&self, e: Point2) -> f64 {
        self.dir.cross(e - self.point) / (e - self.point).norm().max(1.0)
    }

    /// Residual and its gradient with respect to `e`.
    #[inline]
    fn residual_and_gradient(&self, e: Point2) -> (f64, Vector2<f64>) {
        let v = e - self.point;
        let c = self.dir.cross(v);
        let dc = Vector2::new(-self.dir.y, self.dir.x);
        let n = v.norm();
        if n <= 1.0 {
            return (c, dc);
        }
        (c / n, dc / n - Vector2::new(v.x, v.y) * (c / (n * n * n)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpipoleFit {
    pub epipole: Point2,
    pub scale: RobustScale,
    pub lines_used: usize,
    pub iterations: usize,
}

fn solve_weighted(lines: &[FlowLine], weights: &[f64], max_condition: f64) -> Result<Point2> {
    let mut m = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for (l, &w) in lines.iter().zip(weights) {
        let len = l.dir.norm();
        let n = Vector2::new(-l.dir.y / len, l.dir.x / len);
        let c = n.dot(&Vector2::new(l.point.x, l.point.y));
        m += w * n * n.transpose();
        rhs += w * c * n;
    }
    let eig = m.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= max_condition) {
        return Err(Error::IllConditioned(cond));
    }
    let sol = m.lu().solve(&rhs).ok_or(Error::IllConditioned(f64::INFINITY))?;
    Ok(Point2::new(sol[0], sol[1]))
}

/// Robust fit of `argmin_e sum rho(r_i(e))`, with `r_i` the flow component
/// perpendicular to the direction towards `e`. Starts from the line
/// intersection weighted by squared flow magnitude, then runs damped
/// Gauss-Newton with Lorentzian reweighting. Point-to-line distances are
/// not minimized directly since they grow with the distance to `e` and
/// bias the estimate towards the data.
pub fn fit_epipole(lines: &[FlowLine], cfg: &EpipoleConfig) -> Result<EpipoleFit> {
    let usable: Vec<FlowLine> = lines
        .iter()
        .copied()
        .filter(|l| l.point.is_finite() && l.dir.is_finite() && l.dir.norm() > cfg.min_parallax)
        .collect();
    if usable.len() < cfg.min_lines {
        return Err(Error::ParallaxTooSmall(usable.len()));
    }
    let magnitude: Vec<f64> = usable.iter().map(|l| l.dir.dot(l.dir)).collect();
    let mut e = solve_weighted(&usable, &magnitude, cfg.max_condition)?;
    let residuals = |e: Point2| -> Vec<f64> { usable.iter().map(|l| l.residual(e)).collect() };
    let mut scale = cfg.scale.unwrap_or_else(|| mad_scale_or_floor(&residuals(e)));
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        let mut cost = 0.0;
        for l in &usable {
            let (r, g) = l.residual_and_gradient(e);
            let w = lorentzian_weight(r, scale);
            jtj += w * g * g.transpose();
            jtr += w * r * g;
            cost += lorentzian(r, scale);
        }
        let eig = jtj.symmetric_eigenvalues();
        let cond = if eig.min() > 0.0 {
            eig.max() / eig.min()
        } else {
            f64::INFINITY
        };
        if !(cond <= cfg.max_condition) {
            return Err(Error::IllConditioned(cond));
        }
        let delta = jtj.lu().solve(&(-jtr)).ok_or(Error::IllConditioned(f64::INFINITY))?;
        let mut step = 1.0;
        let mut moved = 0.0;
        for _ in 0..30 {
            let trial = Point2::new(e.x + step * delta[0], e.y + step * delta[1]);
            let c: f64 = usable.iter().map(|l| lorentzian(l.residual(trial), scale)).sum();
            if c <= cost {
                moved = trial.dist(e);
                e = trial;
                break;
            }
            step *= 0.5;
        }
        // scale settles during the first iterations, then stays fixed
        if cfg.scale.is_none() && it < 3 {
            scale = mad_scale_or_floor(&residuals(e));
        } else if moved <= cfg.tol * (1.0 + e.norm()) {
            break;
        }
    }
    Ok(EpipoleFit {
        epipole: e,
        scale,
        lines_used: usable.len(),
        iterations,
    })
}

/// Robust Lorentzian cost of the perpendicular flow residuals.
pub fn line_cost(lines: &[FlowLine], e: Point2, scale: RobustScale) -> f64 {
    lines.iter().map(|l| lorentzian(l.residual(e), scale)).sum()
}

/// Residual-flow lines of the masked pixels.
pub fn flow_lines(u_r: &FlowField, mask: &BinaryMask) -> Vec<FlowLine> {
    let (w, h) = u_r.dims();
    let mut lines = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let u = u_r.get(x, y);
                lines.push(FlowLine {
                    point: Point2::new(x as f64, y as f64),
                    dir: Point2::new(u[0], u[1]),
                });
            }
        }
    }
    lines
}

/// Epipole from a residual flow field restricted to `mask`.
pub fn estimate_epipole(u_r: &FlowField, mask: &BinaryMask) -> Result<Point2> {
    Ok(fit_epipole(&flow_lines(u_r, mask), &EpipoleConfig::default())?.epipole)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_explicit_lines() {
        let mut lines = Vec::new();
        for k in 0..5 {
            lines.push(FlowLine {
                point: Point2::new(k as f64, 5.0),
                dir: Point2::new(1.0, 0.0),
            });
            lines.push(FlowLine {
                point: Point2::new(5.0, k as f64),
                dir: Point2::new(0.0, 1.0),
            });
        }
        let fit = fit_epipole(&lines, &EpipoleConfig::default()).unwrap();
        assert!(fit.epipole.dist(Point2::new(5.0, 5.0)) < 1e-9);
    }

    #[test]
    fn parallel_lines_are_ill_conditioned() {
        let lines: Vec<FlowLine> = (0..20)
            .map(|k| FlowLine {
                point: Point2::new(0.0, k as f64),
                dir: Point2::new(1.0, 0.0),
            })
            .collect();
        assert!(matches!(
            fit_epipole(&lines, &EpipoleConfig::default()),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn too_few_usable_lines() {
        let u = FlowField::constant(8, 8, [0.01, 0.0]);
        let m = BinaryMask::filled(8, 8, true);
        assert!(matches!(estimate_epipole(&u, &m), Err(Error::ParallaxTooSmall(0))));
    }

    #[test]
    fn noisy_directions_large_sample() {
        let e_true = Point2::new(70.0, 45.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let u = FlowField::from_fn(100, 100, |x, y| {
            let q = e_true - Point2::new(x as f64, y as f64);
            let s = -4.0 / 80.0;
            [q.x * s, q.y * s]
        });
        let mut noisy = u.clone();
        for v in noisy.data_mut() {
            v[0] += noise.sample(&mut rng);
            v[1] += noise.sample(&mut rng);
        }
        let m = BinaryMask::filled(100, 100, true);
        let exact = estimate_epipole(&u, &m).unwrap();
        assert!(exact.dist(e_true) < 1e-6);
        let est = estimate_epipole(&noisy, &m).unwrap();
        assert!(est.dist(e_true) < 2.0, "error {}", est.dist(e_true));
    }
}
