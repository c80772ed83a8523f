//! Joint refinement of the forward/backward homographies so that the
//! residual-flow lines of each direction meet in a single epipole.

use nalgebra::Matrix3;

use super::epipole::{fit_epipole, line_cost, EpipoleConfig, FlowLine};
use crate::error::{Error, Result};
use crate::field::{BinaryMask, FlowField};
use crate::geometry::{hom_apply, Homography, Point2};
use crate::optim::{minimize, LbfgsConfig};
use crate::robust::RobustScale;

#[derive(Clone, Copy, Debug)]
pub struct CoplanarConfig {
    pub lbfgs: LbfgsConfig,
    /// Relative objective increase treated as divergence.
    pub divergence_tolerance: f64,
    /// Pixel stride used to sample the mask.
    pub stride: usize,
    /// RMS change (px) of the transferred points at which the trust
    /// penalty equals the initial objective. The line objective alone is
    /// minimized by collapsing homographies, which this rules out.
    pub trust_radius: f64,
}

impl Default for CoplanarConfig {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsConfig {
                max_iters: 100,
                fd_step: 1e-7,
                ..Default::default()
            },
            divergence_tolerance: 0.01,
            stride: 2,
            trust_radius: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoplanarResult {
    pub h_plus: Homography,
    pub h_minus: Homography,
    pub e_plus: Point2,
    pub e_minus: Point2,
    pub objective_before: f64,
    pub objective_after: f64,
    pub diverged: bool,
    pub iterations: usize,
}

/// Conditioning transform mapping the pixel grid to roughly [-1, 1]^2.
fn conditioning(width: usize, height: usize) -> (Matrix3<f64>, Matrix3<f64>) {
    let s = 2.0 / width.max(height).max(1) as f64;
    let cx = 0.5 * (width as f64 - 1.0);
    let cy = 0.5 * (height as f64 - 1.0);
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let t_inv = Matrix3::new(1.0 / s, 0.0, cx, 0.0, 1.0 / s, cy, 0.0, 0.0, 1.0);
    (t, t_inv)
}

fn normalize_blocks(p: &mut [f64]) {
    for block in p.chunks_mut(9) {
        let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v /= n);
        }
    }
}

struct Direction {
    pixels: Vec<Point2>,
    targets: Vec<Point2>,
}

impl Direction {
    fn new(u0: &FlowField, mask: &BinaryMask, stride: usize) -> Self {
        let mut pixels = Vec::new();
        let mut targets = Vec::new();
        let (w, h) = u0.dims();
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                let u = u0.get(x, y);
                if mask.get(x, y) && u[0].is_finite() && u[1].is_finite() {
                    let p = Point2::new(x as f64, y as f64);
                    pixels.push(p);
                    targets.push(Point2::new(p.x + u[0], p.y + u[1]));
                }
            }
        }
        Self { pixels, targets }
    }

    fn lines(&self, h: &Homography) -> Option<Vec<FlowLine>> {
        self.pixels
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| {
                let r = hom_apply(h, t).ok()?;
                Some(FlowLine { point: p, dir: r - p })
            })
            .collect()
    }

    /// Mean squared displacement between the transfers under `h` and `h0`.
    fn transfer_change(&self, h: &Homography, h0: &Homography) -> Option<f64> {
        let mut s = 0.0;
        for &t in &self.targets {
            let d = hom_apply(h, t).ok()? - hom_apply(h0, t).ok()?;
            s += d.dot(d);
        }
        Some(s / self.targets.len().max(1) as f64)
    }

    /// Objective contribution and epipole for `h`.
    fn evaluate(&self, h: &Homography, cfg: &EpipoleConfig) -> Option<(f64, Point2)> {
        let lines = self.lines(h)?;
        let fit = fit_epipole(&lines, cfg).ok()?;
        let scale = cfg.scale.unwrap_or(fit.scale);
        Some((line_cost(&lines, fit.epipole, scale), fit.epipole))
    }
}

/// Refine `(H+, H-)` by minimizing the summed Lorentzian distances of the
/// residual-flow lines to their (re-estimated) epipoles.
pub fn refine_coplanar_homographies(
    h_plus: &Homography,
    h_minus: &Homography,
    u0_plus: &FlowField,
    u0_minus: &FlowField,
    mask: &BinaryMask,
    cfg: &CoplanarConfig,
) -> Result<CoplanarResult> {
    let (w, h) = u0_plus.dims();
    let stride = cfg.stride.max(1);
    let dirs = [
        Direction::new(u0_plus, mask, stride),
        Direction::new(u0_minus, mask, stride),
    ];

    // scales are frozen at the initial estimate so the objective is a
    // fixed function of the homographies
    let mut ecfg = [EpipoleConfig::default(), EpipoleConfig::default()];
    let mut e0 = [Point2::default(); 2];
    for (k, (d, hom)) in dirs.iter().zip([h_plus, h_minus]).enumerate() {
        let lines = d.lines(hom).ok_or(Error::DegeneratePoint(0.0))?;
        let fit = fit_epipole(&lines, &EpipoleConfig::default())?;
        ecfg[k].scale = Some(RobustScale::new(fit.scale.sigma())?);
        ecfg[k].min_parallax = 0.0;
        e0[k] = fit.epipole;
    }

    let (t, t_inv) = conditioning(w, h);
    let to_params = |hom: &Homography| -> Vec<f64> {
        let mut p: Vec<f64> = (t * hom.matrix() * t_inv).transpose().iter().copied().collect();
        normalize_blocks(&mut p);
        p
    };
    let from_params = |p: &[f64]| Homography::new(t_inv * Matrix3::from_row_slice(p) * t).ok();
    let line_objective = |k: usize, hom: &Homography| dirs[k].evaluate(hom, &ecfg[k]).map_or(f64::INFINITY, |(v, _)| v);
    let start = [*h_plus, *h_minus];
    let before_k = [line_objective(0, h_plus), line_objective(1, h_minus)];
    let before = before_k[0] + before_k[1];
    if !before.is_finite() {
        return Err(Error::NonFinite);
    }

    // the objective separates by direction, so each homography is solved
    // on its own
    let mut refined = [None, None];
    let mut iterations = 0;
    for k in 0..2 {
        let trust = before_k[k].max(f64::MIN_POSITIVE) / (cfg.trust_radius * cfg.trust_radius);
        let objective = |p: &[f64]| -> f64 {
            let Some(hom) = from_params(p) else {
                return f64::INFINITY;
            };
            match dirs[k].transfer_change(&hom, &start[k]) {
                Some(change) => line_objective(k, &hom) + trust * change,
                None => f64::INFINITY,
            }
        };
        let result = minimize(objective, &to_params(&start[k]), &cfg.lbfgs, normalize_blocks);
        iterations += result.iterations;
        refined[k] = from_params(&result.x);
    }
    let after = match refined {
        [Some(hp), Some(hm)] => line_objective(0, &hp) + line_objective(1, &hm),
        _ => f64::INFINITY,
    };

    let unrefined = |diverged: bool, after: f64| CoplanarResult {
        h_plus: *h_plus,
        h_minus: *h_minus,
        e_plus: e0[0],
        e_minus: e0[1],
        objective_before: before,
        objective_after: after,
        diverged,
        iterations,
    };
    if !after.is_finite() || after > before * (1.0 + cfg.divergence_tolerance) {
        return Ok(unrefined(true, after));
    }
    let [Some(hp), Some(hm)] = refined else {
        return Ok(unrefined(true, after));
    };
    let (Some((_, ep)), Some((_, em))) = (dirs[0].evaluate(&hp, &ecfg[0]), dirs[1].evaluate(&hm, &ecfg[1])) else {
        return Ok(unrefined(true, after));
    };
    Ok(CoplanarResult {
        h_plus: hp,
        h_minus: hm,
        e_plus: ep,
        e_minus: em,
        objective_before: before,
        objective_after: after,
        diverged: false,
        iterations,
    })
}
