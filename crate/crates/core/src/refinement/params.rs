//! Quasi-Newton refinement of the per-direction parameters with the
//! structure fixed.

use nalgebra::Matrix3;

use crate::alignment::epipole::estimate_epipole;
use crate::error::Result;
use crate::field::{BinaryMask, ScalarField};
use crate::geometry::{residual_flow, Homography, PppParams};
use crate::optim::{minimize, LbfgsConfig};

use super::energy::{check_inputs, data_energy, regular_pixels, Direction, EnergyScales};
use super::RefinementInputs;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionUpdate {
    pub data_before: f64,
    pub data_after: f64,
    /// The optimized parameters raised the energy and were discarded.
    pub diverged: bool,
    /// The re-estimated epipole raised the energy and was not used.
    pub epipole_kept: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamSolve {
    pub theta_plus: PppParams,
    pub theta_minus: PppParams,
    pub plus: DirectionUpdate,
    pub minus: DirectionUpdate,
}

fn conditioner(width: usize, height: usize) -> (Matrix3<f64>, Matrix3<f64>) {
    let s = 2.0 / width.max(height) as f64;
    let (cx, cy) = (0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0));
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let t_inv = Matrix3::new(1.0 / s, 0.0, cx, 0.0, 1.0 / s, cy, 0.0, 0.0, 1.0);
    (t, t_inv)
}

/// Parameters: eight entries of the conditioned homography (the largest
/// one is held fixed to remove the scale gauge) and `log(b / b0)`.
struct Param {
    g0: Matrix3<f64>,
    fixed: usize,
    t: Matrix3<f64>,
    t_inv: Matrix3<f64>,
    b0: f64,
}

impl Param {
    fn new(theta: &PppParams, width: usize, height: usize) -> Self {
        let (t, t_inv) = conditioner(width, height);
        let g = t * theta.h.matrix() * t_inv;
        let g0 = g / g.norm();
        let fixed = (0..9).max_by(|&i, &j| g0[i].abs().total_cmp(&g0[j].abs())).unwrap_or(8);
        Self {
            g0,
            fixed,
            t,
            t_inv,
            b0: theta.b,
        }
    }

    fn theta(&self, p: &[f64], e: crate::geometry::Point2) -> Result<PppParams> {
        let mut g = self.g0;
        let mut k = 0;
        for i in 0..9 {
            if i != self.fixed {
                g[i] += p[k];
                k += 1;
            }
        }
        let h = Homography::new(self.t_inv * g * self.t)?;
        PppParams::new(h, self.b0 * p[8].exp(), e)
    }
}

fn refine_direction(
    a: &ScalarField,
    theta: &PppParams,
    forward: bool,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    scales: &EnergyScales,
    lbfgs: &LbfgsConfig,
) -> Result<(PppParams, DirectionUpdate)> {
    let base = Direction::new(inputs, forward, theta, scales)?;
    let pixels = regular_pixels(a, &base, inputs, r);
    let before = data_energy(a, &base, inputs, &pixels);
    let unchanged = DirectionUpdate {
        data_before: before,
        data_after: before,
        diverged: false,
        epipole_kept: true,
    };
    if pixels.is_empty() || !before.is_finite() {
        return Ok((*theta, unchanged));
    }
    let (w, h) = r.dims();
    let param = Param::new(theta, w, h);
    let eval = |p: &[f64], e| -> f64 {
        let Ok(th) = param.theta(p, e) else {
            return f64::INFINITY;
        };
        let Ok(dir) = Direction::new(inputs, forward, &th, scales) else {
            return f64::INFINITY;
        };
        data_energy(a, &dir, inputs, &pixels)
    };
    let res = minimize(|p| eval(p, theta.e), &[0.0; 9], lbfgs, |_| {});
    if !(res.f < before) {
        return Ok((*theta, unchanged));
    }
    let with_old_e = param.theta(&res.x, theta.e)?;

    // re-estimate the epipole from the initial flow under the new homography
    let (u0, visible) = if forward {
        (&inputs.flow_fwd, &inputs.v_plus)
    } else {
        (&inputs.flow_bwd, &inputs.v_minus)
    };
    let (u_r, ok) = residual_flow(&with_old_e.h, u0);
    let mask = r.and(visible).and(&ok);
    let candidate = estimate_epipole(&u_r, &mask)
        .ok()
        .and_then(|e| PppParams::new(with_old_e.h, with_old_e.b, e).ok());
    if let Some(c) = candidate {
        let e_new = eval(&res.x, c.e);
        if e_new <= res.f && e_new <= before {
            return Ok((
                c,
                DirectionUpdate {
                    data_before: before,
                    data_after: e_new,
                    diverged: false,
                    epipole_kept: false,
                },
            ));
        }
    }
    Ok((
        with_old_e,
        DirectionUpdate {
            data_before: before,
            data_after: res.f,
            diverged: false,
            epipole_kept: true,
        },
    ))
}

/// Refine `H` and `b` of both directions by L-BFGS on the data term, then
/// re-estimate the epipoles. Updates that raise the energy are discarded.
pub fn optimize_ppp_params(
    a: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    scales: &EnergyScales,
    lbfgs: &LbfgsConfig,
) -> Result<ParamSolve> {
    check_inputs(a, inputs, r)?;
    let (tp, plus) = refine_direction(a, theta_plus, true, inputs, r, scales, lbfgs)?;
    let (tm, minus) = refine_direction(a, theta_minus, false, inputs, r, scales, lbfgs)?;
    Ok(ParamSolve {
        theta_plus: tp,
        theta_minus: tm,
        plus,
        minus,
    })
}
