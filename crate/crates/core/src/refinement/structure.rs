//! Warping-based IRLS solve for the structure with the parameters fixed.

use crate::error::Result;
use crate::field::{BinaryMask, ScalarField};
use crate::geometry::{Point2, PppParams};
use crate::robust::{charbonnier_weight, lorentzian_weight, CHARBONNIER_EPS};

use super::energy::{
    check_inputs, energy_raw, estimate_scales, stencils, Direction, EnergyBreakdown, EnergyConfig, EnergyScales,
    Stencil,
};
use super::RefinementInputs;

/// Relative damping toward the current iterate, keeping the normal
/// system definite where a pixel has no data or smoothness support.
const DAMPING: f64 = 1e-6;

/// Halvings tried when a full step raises the energy.
const BACKTRACK_STEPS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct StructureSolve {
    pub a: ScalarField,
    /// Energy before the first and after every outer iteration.
    pub energies: Vec<EnergyBreakdown>,
    pub cg_iterations: Vec<usize>,
    /// Outer iterations whose linear solve stopped before the tolerance.
    pub solve_failures: usize,
    /// Outer iterations whose step was rejected by the energy guard.
    pub rejected_steps: usize,
    /// Scales in force at the end.
    pub scales: EnergyScales,
}

/// Sparse symmetric system `(D + sum_t w_t c_t c_t^T) x = rhs` over the
/// rigid pixels, kept matrix-free.
struct NormalSystem<'a> {
    /// Unknown index -> pixel index.
    pixels: Vec<usize>,
    /// Pixel index -> unknown index.
    slot: Vec<usize>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
    stencils: &'a [Stencil],
    weights: Vec<f64>,
}

impl NormalSystem<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = self.diag[i] * x[i];
        }
        for (s, &w) in self.stencils.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let mut v = 0.0;
            for j in 0..s.len {
                v += s.coef[j] * x[self.slot[s.idx[j]]];
            }
            let v = w * v;
            for j in 0..s.len {
                out[self.slot[s.idx[j]]] += s.coef[j] * v;
            }
        }
    }

    /// Diagonal of the full matrix.
    fn jacobi(&self) -> Vec<f64> {
        let mut d = self.diag.clone();
        for (s, &w) in self.stencils.iter().zip(&self.weights) {
            for j in 0..s.len {
                d[self.slot[s.idx[j]]] += w * s.coef[j] * s.coef[j];
            }
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. Returns the iteration count
/// and whether the relative residual reached `tol`.
fn pcg(sys: &NormalSystem<'_>, x: &mut [f64], tol: f64, max_iters: usize) -> (usize, bool) {
    let n = x.len();
    let precond: Vec<f64> = sys
        .jacobi()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    sys.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(&sys.rhs) {
        *ri = bi - *ri;
    }
    let b_norm = dot(&sys.rhs, &sys.rhs).sqrt().max(f64::MIN_POSITIVE);
    if dot(&r, &r).sqrt() <= tol * b_norm {
        return (0, true);
    }
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iters {
        sys.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return (it, false);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return (it, true);
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (max_iters, false)
}

/// Assemble the IRLS normal equations linearized at `a`.
#[allow(clippy::too_many_arguments)]
fn assemble<'s>(
    a: &[f64],
    dirs: &[Direction<'_>; 2],
    inputs: &RefinementInputs,
    r: &BinaryMask,
    st: &'s [Stencil],
    scales: &EnergyScales,
    cfg: &EnergyConfig,
) -> NormalSystem<'s> {
    let (w, h) = r.dims();
    let mut slot = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for (i, &rigid) in r.data().iter().enumerate() {
        if rigid {
            slot[i] = pixels.len();
            pixels.push(i);
        }
    }
    let n = pixels.len();
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for (k, &i) in pixels.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let p = Point2::new(x as f64, y as f64);
        let reference = inputs.reference.pixel(x, y);
        for (d, dir) in dirs.iter().enumerate() {
            if !dir.visible.get(x, y) {
                continue;
            }
            if let Some((res, g)) = dir.linearize(reference, p, a[i]) {
                for c in 0..3 {
                    // r(A) ~ res + g (A - a)
                    let wgt = lorentzian_weight(res[c], dir.scales[c]);
                    diag[k] += wgt * g[c] * g[c];
                    rhs[k] += wgt * g[c] * (g[c] * a[i] - res[c]);
                }
            }
            let (target, ok) = inputs.consistency_target(d);
            if cfg.lambda_c > 0.0 && ok.get(x, y) {
                let t = target.get(x, y);
                let wgt = cfg.lambda_c * charbonnier_weight(a[i] - t, CHARBONNIER_EPS);
                diag[k] += wgt;
                rhs[k] += wgt * t;
            }
        }
    }
    let weights: Vec<f64> = st
        .iter()
        .map(|s| {
            let v = s.apply(a);
            if s.second {
                cfg.lambda_2nd * s.weight * lorentzian_weight(v, scales.second_order)
            } else {
                cfg.lambda_1st * s.weight * lorentzian_weight(v, scales.first_order)
            }
        })
        .collect();
    let mut sys = NormalSystem {
        pixels,
        slot,
        diag,
        rhs,
        stencils: st,
        weights,
    };
    let full = sys.jacobi();
    let mean = full.iter().sum::<f64>() / n.max(1) as f64;
    let mu = DAMPING * mean.max(f64::MIN_POSITIVE);
    for (k, &i) in sys.pixels.iter().enumerate() {
        sys.diag[k] += mu;
        sys.rhs[k] += mu * a[i];
    }
    sys
}

/// Minimize the energy over the structure with the parameters fixed.
///
/// Each outer iteration re-warps the neighbours at the current structure,
/// linearizes the photometric residuals, and solves the reweighted normal
/// equations. A step that raises the energy is shortened until it does
/// not; failing that the iterate is kept. Unless `cfg` fixes the scales,
/// they are then re-estimated at the new iterate and capped by the old
/// ones, so the recorded energies stay non-increasing.
pub fn optimize_structure(
    a0: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    scales: &EnergyScales,
    cfg: &EnergyConfig,
) -> Result<StructureSolve> {
    check_inputs(a0, inputs, r)?;
    cfg.validate()?;
    let adapt = cfg.scales.is_none();
    let mut scales = *scales;
    let mut dirs = [
        Direction::new(inputs, true, theta_plus, &scales)?,
        Direction::new(inputs, false, theta_minus, &scales)?,
    ];
    let st = stencils(r, &inputs.w_x, &inputs.w_y);
    let mut a = a0.data().to_vec();
    let mut current = energy_raw(&a, &dirs, inputs, r, &st, &scales, cfg);
    let mut out = StructureSolve {
        a: a0.clone(),
        energies: vec![current],
        cg_iterations: Vec::new(),
        solve_failures: 0,
        rejected_steps: 0,
        scales,
    };
    if r.count() == 0 {
        return Ok(out);
    }
    for _ in 0..cfg.outer_iters {
        let mut candidate = a.clone();
        for _ in 0..cfg.inner_iters.max(1) {
            let sys = assemble(&candidate, &dirs, inputs, r, &st, &scales, cfg);
            let mut x: Vec<f64> = sys.pixels.iter().map(|&i| candidate[i]).collect();
            let (iters, converged) = pcg(&sys, &mut x, cfg.cg_tol, cfg.cg_max_iters);
            out.cg_iterations.push(iters);
            if !converged {
                out.solve_failures += 1;
                log::debug!("structure solve stopped after {iters} iterations");
            }
            if x.iter().all(|v| v.is_finite()) {
                for (k, &i) in sys.pixels.iter().enumerate() {
                    candidate[i] = x[k];
                }
            }
        }
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..=BACKTRACK_STEPS {
            let trial: Vec<f64> = a.iter().zip(&candidate).map(|(&o, &n)| o + step * (n - o)).collect();
            let e = energy_raw(&trial, &dirs, inputs, r, &st, &scales, cfg);
            if e.total.is_finite() && e.total <= current.total && e.singular <= current.singular {
                a = trial;
                current = e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            out.rejected_steps += 1;
        }
        if adapt {
            let field = ScalarField::from_vec(a0.width(), a0.height(), a.clone())?;
            let next = scales.min(&estimate_scales(&field, theta_plus, theta_minus, inputs, r)?);
            if next != scales {
                scales = next;
                dirs = [
                    Direction::new(inputs, true, theta_plus, &scales)?,
                    Direction::new(inputs, false, theta_minus, &scales)?,
                ];
                current = energy_raw(&a, &dirs, inputs, r, &st, &scales, cfg);
            }
        }
        out.energies.push(current);
    }
    out.scales = scales;
    out.a = ScalarField::from_vec(a0.width(), a0.height(), a)?;
    Ok(out)
}
