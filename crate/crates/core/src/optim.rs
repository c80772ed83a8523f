//! Limited-memory BFGS with backtracking line search and central
//! finite-difference gradients.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    /// Finite-difference step.
    pub fd_step: f64,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
    pub g_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            memory: 8,
            fd_step: 1e-7,
            f_tol: 1e-12,
            g_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub f_initial: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn gradient(&mut self, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = self.eval(&xp);
            xp[i] = orig - h;
            let fm = self.eval(&xp);
            xp[i] = orig;
            g[i] = if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * h)
            } else {
                0.0
            };
        }
        g
    }
}

/// Minimize `f` starting at `x0`. `project` is applied to every trial
/// point (e.g. to renormalize homogeneous parameters); the objective is
/// expected to be invariant under it.
pub fn minimize<F, P>(f: F, x0: &[f64], cfg: &LbfgsConfig, mut project: P) -> LbfgsResult
where
    F: FnMut(&[f64]) -> f64,
    P: FnMut(&mut [f64]),
{
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    project(&mut x);
    let mut fx = obj.eval(&x);
    let f_initial = fx;
    let mut g = obj.gradient(&x, cfg.fd_step);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    while iterations < cfg.max_iters && fx.is_finite() {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= cfg.g_tol {
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        } else {
            // first step: unit-length move
            for di in d.iter_mut() {
                *di /= gnorm;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v / gnorm).collect();
            slope = -gnorm;
        }

        // Armijo backtracking
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut xt);
            let ft = obj.eval(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((xt, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            break;
        };
        iterations += 1;
        let gn = obj.gradient(&xn, cfg.fd_step);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        let done = decrease <= cfg.f_tol * fx.abs().max(1e-300);
        fx = fn_;
        if done {
            break;
        }
    }

    LbfgsResult {
        x,
        f: fx,
        f_initial,
        iterations,
        evaluations: obj.evals,
    }
}
