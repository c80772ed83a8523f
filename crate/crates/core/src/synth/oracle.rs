//! Independent brute-force references for the closed-form components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, FlowField};
use crate::rigidity::{labeling_energy, PottsWeights, UnaryEnergies};

/// Minimum samples per cell accepted by the direction oracle.
pub const MIN_ORACLE_SAMPLES: usize = 100_000;

/// Largest problem the exhaustive labeling oracle accepts.
pub const BRUTE_FORCE_MAX_PIXELS: usize = 20;

/// Default threshold in px for calling a pixel independently moving.
pub const GT_RIGIDITY_THRESHOLD: f64 = 0.5;

/// Likelihood of observing flow `u` (in a frame where the epipolar line is
/// the x axis) under the rigid hypothesis: a point uniformly placed on the
/// line, observed with isotropic Gaussian noise. The line integral is
/// estimated by uniform sampling over a window wide enough to hold all of
/// the Gaussian's mass.
fn rigid_line_density(ux: f64, uy: f64, half_window: f64, sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut acc = 0.0;
    for _ in 0..n {
        let s = rng.random_range(-half_window..half_window);
        let dx = ux - s;
        acc += norm * (-(dx * dx + uy * uy) * inv).exp();
    }
    2.0 * half_window * acc / n as f64
}

/// Monte-Carlo estimate of the posterior probability that an observed
/// residual flow of length `c` and angle `alpha` to the epipolar direction
/// is rigid, against a uniformly distributed direction at equal priors.
///
/// `table[i][j]` corresponds to `alpha_grid[i]` and `c_grid[j]`.
pub fn monte_carlo_direction_oracle(
    alpha_grid: &[f64],
    c_grid: &[f64],
    sigma_d: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_samples < MIN_ORACLE_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "oracle needs at least {MIN_ORACLE_SAMPLES} samples per cell, got {n_samples}"
        )));
    }
    if !(sigma_d > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma_d must be positive, got {sigma_d}")));
    }
    let mut table = vec![vec![0.0; c_grid.len()]; alpha_grid.len()];
    for (j, &c) in c_grid.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let half = c + 6.0 * sigma_d;
        // normalizer of the rigid likelihood over all directions at length c
        let mut z = 0.0;
        for _ in 0..n_samples {
            let beta = rng.random_range(0.0..std::f64::consts::TAU);
            let s = rng.random_range(-half..half);
            let (dx, dy) = (c * beta.cos() - s, c * beta.sin());
            z += (-(dx * dx + dy * dy) / (2.0 * sigma_d * sigma_d)).exp();
        }
        let z = std::f64::consts::TAU * 2.0 * half * z
            / (2.0 * std::f64::consts::PI * sigma_d * sigma_d)
            / n_samples as f64;
        for (i, &alpha) in alpha_grid.iter().enumerate() {
            let w1 = rigid_line_density(c * alpha.cos(), c * alpha.sin(), half, sigma_d, n_samples, &mut rng);
            let rigid = w1 / z;
            let uniform = 1.0 / std::f64::consts::TAU;
            table[i][j] = rigid / (rigid + uniform);
        }
    }
    Ok(table)
}

/// Exhaustive minimizer of the labeling energy. Among minimizers (within
/// 1e-9 relative) a pixel is rigid if it is rigid in any of them, which is
/// the largest minimizing rigid set.
pub fn brute_force_mrf(e: &UnaryEnergies, weights: &PottsWeights, lambda_rp: f64) -> Result<BinaryMask> {
    let n = e.len();
    if n > BRUTE_FORCE_MAX_PIXELS {
        return Err(Error::TooLarge(n));
    }
    if weights.width * weights.height != n {
        return Err(Error::DimensionMismatch {
            expected: (e.width, e.height),
            got: (weights.width, weights.height),
        });
    }
    let decode = |bits: u32| (0..n).map(|i| bits >> i & 1 == 1).collect::<Vec<bool>>();
    let energies: Vec<f64> = (0..1u32 << n)
        .map(|bits| labeling_energy(e, weights, lambda_rp, &decode(bits)))
        .collect();
    let best = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut union = 0u32;
    for (bits, &en) in energies.iter().enumerate() {
        if en <= best + tol {
            union |= bits as u32;
        }
    }
    BinaryMask::from_vec(e.width, e.height, decode(union))
}

/// Pixels whose true flow departs from the fully rigid flow by more than
/// `threshold` px are labeled moving.
pub fn gt_rigidity_from_flow(rigid_flow: &FlowField, gt_flow: &FlowField, threshold: f64) -> Result<BinaryMask> {
    ensure_same_dims(rigid_flow.dims(), gt_flow.dims())?;
    let (w, h) = gt_flow.dims();
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let (a, b) = (rigid_flow.get(x, y), gt_flow.get(x, y));
        (a[0] - b[0]).hypot(a[1] - b[1]) <= threshold
    }))
}
