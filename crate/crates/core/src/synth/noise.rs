//! Corruptions applied to ground truth to build realistic inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{FlowField, ScalarField};

/// Initial-flow corruption: Gaussian noise on every vector, and a fraction
/// of vectors replaced by gross outliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowNoise {
    pub sigma: f64,
    pub outlier_fraction: f64,
    /// Outliers are offset by a vector uniform in `[-range, range]^2`.
    pub outlier_range: f64,
}

impl Default for FlowNoise {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            outlier_fraction: 0.1,
            outlier_range: 10.0,
        }
    }
}

pub fn perturb_flow(flow: &FlowField, noise: &FlowNoise, seed: u64) -> Result<FlowField> {
    if !(noise.sigma >= 0.0) || !(0.0..=1.0).contains(&noise.outlier_fraction) || !(noise.outlier_range >= 0.0) {
        return Err(Error::InvalidConfig(format!("bad flow noise {noise:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = flow.clone();
    for v in out.data_mut() {
        // draw every variate so the noise of a pixel does not depend on
        // which earlier pixels became outliers
        let g = [normal.sample(&mut rng), normal.sample(&mut rng)];
        let outlier = rng.random_bool(noise.outlier_fraction);
        let o = [
            rng.random_range(-1.0..=1.0) * noise.outlier_range,
            rng.random_range(-1.0..=1.0) * noise.outlier_range,
        ];
        if outlier {
            v[0] += o[0];
            v[1] += o[1];
        } else {
            v[0] += g[0];
            v[1] += g[1];
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders. `sigma = 0` copies.
pub fn gaussian_blur(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("blur sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(f.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = f.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp = ScalarField::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * f.get(clamp(x as isize + i as isize - r, w), y))
            .sum()
    });
    Ok(ScalarField::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get(x, clamp(y as isize + i as isize - r, h)))
            .sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noise_statistics() {
        let gt = FlowField::constant(200, 200, [1.0, -2.0]);
        let n = FlowNoise {
            sigma: 1.0,
            outlier_fraction: 0.0,
            outlier_range: 0.0,
        };
        let f = perturb_flow(&gt, &n, 5).unwrap();
        let d: Vec<f64> = f.data().iter().map(|v| v[0] - 1.0).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);

        let n = FlowNoise {
            sigma: 0.0,
            outlier_fraction: 0.1,
            outlier_range: 10.0,
        };
        let f = perturb_flow(&gt, &n, 5).unwrap();
        let moved = f.data().iter().filter(|v| v[0] != 1.0).count() as f64 / 40000.0;
        assert!((moved - 0.1).abs() < 0.01);
        assert!(f
            .data()
            .iter()
            .all(|v| (v[0] - 1.0).abs() <= 10.0 && (v[1] + 2.0).abs() <= 10.0));
    }

    #[test]
    fn seeded() {
        let gt = FlowField::zeros(16, 16);
        let a = perturb_flow(&gt, &FlowNoise::default(), 9).unwrap();
        let b = perturb_flow(&gt, &FlowNoise::default(), 9).unwrap();
        let c = perturb_flow(&gt, &FlowNoise::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let f = ScalarField::constant(20, 10, 0.7);
        let g = gaussian_blur(&f, 3.0).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let mut spike = ScalarField::zeros(41, 41);
        spike.set(20, 20, 1.0);
        let g = gaussian_blur(&spike, 2.0).unwrap();
        assert_relative_eq!(g.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(g.get(20, 20) > g.get(21, 20) && g.get(21, 20) > g.get(22, 20));
        assert!(gaussian_blur(&f, -1.0).is_err());
    }
}
