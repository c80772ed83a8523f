//! Normalized DLT and RANSAC that fits the forward and backward plane
//! homographies from one shared minimal sample.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::field::BinaryMask;
use crate::geometry::{hom_apply, Homography, Point2};

#[derive(Clone, Copy, Debug)]
pub struct RansacConfig {
    /// Symmetric transfer error threshold (pixels), applied per direction.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub min_iters: usize,
    pub min_inlier_ratio: f64,
    pub min_correspondences: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 3.0,
            confidence: 0.999,
            max_iters: 5000,
            min_iters: 2000,
            min_inlier_ratio: 0.2,
            min_correspondences: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    /// Maps the forward frame onto the reference frame.
    pub h_plus: Homography,
    /// Maps the backward frame onto the reference frame.
    pub h_minus: Homography,
    /// One flag per rigid-hinted correspondence, in input order.
    pub inliers: Vec<bool>,
    /// Inliers rasterized at their reference pixels.
    pub inlier_mask: BinaryMask,
    pub inlier_ratio: f64,
    pub iterations: usize,
}

fn hartley_normalization(pts: &[Point2]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Homography `H` with `dst ~ H src`, by normalized DLT (>= 4 pairs).
pub fn fit_homography_dlt(src: &[Point2], dst: &[Point2]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::InsufficientCorrespondences { needed: 4, got: n });
    }
    let ts = hartley_normalization(src);
    let td = hartley_normalization(dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let s = ts * Vector3::new(src[k].x, src[k].y, 1.0);
        let d = td * Vector3::new(dst[k].x, dst[k].y, 1.0);
        let (x, y) = (s[0] / s[2], s[1] / s[2]);
        let (u, v) = (d[0] / d[2], d[1] / d[2]);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(Error::SingularHomography)?;
    // smallest singular value; nalgebra does not sort
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::SingularHomography)?;
    let h = vt.row(imin);
    let hn = Matrix3::from_row_slice(&[h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]]);
    let td_inv = td.try_inverse().ok_or(Error::SingularHomography)?;
    Homography::new(td_inv * hn * ts)
}

/// RMS of the two one-way transfer errors of `x ~ H x'`.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, x: Point2, x_other: Point2) -> f64 {
    let fwd = hom_apply(h, x_other).map(|p| p.dist(x)).unwrap_or(f64::INFINITY);
    let bwd = hom_apply(h_inv, x).map(|p| p.dist(x_other)).unwrap_or(f64::INFINITY);
    (0.5 * (fwd * fwd + bwd * bwd)).sqrt()
}

/// A homography moving any image corner by more than half the larger
/// image dimension is rejected.
pub fn validate_homography(h: &Homography, width: usize, height: usize) -> bool {
    let limit = 0.5 * width.max(height) as f64;
    let (w, hgt) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(0.0, hgt),
        Point2::new(w, hgt),
    ];
    corners.iter().all(|&c| match hom_apply(h, c) {
        Ok(p) => p.is_finite() && p.dist(c) <= limit,
        Err(_) => false,
    })
}

const LOCAL_REFITS: usize = 8;
const LOCAL_REFIT_FRACTION: f64 = 0.6;

fn count_inliers(
    c: &CorrespondenceSet,
    idx: &[usize],
    hp: &Homography,
    hm: &Homography,
    tau: f64,
    out: &mut Vec<bool>,
) -> Result<usize> {
    let hp_inv = hp.inverse()?;
    let hm_inv = hm.inverse()?;
    out.clear();
    let mut n = 0;
    for &i in idx {
        let p = &c.points[i];
        let ok = symmetric_transfer_error(hp, &hp_inv, p.x, p.x_fwd) < tau
            && symmetric_transfer_error(hm, &hm_inv, p.x, p.x_bwd) < tau;
        n += ok as usize;
        out.push(ok);
    }
    Ok(n)
}

fn fit_pair(c: &CorrespondenceSet, idx: impl Iterator<Item = usize> + Clone) -> Result<(Homography, Homography)> {
    let x: Vec<Point2> = idx.clone().map(|i| c.points[i].x).collect();
    let xf: Vec<Point2> = idx.clone().map(|i| c.points[i].x_fwd).collect();
    let xb: Vec<Point2> = idx.map(|i| c.points[i].x_bwd).collect();
    Ok((fit_homography_dlt(&xf, &x)?, fit_homography_dlt(&xb, &x)?))
}

/// Refit both homographies on the consensus set of `start` until the
/// inlier count stops growing.
fn local_refit(
    c: &CorrespondenceSet,
    idx: &[usize],
    start: (usize, Homography, Homography),
    tau: f64,
    flags: &mut Vec<bool>,
) -> (usize, Homography, Homography) {
    let mut best = start;
    for _ in 0..LOCAL_REFITS {
        if count_inliers(c, idx, &best.1, &best.2, tau, flags).is_err() {
            break;
        }
        let consensus: Vec<usize> = idx
            .iter()
            .zip(flags.iter())
            .filter(|(_, &f)| f)
            .map(|(&i, _)| i)
            .collect();
        if consensus.len() < 4 {
            break;
        }
        let Ok((rp, rm)) = fit_pair(c, consensus.iter().copied()) else {
            break;
        };
        if !validate_homography(&rp, c.width, c.height) || !validate_homography(&rm, c.width, c.height) {
            break;
        }
        match count_inliers(c, idx, &rp, &rm, tau, flags) {
            Ok(n) if n > best.0 => best = (n, rp, rm),
            Ok(n) if n == best.0 => {
                best = (n, rp, rm);
                break;
            }
            _ => break,
        }
    }
    best
}

const TIGHTEN_ROUNDS: usize = 20;
const TIGHTEN_SIGMAS: f64 = 3.0;
const TIGHTEN_FLOOR: f64 = 1e-6;

/// Shrink the consensus set onto the plane that dominates it. The transfer
/// threshold is rescaled from the robust spread of the current residuals
/// and both homographies are refit until the set stops changing.
fn tighten(c: &CorrespondenceSet, idx: &[usize], hp: Homography, hm: Homography, tau: f64) -> (Homography, Homography) {
    let mut best = (hp, hm);
    let mut prev: Vec<usize> = Vec::new();
    for _ in 0..TIGHTEN_ROUNDS {
        let (Ok(hp_inv), Ok(hm_inv)) = (best.0.inverse(), best.1.inverse()) else {
            break;
        };
        let err: Vec<(usize, f64)> = idx
            .iter()
            .map(|&i| {
                let p = &c.points[i];
                let e = symmetric_transfer_error(&best.0, &hp_inv, p.x, p.x_fwd)
                    .max(symmetric_transfer_error(&best.1, &hm_inv, p.x, p.x_bwd));
                (i, e)
            })
            .filter(|&(_, e)| e < tau)
            .collect();
        if err.len() < 4 {
            break;
        }
        let mut mags: Vec<f64> = err.iter().map(|&(_, e)| e).collect();
        mags.sort_by(f64::total_cmp);
        let sigma = 1.4826 * mags[mags.len() / 2];
        let cut = (TIGHTEN_SIGMAS * sigma).clamp(TIGHTEN_FLOOR, tau);
        let keep: Vec<usize> = err.iter().filter(|&&(_, e)| e <= cut).map(|&(i, _)| i).collect();
        if keep.len() < 4 || keep == prev {
            break;
        }
        let Ok((rp, rm)) = fit_pair(c, keep.iter().copied()) else {
            break;
        };
        if !validate_homography(&rp, c.width, c.height) || !validate_homography(&rm, c.width, c.height) {
            break;
        }
        best = (rp, rm);
        prev = keep;
    }
    best
}

/// Coupled RANSAC: each hypothesis fits both homographies to the same
/// four correspondences, and a point only counts as an inlier when its
/// transfer error is below the threshold in both directions.
pub fn ransac_coupled_homographies(c: &CorrespondenceSet, seed: u64, cfg: &RansacConfig) -> Result<RansacResult> {
    let idx: Vec<usize> = (0..c.points.len()).filter(|&i| c.points[i].rigid_hint).collect();
    let n = idx.len();
    if n < cfg.min_correspondences.max(4) {
        return Err(Error::InsufficientCorrespondences {
            needed: cfg.min_correspondences.max(4),
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Homography, Homography)> = None;
    let mut flags = Vec::with_capacity(n);
    let mut needed = cfg.max_iters;
    let mut iterations = 0;
    while iterations < needed.max(cfg.min_iters).min(cfg.max_iters) {
        iterations += 1;
        let pick = sample(&mut rng, n, 4);
        let sel: Vec<usize> = pick.iter().map(|k| idx[k]).collect();
        let Ok((hp, hm)) = fit_pair(c, sel.iter().copied()) else {
            continue;
        };
        if !validate_homography(&hp, c.width, c.height) || !validate_homography(&hm, c.width, c.height) {
            continue;
        }
        let Ok(count) = count_inliers(c, &idx, &hp, &hm, cfg.inlier_threshold, &mut flags) else {
            continue;
        };
        // noisy minimal samples undercount, so promising ones are refit
        // before being compared with the best
        if best
            .as_ref()
            .is_none_or(|b| count as f64 >= LOCAL_REFIT_FRACTION * b.0 as f64)
        {
            let (count, hp, hm) = local_refit(c, &idx, (count, hp, hm), cfg.inlier_threshold, &mut flags);
            if best.as_ref().is_some_and(|b| count <= b.0) {
                continue;
            }
            best = Some((count, hp, hm));
            let ratio = count as f64 / n as f64;
            let p_good = ratio.powi(4);
            needed = if p_good >= 1.0 - 1e-12 {
                0
            } else if p_good <= 0.0 {
                cfg.max_iters
            } else {
                ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil().max(0.0) as usize
            };
        }
    }
    let Some((best_count, hp, hm)) = best else {
        return Err(Error::NoConsensus(0.0));
    };
    let ratio = best_count as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(Error::NoConsensus(ratio));
    }

    let (hp, hm) = tighten(c, &idx, hp, hm, cfg.inlier_threshold);
    count_inliers(c, &idx, &hp, &hm, cfg.inlier_threshold, &mut flags)?;

    let mut inliers = vec![false; c.points.len()];
    let mut inlier_mask = BinaryMask::filled(c.width, c.height, false);
    let mut n_in = 0;
    for (&i, &f) in idx.iter().zip(&flags) {
        inliers[i] = f;
        if f {
            n_in += 1;
            let p = c.points[i].x;
            let (px, py) = (p.x.round(), p.y.round());
            if px >= 0.0 && py >= 0.0 && (px as usize) < c.width && (py as usize) < c.height {
                inlier_mask.set(px as usize, py as usize, true);
            }
        }
    }
    Ok(RansacResult {
        h_plus: hp,
        h_minus: hm,
        inliers,
        inlier_mask,
        inlier_ratio: n_in as f64 / n as f64,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Correspondence;

    fn grid_set(hp: &Homography, hm: &Homography) -> CorrespondenceSet {
        let hp_inv = hp.inverse().unwrap();
        let hm_inv = hm.inverse().unwrap();
        let mut points = Vec::new();
        for y in (0..64).step_by(4) {
            for x in (0..64).step_by(4) {
                let p = Point2::new(x as f64, y as f64);
                points.push(Correspondence {
                    x: p,
                    x_fwd: hom_apply(&hp_inv, p).unwrap(),
                    x_bwd: hom_apply(&hm_inv, p).unwrap(),
                    rigid_hint: true,
                });
            }
        }
        CorrespondenceSet {
            width: 64,
            height: 64,
            points,
        }
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = Homography::new(Matrix3::new(1.02, 0.01, 2.0, -0.02, 0.98, -1.0, 1e-4, 2e-4, 1.0)).unwrap();
        let src: Vec<Point2> = (0..10)
            .map(|i| Point2::new((i * 7 % 50) as f64, (i * 13 % 40) as f64))
            .collect();
        let dst: Vec<Point2> = src.iter().map(|&p| hom_apply(&h, p).unwrap()).collect();
        let fit = fit_homography_dlt(&src, &dst).unwrap();
        assert!(fit.distance(&h) < 1e-9);
    }

    #[test]
    fn identity_motion_gives_identity() {
        let c = grid_set(&Homography::identity(), &Homography::identity());
        let r = ransac_coupled_homographies(&c, 1, &RansacConfig::default()).unwrap();
        assert!(r.h_plus.distance(&Homography::identity()) < 1e-9);
        assert!(r.h_minus.distance(&Homography::identity()) < 1e-9);
        assert!(r.inliers.iter().all(|&f| f));
    }

    #[test]
    fn too_few_points() {
        let mut c = grid_set(&Homography::identity(), &Homography::identity());
        c.points.truncate(10);
        assert!(matches!(
            ransac_coupled_homographies(&c, 1, &RansacConfig::default()),
            Err(Error::InsufficientCorrespondences { .. })
        ));
    }

    #[test]
    fn validity_threshold() {
        assert!(validate_homography(&Homography::identity(), 100, 60));
        assert!(!validate_homography(&Homography::translation(60.0, 0.0), 100, 60));
        assert!(validate_homography(&Homography::translation(40.0, 0.0), 100, 60));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let hp = Homography::translation(1.5, -0.5);
        let hm = Homography::translation(-1.5, 0.5);
        let c = grid_set(&hp, &hm);
        let a = ransac_coupled_homographies(&c, 9, &RansacConfig::default()).unwrap();
        let b = ransac_coupled_homographies(&c, 9, &RansacConfig::default()).unwrap();
        assert_eq!(a.h_plus, b.h_plus);
        assert_eq!(a.inliers, b.inliers);
    }
}
