//! Planar alignment and initial structure from the four input flows.

pub mod coplanar;
pub mod epipole;
pub mod ransac;
pub mod structure;

pub use coplanar::{refine_coplanar_homographies, CoplanarConfig, CoplanarResult};
pub use epipole::{estimate_epipole, fit_epipole, EpipoleConfig, EpipoleFit, FlowLine};
pub use ransac::{
    fit_homography_dlt, ransac_coupled_homographies, symmetric_transfer_error, validate_homography, RansacConfig,
    RansacResult,
};
pub use structure::{
    choose_b_plus, estimate_b_minus, fuse_structure, occlusion_masks, parallax_field, structure_field, BInitMode,
    BPlus, OcclusionConfig, ParallaxField,
};

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, FlowField, ScalarField};
use crate::geometry::{residual_flow, Homography, Point2, PppParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Reference-frame pixel.
    pub x: Point2,
    /// Its match in the forward frame.
    pub x_fwd: Point2,
    /// Its match in the backward frame.
    pub x_bwd: Point2,
    pub rigid_hint: bool,
}

#[derive(Clone, Debug)]
pub struct CorrespondenceSet {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Correspondence>,
}

impl CorrespondenceSet {
    /// Sample the flows every `stride` pixels in each dimension.
    pub fn from_flows(u_fwd: &FlowField, u_bwd: &FlowField, hint: &BinaryMask, stride: usize) -> Result<Self> {
        ensure_same_dims(u_fwd.dims(), u_bwd.dims())?;
        ensure_same_dims(u_fwd.dims(), hint.dims())?;
        let (width, height) = u_fwd.dims();
        let mut points = Vec::new();
        for y in (0..height).step_by(stride.max(1)) {
            for x in (0..width).step_by(stride.max(1)) {
                let (f, b) = (u_fwd.get(x, y), u_bwd.get(x, y));
                let p = Point2::new(x as f64, y as f64);
                let c = Correspondence {
                    x: p,
                    x_fwd: Point2::new(p.x + f[0], p.y + f[1]),
                    x_bwd: Point2::new(p.x + b[0], p.y + b[1]),
                    rigid_hint: hint.get(x, y),
                };
                if c.x_fwd.is_finite() && c.x_bwd.is_finite() {
                    points.push(c);
                }
            }
        }
        Ok(Self { width, height, points })
    }

    pub fn hinted(&self) -> usize {
        self.points.iter().filter(|c| c.rigid_hint).count()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AlignmentDiagnostics {
    pub correspondences: usize,
    pub inlier_ratio: f64,
    pub ransac_iterations: usize,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    pub coplanar_diverged: bool,
    pub b_plus_degenerate: bool,
    pub b_minus_fallback: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub theta_plus: PppParams,
    pub theta_minus: PppParams,
    /// When false the thetas are placeholders and callers must fall back
    /// to the initial flow.
    pub valid: bool,
    pub inlier_mask: BinaryMask,
    pub diagnostics: AlignmentDiagnostics,
}

#[derive(Clone, Debug)]
pub struct InitStructure {
    pub a_plus: ScalarField,
    pub a_minus: ScalarField,
    pub a_fused: ScalarField,
    pub v_plus: BinaryMask,
    pub v_minus: BinaryMask,
    /// Where `a_plus` and `a_minus` are regular.
    pub a_plus_ok: BinaryMask,
    pub a_minus_ok: BinaryMask,
    /// Pixels where a structure value could not be computed in a visible
    /// direction (epipole coincidence or singular parallax).
    pub singular: BinaryMask,
}

#[derive(Clone, Debug)]
pub struct AlignmentConfig {
    pub ransac: RansacConfig,
    pub coplanar: CoplanarConfig,
    pub occlusion: OcclusionConfig,
    pub coplanarity_refinement: bool,
    pub occlusion_reasoning: bool,
    pub b_init: BInitMode,
    pub sample_stride: usize,
    /// Bypasses RANSAC with the given `(H+, H-)`.
    pub initial_homographies: Option<(Homography, Homography)>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            coplanar: CoplanarConfig::default(),
            occlusion: OcclusionConfig::default(),
            coplanarity_refinement: true,
            occlusion_reasoning: true,
            b_init: BInitMode::Robust,
            sample_stride: 4,
            initial_homographies: None,
        }
    }
}

/// The four initial flows of a triplet, all anchored at the pixel grid of
/// their source frame.
#[derive(Clone, Copy, Debug)]
pub struct FlowQuad<'a> {
    /// Reference to forward frame.
    pub fwd: &'a FlowField,
    /// Reference to backward frame.
    pub bwd: &'a FlowField,
    /// Forward frame back to the reference.
    pub fwd_rev: &'a FlowField,
    /// Backward frame back to the reference.
    pub bwd_rev: &'a FlowField,
}

impl FlowQuad<'_> {
    pub fn dims(&self) -> (usize, usize) {
        self.fwd.dims()
    }

    fn check(&self) -> Result<()> {
        let d = self.dims();
        ensure_same_dims(d, self.bwd.dims())?;
        ensure_same_dims(d, self.fwd_rev.dims())?;
        ensure_same_dims(d, self.bwd_rev.dims())
    }
}

pub struct Initialization {
    pub alignment: AlignmentResult,
    pub structure: Option<InitStructure>,
}

fn invalid(width: usize, height: usize, mut diagnostics: AlignmentDiagnostics, err: &Error) -> Initialization {
    log::warn!("alignment failed: {err}");
    diagnostics.failure = Some(err.to_string());
    let placeholder = PppParams::new(Homography::identity(), 1.0, Point2::default()).expect("valid placeholder");
    Initialization {
        alignment: AlignmentResult {
            theta_plus: placeholder,
            theta_minus: placeholder,
            valid: false,
            inlier_mask: BinaryMask::filled(width, height, false),
            diagnostics,
        },
        structure: None,
    }
}

fn mask_or_all(m: BinaryMask, fallback: &BinaryMask) -> BinaryMask {
    if m.count() >= epipole::EpipoleConfig::default().min_lines {
        m
    } else {
        fallback.clone()
    }
}

/// Run the whole initialization: coupled homographies, optional
/// coplanarity refinement, epipoles, camera scalars, visibility and the
/// fused structure. Failures yield an invalid alignment rather than an
/// error; only inconsistent inputs are reported as `Err`.
pub fn initialize(flows: FlowQuad<'_>, hint: &BinaryMask, seed: u64, cfg: &AlignmentConfig) -> Result<Initialization> {
    flows.check()?;
    ensure_same_dims(flows.dims(), hint.dims())?;
    let (width, height) = flows.dims();
    let mut diag = AlignmentDiagnostics::default();
    let clock = std::time::Instant::now();

    let cs = CorrespondenceSet::from_flows(flows.fwd, flows.bwd, hint, cfg.sample_stride)?;
    diag.correspondences = cs.hinted();
    let (mut h_plus, mut h_minus, inlier_mask) = match cfg.initial_homographies {
        Some((hp, hm)) => (hp, hm, BinaryMask::filled(width, height, false)),
        None => match ransac_coupled_homographies(&cs, seed, &cfg.ransac) {
            Ok(r) => {
                diag.inlier_ratio = r.inlier_ratio;
                diag.ransac_iterations = r.iterations;
                (r.h_plus, r.h_minus, r.inlier_mask)
            }
            Err(e) => return Ok(invalid(width, height, diag, &e)),
        },
    };
    if !validate_homography(&h_plus, width, height) || !validate_homography(&h_minus, width, height) {
        return Ok(invalid(width, height, diag, &Error::SingularHomography));
    }

    log::debug!("ransac done at {:?}", clock.elapsed());
    let all = BinaryMask::filled(width, height, true);
    let (v_plus, v_minus) = if cfg.occlusion_reasoning {
        (
            occlusion_masks(flows.fwd, flows.fwd_rev, &cfg.occlusion)?,
            occlusion_masks(flows.bwd, flows.bwd_rev, &cfg.occlusion)?,
        )
    } else {
        (all.clone(), all.clone())
    };

    let hint_plus = mask_or_all(hint.and(&v_plus), hint);
    let hint_minus = mask_or_all(hint.and(&v_minus), hint);
    let hint_both = mask_or_all(hint_plus.and(&v_minus), hint);

    let (e_plus, e_minus) = if cfg.coplanarity_refinement {
        match refine_coplanar_homographies(&h_plus, &h_minus, flows.fwd, flows.bwd, &hint_both, &cfg.coplanar) {
            Ok(r) => {
                diag.objective_before = Some(r.objective_before);
                diag.objective_after = Some(r.objective_after);
                diag.coplanar_diverged = r.diverged;
                h_plus = r.h_plus;
                h_minus = r.h_minus;
                (r.e_plus, r.e_minus)
            }
            Err(e) => return Ok(invalid(width, height, diag, &e)),
        }
    } else {
        (Point2::default(), Point2::default())
    };

    log::debug!("coplanarity done at {:?}", clock.elapsed());
    let (ur_plus, ok_plus) = residual_flow(&h_plus, flows.fwd);
    let (ur_minus, ok_minus) = residual_flow(&h_minus, flows.bwd);
    let (e_plus, e_minus) = if cfg.coplanarity_refinement {
        (e_plus, e_minus)
    } else {
        let ep = estimate_epipole(&ur_plus, &hint_plus.and(&ok_plus));
        let em = estimate_epipole(&ur_minus, &hint_minus.and(&ok_minus));
        match (ep, em) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Ok(invalid(width, height, diag, &e)),
        }
    };

    let par_plus = parallax_field(&ur_plus, &ok_plus, e_plus);
    let par_minus = parallax_field(&ur_minus, &ok_minus, e_minus);

    let (a_unit, unit_ok) = structure_field(&par_plus, 1.0);
    let b_plus = match choose_b_plus(&a_unit, &hint_plus.and(&unit_ok)) {
        Ok(bp) => bp,
        Err(e) => return Ok(invalid(width, height, diag, &e)),
    };
    diag.b_plus_degenerate = b_plus.degenerate;
    let b_plus = b_plus.b;
    let (a_plus, a_plus_ok) = structure_field(&par_plus, b_plus);

    let joint = hint_plus.and(&v_minus).and(&a_plus_ok);
    let b_minus = match estimate_b_minus(&a_plus, &par_minus, &joint, cfg.b_init) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("b- estimation failed ({e}), using -b+");
            diag.b_minus_fallback = true;
            -b_plus
        }
    };
    log::debug!("b estimation done at {:?}", clock.elapsed());
    let (a_minus, a_minus_ok) = structure_field(&par_minus, b_minus);

    let vis_plus = v_plus.and(&a_plus_ok);
    let vis_minus = v_minus.and(&a_minus_ok);
    let a_fused = fuse_structure(&a_plus, &a_minus, &vis_plus, &vis_minus)?;
    let singular = BinaryMask::from_fn(width, height, |x, y| {
        (v_plus.get(x, y) && !a_plus_ok.get(x, y)) || (v_minus.get(x, y) && !a_minus_ok.get(x, y))
    });

    let theta_plus = match PppParams::new(h_plus, b_plus, e_plus) {
        Ok(t) => t,
        Err(e) => return Ok(invalid(width, height, diag, &e)),
    };
    let theta_minus = match PppParams::new(h_minus, b_minus, e_minus) {
        Ok(t) => t,
        Err(e) => return Ok(invalid(width, height, diag, &e)),
    };
    Ok(Initialization {
        alignment: AlignmentResult {
            theta_plus,
            theta_minus,
            valid: true,
            inlier_mask,
            diagnostics: diag,
        },
        structure: Some(InitStructure {
            a_plus,
            a_minus,
            a_fused,
            v_plus,
            v_minus,
            a_plus_ok,
            a_minus_ok,
            singular,
        }),
    })
}
