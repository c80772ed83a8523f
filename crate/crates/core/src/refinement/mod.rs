//! Joint refinement of structure and per-direction parameters, and the
//! final flow.

pub mod energy;
pub mod params;
pub mod structure;

pub use energy::{data_term_gradient, energy_eval, estimate_scales, EnergyBreakdown, EnergyConfig, EnergyScales};
pub use params::{optimize_ppp_params, DirectionUpdate, ParamSolve};
pub use structure::{optimize_structure, StructureSolve};

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, fill_from_nearest, BinaryMask, FlowField, Image, ScalarField};
use crate::geometry::{warp_field, PppParams};
use crate::optim::LbfgsConfig;
use crate::rigidity::PottsWeights;
use crate::sampling::image_gradients;

/// Intensity range of the data term. The model weights are calibrated
/// for 8-bit intensities.
pub const INTENSITY_SCALE: f64 = 255.0;

/// Grayscale image in 8-bit units stacked with its x and y gradients.
pub fn augment_image(img: &Image) -> Image {
    let gray = if img.channels() == 1 {
        img.clone()
    } else {
        img.to_gray()
    };
    let (w, h) = gray.dims();
    let gray = Image::from_vec(w, h, 1, gray.data().iter().map(|v| v * INTENSITY_SCALE).collect()).expect("same size");
    let g = image_gradients(&gray);
    Image::stack(&[&gray, &g]).expect("same dimensions")
}

/// Everything the energy reads besides the unknowns.
#[derive(Clone, Debug)]
pub struct RefinementInputs {
    /// Augmented frames.
    pub prev: Image,
    pub reference: Image,
    pub next: Image,
    /// Initial flows from the reference frame, used to re-estimate epipoles.
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub v_plus: BinaryMask,
    pub v_minus: BinaryMask,
    /// Per-direction structure estimates and where the consistency term
    /// applies (visible and regular).
    pub a_plus: ScalarField,
    pub a_minus: ScalarField,
    pub c_plus: BinaryMask,
    pub c_minus: BinaryMask,
    pub w_x: ScalarField,
    pub w_y: ScalarField,
}

impl RefinementInputs {
    /// Inputs from grayscale frames. The consistency term is inactive until
    /// [`Self::with_consistency`] is called.
    pub fn new(
        frames: [&Image; 3],
        flow_fwd: &FlowField,
        flow_bwd: &FlowField,
        v_plus: &BinaryMask,
        v_minus: &BinaryMask,
        weights: &PottsWeights,
    ) -> Result<Self> {
        let d = frames[1].dims();
        for f in frames {
            ensure_same_dims(d, f.dims())?;
        }
        ensure_same_dims(d, flow_fwd.dims())?;
        ensure_same_dims(d, flow_bwd.dims())?;
        ensure_same_dims(d, v_plus.dims())?;
        ensure_same_dims(d, v_minus.dims())?;
        ensure_same_dims(d, weights.w_x.dims())?;
        Ok(Self {
            prev: augment_image(frames[0]),
            reference: augment_image(frames[1]),
            next: augment_image(frames[2]),
            flow_fwd: flow_fwd.clone(),
            flow_bwd: flow_bwd.clone(),
            v_plus: v_plus.clone(),
            v_minus: v_minus.clone(),
            a_plus: ScalarField::zeros(d.0, d.1),
            a_minus: ScalarField::zeros(d.0, d.1),
            c_plus: BinaryMask::filled(d.0, d.1, false),
            c_minus: BinaryMask::filled(d.0, d.1, false),
            w_x: weights.w_x.clone(),
            w_y: weights.w_y.clone(),
        })
    }

    pub fn with_consistency(
        mut self,
        a_plus: &ScalarField,
        ok_plus: &BinaryMask,
        a_minus: &ScalarField,
        ok_minus: &BinaryMask,
    ) -> Result<Self> {
        let d = self.reference.dims();
        for m in [ok_plus, ok_minus] {
            ensure_same_dims(d, m.dims())?;
        }
        ensure_same_dims(d, a_plus.dims())?;
        ensure_same_dims(d, a_minus.dims())?;
        self.c_plus = self.v_plus.and(ok_plus);
        self.c_minus = self.v_minus.and(ok_minus);
        self.a_plus = a_plus.clone();
        self.a_minus = a_minus.clone();
        Ok(self)
    }

    pub(crate) fn consistency_target(&self, direction: usize) -> (&ScalarField, &BinaryMask) {
        if direction == 0 {
            (&self.a_plus, &self.c_plus)
        } else {
            (&self.a_minus, &self.c_minus)
        }
    }
}

/// Induced flow `s(x, A, theta) - x`; pixels where the warp is singular
/// take the flow of the nearest regular pixel.
pub fn induced_flow(a: &ScalarField, theta: &PppParams) -> Result<FlowField> {
    let (mut flow, valid) = warp_field(a, theta)?;
    let w = flow.width();
    fill_from_nearest(flow.data_mut(), valid.data(), w);
    Ok(flow)
}

/// `u = R u_s + (1 - R) u0`.
pub fn compose_flow(u_s: &FlowField, u0: &FlowField, r: &BinaryMask) -> Result<FlowField> {
    ensure_same_dims(u_s.dims(), u0.dims())?;
    ensure_same_dims(u_s.dims(), r.dims())?;
    let data = u_s
        .data()
        .iter()
        .zip(u0.data())
        .zip(r.data())
        .map(|((&s, &o), &rigid)| if rigid { s } else { o })
        .collect();
    FlowField::from_vec(u_s.width(), u_s.height(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Structure { alternation: usize, outer: usize },
    Params { alternation: usize },
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Initial => write!(f, "initial"),
            Stage::Structure { alternation, outer } => write!(f, "structure.{alternation}.{outer}"),
            Stage::Params { alternation } => write!(f, "params.{alternation}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub energy: EnergyBreakdown,
}

#[derive(Clone, Debug)]
pub struct RefinementResult {
    pub a: ScalarField,
    pub theta_plus: PppParams,
    pub theta_minus: PppParams,
    pub scales: EnergyScales,
    pub trace: Vec<TraceEntry>,
    pub solve_failures: usize,
    pub rejected_steps: usize,
    pub param_updates: Vec<ParamSolve>,
}

impl RefinementResult {
    /// True when no traced energy exceeds its predecessor by more than
    /// `rel` relative.
    pub fn is_monotone(&self, rel: f64) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[1].energy.total <= w[0].energy.total + rel * w[0].energy.total.abs())
    }
}

/// Alternate structure solves and parameter updates. Unless `cfg` fixes
/// them, the robust scales start from the initial state and shrink as the
/// structure solves re-estimate them.
pub fn refine(
    a0: &ScalarField,
    theta_plus: &PppParams,
    theta_minus: &PppParams,
    inputs: &RefinementInputs,
    r: &BinaryMask,
    cfg: &EnergyConfig,
    lbfgs: &LbfgsConfig,
) -> Result<RefinementResult> {
    cfg.validate()?;
    if a0.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scales = match cfg.scales {
        Some(s) => s,
        None => estimate_scales(a0, theta_plus, theta_minus, inputs, r)?,
    };
    let fixed = EnergyConfig {
        scales: Some(scales),
        ..*cfg
    };
    let mut out = RefinementResult {
        a: a0.clone(),
        theta_plus: *theta_plus,
        theta_minus: *theta_minus,
        scales,
        trace: vec![TraceEntry {
            stage: Stage::Initial,
            energy: energy_eval(a0, theta_plus, theta_minus, inputs, r, &fixed)?,
        }],
        solve_failures: 0,
        rejected_steps: 0,
        param_updates: Vec::new(),
    };
    for alternation in 0..cfg.theta_alternations.max(1) {
        let s = optimize_structure(&out.a, &out.theta_plus, &out.theta_minus, inputs, r, &out.scales, cfg)?;
        for (outer, e) in s.energies.iter().skip(1).enumerate() {
            out.trace.push(TraceEntry {
                stage: Stage::Structure { alternation, outer },
                energy: *e,
            });
        }
        out.solve_failures += s.solve_failures;
        out.rejected_steps += s.rejected_steps;
        out.scales = s.scales;
        out.a = s.a;
        if alternation >= cfg.theta_alternations {
            break;
        }
        let fixed = EnergyConfig {
            scales: Some(out.scales),
            ..*cfg
        };
        let p = optimize_ppp_params(&out.a, &out.theta_plus, &out.theta_minus, inputs, r, &out.scales, lbfgs)?;
        let before = out.trace.last().map(|t| t.energy).unwrap_or_default();
        let after = energy_eval(&out.a, &p.theta_plus, &p.theta_minus, inputs, r, &fixed)?;
        let energy = if after.total <= before.total && after.singular <= before.singular {
            out.theta_plus = p.theta_plus;
            out.theta_minus = p.theta_minus;
            after
        } else {
            log::debug!("parameter update raised the energy, keeping the previous parameters");
            before
        };
        out.param_updates.push(p);
        out.trace.push(TraceEntry {
            stage: Stage::Params { alternation },
            energy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::epe;
    use crate::rigidity::potts_weights;
    use crate::robust::RobustScale;
    use crate::synth::{render_scene, MotionSpec, PatchSpec, PlaneSpec, SceneSpec, SyntheticScene};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn patch(normal: [f64; 3], distance: f64, rect: [f64; 4]) -> PatchSpec {
        PatchSpec {
            plane: PlaneSpec { normal, distance },
            rect,
            intensity: 0.5,
            contrast: 0.35,
            motion: [0.0; 3],
        }
    }

    fn scene() -> SyntheticScene {
        let spec = SceneSpec {
            width: 48,
            height: 48,
            seed: 5,
            focal: 50.0,
            principal_point: None,
            plane: PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                distance: 20.0,
            },
            next: MotionSpec {
                translation: [-0.4, 0.1, -0.3],
                rotation: [0.0; 3],
            },
            prev: MotionSpec {
                translation: [0.4, -0.1, 0.3],
                rotation: [0.0; 3],
            },
            patches: vec![
                patch([0.0, 0.0, 1.0], 20.0, [-1e4, -1e4, 1e4, 1e4]),
                patch([0.2, 0.0, 1.0], 8.0, [12.5, 12.5, 34.5, 34.5]),
            ],
        };
        render_scene(&spec).unwrap()
    }

    fn inputs(s: &SyntheticScene) -> RefinementInputs {
        let f = &s.frames;
        let w = potts_weights(&f.reference);
        RefinementInputs::new(
            [&f.prev, &f.reference, &f.next],
            &s.gt.flow_fwd,
            &s.gt.flow_bwd,
            &s.gt.visible_fwd,
            &s.gt.visible_bwd,
            &w,
        )
        .unwrap()
    }

    fn unit_scales() -> EnergyScales {
        let s = RobustScale::new(1.0).unwrap();
        EnergyScales {
            data: [[s; 3]; 2],
            first_order: s,
            second_order: s,
        }
    }

    fn noisy(a: &ScalarField, sigma: f64, seed: u64) -> ScalarField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        let mut out = a.clone();
        out.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
        out
    }

    fn rigid_visible_epe(s: &SyntheticScene, a: &ScalarField, theta: &PppParams) -> f64 {
        let u = induced_flow(a, theta).unwrap();
        epe(&u, &s.gt.flow_fwd, Some(&s.gt.rigidity.and(&s.gt.visible_fwd))).unwrap()
    }

    #[test]
    fn augment_image_ramp() {
        let img = Image::from_fn(6, 5, |x, _| 0.1 * x as f64);
        let a = augment_image(&img);
        assert_eq!(a.channels(), 3);
        assert!((a.get(2, 2, 0) - 0.2 * INTENSITY_SCALE).abs() < 1e-9);
        assert!((a.get(2, 2, 1) - 0.1 * INTENSITY_SCALE).abs() < 1e-9);
        assert_eq!(a.get(2, 2, 2), 0.0);
        let flat = augment_image(&Image::from_fn(4, 4, |_, _| 0.3));
        assert!(flat.data().chunks(3).all(|p| p[1] == 0.0 && p[2] == 0.0));
    }

    #[test]
    fn smoothness_vanishes_on_low_order_structure() {
        let s = scene();
        let inp = inputs(&s);
        let r = &s.gt.rigidity;
        let cfg = EnergyConfig {
            lambda_1st: 1.0,
            lambda_2nd: 1.0,
            scales: Some(unit_scales()),
            ..Default::default()
        };
        let (w, h) = r.dims();
        let affine = ScalarField::from_fn(w, h, |x, y| 0.03 * x as f64 - 0.02 * y as f64 + 0.5);
        let e = energy_eval(&affine, &s.gt.theta_plus, &s.gt.theta_minus, &inp, r, &cfg).unwrap();
        assert!(e.second_order < 1e-20, "{e:?}");
        assert!(e.first_order > 0.0);
        let flat = ScalarField::constant(w, h, 0.7);
        let e = energy_eval(&flat, &s.gt.theta_plus, &s.gt.theta_minus, &inp, r, &cfg).unwrap();
        assert!(e.first_order < 1e-20 && e.second_order < 1e-20, "{e:?}");
    }

    #[test]
    fn breakdown_is_additive() {
        let s = scene();
        let a = noisy(&s.gt.structure, 0.1, 3);
        let inp = inputs(&s)
            .with_consistency(&s.gt.structure, &s.gt.visible_fwd, &s.gt.structure, &s.gt.visible_bwd)
            .unwrap();
        let cfg = EnergyConfig {
            lambda_c: 0.3,
            lambda_1st: 0.7,
            lambda_2nd: 11.0,
            ..Default::default()
        };
        let e = energy_eval(&a, &s.gt.theta_plus, &s.gt.theta_minus, &inp, &s.gt.rigidity, &cfg).unwrap();
        assert!(e.data > 0.0 && e.consistency > 0.0 && e.first_order > 0.0 && e.second_order > 0.0);
        let sum = e.data + 0.3 * e.consistency + 0.7 * e.first_order + 11.0 * e.second_order;
        assert!((e.total - sum).abs() <= 1e-12 * sum);
    }

    #[test]
    fn induced_flow_reproduces_ground_truth() {
        let s = scene();
        let u = induced_flow(&s.gt.structure, &s.gt.theta_plus).unwrap();
        let mut worst: f64 = 0.0;
        for ((a, b), &m) in u
            .data()
            .iter()
            .zip(s.gt.rigid_flow_fwd.data())
            .zip(s.gt.rigidity.data())
        {
            if m {
                worst = worst.max((a[0] - b[0]).hypot(a[1] - b[1]));
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn compose_flow_selects_by_mask() {
        let us = FlowField::constant(3, 2, [1.0, 2.0]);
        let u0 = FlowField::constant(3, 2, [-1.0, 0.5]);
        let r = BinaryMask::from_fn(3, 2, |x, _| x == 1);
        let u = compose_flow(&us, &u0, &r).unwrap();
        assert_eq!(u.get(1, 0), [1.0, 2.0]);
        assert_eq!(u.get(0, 1), [-1.0, 0.5]);
        assert!(compose_flow(&us, &FlowField::zeros(2, 2), &r).is_err());
    }

    #[test]
    fn data_gradient_matches_finite_differences() {
        let s = scene();
        let inp = inputs(&s);
        let r = &s.gt.rigidity;
        let a = s.gt.structure.map(|v| v + 0.05);
        let scales = estimate_scales(&a, &s.gt.theta_plus, &s.gt.theta_minus, &inp, r).unwrap();
        let cfg = EnergyConfig {
            lambda_1st: 0.0,
            lambda_2nd: 0.0,
            scales: Some(scales),
            ..Default::default()
        };
        let g = data_term_gradient(&a, &s.gt.theta_plus, &s.gt.theta_minus, &inp, r, &scales).unwrap();
        let (mut agree, mut total) = (0, 0);
        for k in 0..60 {
            let (x, y) = (3 + (k * 7) % 42, 3 + (k * 11) % 42);
            let f = |d: f64| {
                let mut b = a.clone();
                b.set(x, y, a.get(x, y) + d);
                energy_eval(&b, &s.gt.theta_plus, &s.gt.theta_minus, &inp, r, &cfg)
                    .unwrap()
                    .data
            };
            let h = 1e-6;
            let fd = (f(h) - f(-h)) / (2.0 * h);
            total += 1;
            if (fd - g.get(x, y)).abs() <= 1e-4 * g.get(x, y).abs().max(1.0) {
                agree += 1;
            }
        }
        // bilinear sampling has kinks on the pixel grid
        assert!(agree * 10 >= total * 9, "{agree}/{total}");
    }

    #[test]
    fn ground_truth_is_nearly_stationary() {
        let s = scene();
        let inp = inputs(&s);
        let res = refine(
            &s.gt.structure,
            &s.gt.theta_plus,
            &s.gt.theta_minus,
            &inp,
            &s.gt.rigidity,
            &EnergyConfig::default(),
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(res.is_monotone(1e-6));
        assert!(rigid_visible_epe(&s, &res.a, &res.theta_plus) < 0.05);
    }

    #[test]
    fn refinement_removes_structure_noise() {
        let s = scene();
        let inp = inputs(&s);
        let a0 = noisy(&s.gt.structure, 0.1, 7);
        let before = rigid_visible_epe(&s, &a0, &s.gt.theta_plus);
        let cfg = EnergyConfig {
            lambda_1st: 1.0,
            lambda_2nd: 5e4,
            ..Default::default()
        };
        let res = refine(
            &a0,
            &s.gt.theta_plus,
            &s.gt.theta_minus,
            &inp,
            &s.gt.rigidity,
            &cfg,
            &LbfgsConfig::default(),
        )
        .unwrap();
        let after = rigid_visible_epe(&s, &res.a, &res.theta_plus);
        assert!(res.is_monotone(1e-6));
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn parameter_step_recovers_perturbed_b() {
        let s = scene();
        let inp = inputs(&s);
        let gt = s.gt.theta_plus;
        let start = PppParams::new(gt.h, 1.2 * gt.b, gt.e).unwrap();
        let scales = estimate_scales(&s.gt.structure, &start, &s.gt.theta_minus, &inp, &s.gt.rigidity).unwrap();
        let p = optimize_ppp_params(
            &s.gt.structure,
            &start,
            &s.gt.theta_minus,
            &inp,
            &s.gt.rigidity,
            &scales,
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(p.plus.data_after < p.plus.data_before);
        assert!(
            (p.theta_plus.b - gt.b).abs() < 0.25 * (start.b - gt.b).abs(),
            "{} vs {}",
            p.theta_plus.b,
            gt.b
        );
    }

    #[test]
    fn non_rigid_pixels_are_untouched() {
        let s = scene();
        let inp = inputs(&s);
        let r = BinaryMask::from_fn(48, 48, |x, y| !(20..30).contains(&x) || !(5..15).contains(&y));
        let a0 = noisy(&s.gt.structure, 0.1, 9);
        let res = refine(
            &a0,
            &s.gt.theta_plus,
            &s.gt.theta_minus,
            &inp,
            &r,
            &EnergyConfig::default(),
            &LbfgsConfig::default(),
        )
        .unwrap();
        for ((a, b), &m) in res.a.data().iter().zip(a0.data()).zip(r.data()) {
            if !m {
                assert_eq!(a, b);
            }
        }
        assert!(res.a.data().iter().zip(a0.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn smaller_scales_never_raise_the_energy() {
        let s = scene();
        let inp = inputs(&s);
        let a = noisy(&s.gt.structure, 0.2, 11);
        let (tp, tm, r) = (&s.gt.theta_plus, &s.gt.theta_minus, &s.gt.rigidity);
        let big = estimate_scales(&a, tp, tm, &inp, r).unwrap();
        let small = estimate_scales(&s.gt.structure, tp, tm, &inp, r).unwrap();
        let eval = |sc: EnergyScales| {
            let cfg = EnergyConfig {
                scales: Some(sc),
                ..Default::default()
            };
            energy_eval(&a, tp, tm, &inp, r, &cfg).unwrap().total
        };
        let capped = big.min(&small);
        assert!(eval(capped) <= eval(big));
        assert_eq!(capped.min(&big), capped);
    }
}
