//! Ray-cast renderer producing three frames and exact ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{CameraModel, SceneSpec};
use crate::error::{Error, Result};
use crate::field::{BinaryMask, FlowField, Image, ScalarField};
use crate::geometry::{warp_coords_with, Homography, Point2, PppParams};
use crate::robust::mad;

/// Rendered frames of a scene.
#[derive(Clone, Debug)]
pub struct Frames {
    pub prev: Image,
    pub reference: Image,
    pub next: Image,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Reference to next frame.
    pub flow_fwd: FlowField,
    /// Reference to previous frame.
    pub flow_bwd: FlowField,
    /// Next frame back to the reference.
    pub flow_fwd_rev: FlowField,
    /// Previous frame back to the reference.
    pub flow_bwd_rev: FlowField,
    /// Forward flow the scene would have if nothing moved independently.
    pub rigid_flow_fwd: FlowField,
    pub rigid_flow_bwd: FlowField,
    /// Structure, scaled so that its MAD over rigid pixels is one.
    pub structure: ScalarField,
    pub rigidity: BinaryMask,
    /// Reference pixels whose scene point is visible in the next frame.
    pub visible_fwd: BinaryMask,
    pub visible_bwd: BinaryMask,
    /// Reference pixels that hit any geometry.
    pub covered: BinaryMask,
    pub theta_plus: PppParams,
    pub theta_minus: PppParams,
    /// Largest disagreement in px between the parallax model and direct
    /// projection over rigid visible pixels.
    pub consistency_error: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub frames: Frames,
    pub gt: GroundTruth,
}

const WAVES: usize = 6;

/// Band-limited procedural texture in reference-pixel coordinates.
#[derive(Clone, Debug)]
struct Texture {
    base: f64,
    contrast: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, base: f64, contrast: f64) -> Self {
        let waves = (0..WAVES)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let lambda: f64 = rng.random_range(10.0..30.0);
                let k = std::f64::consts::TAU / lambda;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (k * angle.cos(), k * angle.sin(), phase, amp)
            })
            .collect();
        Self { base, contrast, waves }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum();
        self.base + self.contrast * s / total
    }
}

struct Patch {
    n: Vector3<f64>,
    d: f64,
    rect: [f64; 4],
    motion: Vector3<f64>,
    moving: bool,
    texture: Texture,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Frame {
    Prev,
    Reference,
    Next,
}

struct Hit {
    patch: usize,
    /// Scene point at rest, in reference coordinates.
    rest: Vector3<f64>,
}

struct Renderer<'a> {
    spec: &'a SceneSpec,
    patches: Vec<Patch>,
    reference: CameraModel,
    prev: CameraModel,
    next: CameraModel,
}

impl Renderer<'_> {
    fn camera(&self, f: Frame) -> &CameraModel {
        match f {
            Frame::Prev => &self.prev,
            Frame::Reference => &self.reference,
            Frame::Next => &self.next,
        }
    }

    fn offset(&self, patch: &Patch, f: Frame) -> Vector3<f64> {
        match f {
            Frame::Prev => -patch.motion,
            Frame::Reference => Vector3::zeros(),
            Frame::Next => patch.motion,
        }
    }

    fn in_rect(&self, patch: &Patch, rest: &Vector3<f64>) -> bool {
        if rest.z <= 0.0 {
            return false;
        }
        let (px, py, _) = self.reference.project(rest);
        let [x0, y0, x1, y1] = patch.rect;
        px >= x0 && px <= x1 && py >= y0 && py <= y1
    }

    fn cast(&self, f: Frame, px: f64, py: f64) -> Option<Hit> {
        let (o, dir) = self.camera(f).ray(px, py);
        let mut best: Option<(f64, Hit)> = None;
        for (i, p) in self.patches.iter().enumerate() {
            let t = self.offset(p, f);
            let denom = p.n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let lambda = (p.d + p.n.dot(&t) - p.n.dot(&o)) / denom;
            if !(lambda > 1e-9) || best.as_ref().is_some_and(|(l, _)| *l <= lambda) {
                continue;
            }
            let rest = o + dir * lambda - t;
            if self.in_rect(p, &rest) {
                best = Some((lambda, Hit { patch: i, rest }));
            }
        }
        best.map(|(_, h)| h)
    }

    fn shade(&self, hit: &Hit) -> f64 {
        let (px, py, _) = self.reference.project(&hit.rest);
        self.patches[hit.patch].texture.eval(px, py)
    }

    fn render(&self, f: Frame) -> Image {
        let (w, h) = (self.spec.width, self.spec.height);
        Image::from_fn(w, h, |x, y| {
            self.cast(f, x as f64, y as f64).map_or(0.0, |hit| self.shade(&hit))
        })
    }

    /// Where the scene point `hit` lands in frame `f`, optionally ignoring
    /// its independent motion, and whether it is visible there.
    fn track(&self, hit: &Hit, f: Frame, rigid: bool) -> (Point2, bool) {
        let p = &self.patches[hit.patch];
        let t = if rigid { Vector3::zeros() } else { self.offset(p, f) };
        let world = hit.rest + t;
        let (qx, qy, depth) = self.camera(f).project(&world);
        let q = Point2::new(qx, qy);
        if rigid || depth <= 0.0 || !q.is_finite() {
            return (q, false);
        }
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let inside = qx >= 0.0 && qy >= 0.0 && qx <= w - 1.0 && qy <= h - 1.0;
        let visible = inside
            && self
                .cast(f, qx, qy)
                .is_some_and(|o| o.patch == hit.patch && (o.rest - hit.rest).norm() <= 1e-6 * (1.0 + hit.rest.norm()));
        (q, visible)
    }

    fn theta(&self, cam: &CameraModel, n: &Vector3<f64>, d: f64, m: f64) -> Result<PppParams> {
        let c = cam.center();
        let plane = cam.rotation + cam.translation * n.transpose() / d;
        let inv = plane
            .try_inverse()
            .ok_or_else(|| Error::InvalidSpec("plane induces a singular homography".into()))?;
        let h = Homography::new(cam.k() * inv * cam.k_inv())?;
        let b = c.z / (d - n.dot(&c));
        let e = self.reference.k() * c;
        PppParams::new(h, b * m, Point2::new(e.x / e.z, e.y / e.z))
    }
}

/// Render the three frames of `spec` and all ground truth.
pub fn render_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let cams = spec.cameras()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patches = spec
        .patches
        .iter()
        .map(|p| {
            let (n, d) = p.plane.normalized()?;
            Ok(Patch {
                n,
                d,
                rect: p.rect,
                motion: Vector3::from(p.motion),
                moving: p.is_moving(),
                texture: Texture::new(&mut rng, p.intensity, p.contrast),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = Renderer {
        spec,
        patches,
        reference: cams.reference,
        prev: cams.prev,
        next: cams.next,
    };
    let (w, h) = (spec.width, spec.height);
    let (n, d) = spec.plane.normalized()?;

    let frames = Frames {
        prev: r.render(Frame::Prev),
        reference: r.render(Frame::Reference),
        next: r.render(Frame::Next),
    };

    let mut flow_fwd = FlowField::zeros(w, h);
    let mut flow_bwd = FlowField::zeros(w, h);
    let mut rigid_fwd = FlowField::zeros(w, h);
    let mut rigid_bwd = FlowField::zeros(w, h);
    let mut raw_a = ScalarField::zeros(w, h);
    let mut rigidity = BinaryMask::filled(w, h, true);
    let mut vis_fwd = BinaryMask::filled(w, h, false);
    let mut vis_bwd = BinaryMask::filled(w, h, false);
    let mut covered = BinaryMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let p = Point2::new(x as f64, y as f64);
            let Some(hit) = r.cast(Frame::Reference, p.x, p.y) else {
                continue;
            };
            covered.set(x, y, true);
            rigidity.set(x, y, !r.patches[hit.patch].moving);
            raw_a.set(x, y, (d - n.dot(&hit.rest)) / hit.rest.z);
            for (f, flow, rflow, vis) in [
                (Frame::Next, &mut flow_fwd, &mut rigid_fwd, &mut vis_fwd),
                (Frame::Prev, &mut flow_bwd, &mut rigid_bwd, &mut vis_bwd),
            ] {
                let (q, visible) = r.track(&hit, f, false);
                let (qr, _) = r.track(&hit, f, true);
                flow.set(x, y, [q.x - p.x, q.y - p.y]);
                rflow.set(x, y, [qr.x - p.x, qr.y - p.y]);
                vis.set(x, y, visible);
            }
        }
    }

    let reverse = |f: Frame| {
        let mut out = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                if let Some(hit) = r.cast(f, x as f64, y as f64) {
                    let (q, _) = r.track(&hit, Frame::Reference, false);
                    out.set(x, y, [q.x - x as f64, q.y - y as f64]);
                }
            }
        }
        out
    };
    let flow_fwd_rev = reverse(Frame::Next);
    let flow_bwd_rev = reverse(Frame::Prev);

    let rigid_a: Vec<f64> = raw_a
        .data()
        .iter()
        .zip(rigidity.data().iter().zip(covered.data()))
        .filter(|(_, (&r, &c))| r && c)
        .map(|(&a, _)| a)
        .collect();
    let m = mad(&rigid_a).filter(|&m| m > 1e-12).unwrap_or(1.0);
    let structure = raw_a.map(|a| a / m);
    let theta_plus = r.theta(&r.next, &n, d, m)?;
    let theta_minus = r.theta(&r.prev, &n, d, m)?;

    let mut consistency_error: f64 = 0.0;
    for (theta, flow, vis) in [(&theta_plus, &flow_fwd, &vis_fwd), (&theta_minus, &flow_bwd, &vis_bwd)] {
        let h_inv = theta.h.inverse()?;
        for y in 0..h {
            for x in 0..w {
                if !(vis.get(x, y) && rigidity.get(x, y)) {
                    continue;
                }
                let p = Point2::new(x as f64, y as f64);
                // Ab = 1 only for points on the neighbour's principal plane
                if let Ok(s) = warp_coords_with(&h_inv, structure.get(x, y), theta, p) {
                    let u = flow.get(x, y);
                    consistency_error = consistency_error.max((s.x - p.x - u[0]).hypot(s.y - p.y - u[1]));
                }
            }
        }
    }
    if !(consistency_error <= 1e-4) {
        return Err(Error::InvalidSpec(format!(
            "parallax model disagrees with projection by {consistency_error} px"
        )));
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        frames,
        gt: GroundTruth {
            flow_fwd,
            flow_bwd,
            flow_fwd_rev,
            flow_bwd_rev,
            rigid_flow_fwd: rigid_fwd,
            rigid_flow_bwd: rigid_bwd,
            structure,
            rigidity,
            visible_fwd: vis_fwd,
            visible_bwd: vis_bwd,
            covered,
            theta_plus,
            theta_minus,
            consistency_error,
        },
    })
}

impl GroundTruth {
    /// Rigid pixels visible in both neighbouring frames.
    pub fn rigid_covisible(&self) -> BinaryMask {
        self.rigidity.and(&self.visible_fwd).and(&self.visible_bwd)
    }
}
