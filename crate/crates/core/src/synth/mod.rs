//! Synthetic scenes with exact ground truth, and brute-force oracles.

pub mod noise;
pub mod oracle;
pub mod presets;
pub mod render;
pub mod scene;

pub use noise::{gaussian_blur, perturb_flow, FlowNoise};
pub use oracle::{
    brute_force_mrf, gt_rigidity_from_flow, monte_carlo_direction_oracle, BRUTE_FORCE_MAX_PIXELS,
    GT_RIGIDITY_THRESHOLD, MIN_ORACLE_SAMPLES,
};
pub use render::{render_scene, Frames, GroundTruth, SyntheticScene};
pub use scene::{CameraModel, CameraTriplet, MotionSpec, PatchSpec, PlaneSpec, SceneSpec};

use crate::alignment::FlowQuad;
use crate::error::Result;
use crate::field::{FlowField, ScalarField};

/// Pipeline inputs derived from a rendered scene.
#[derive(Clone, Debug)]
pub struct SyntheticInputs {
    pub fwd: FlowField,
    pub bwd: FlowField,
    pub fwd_rev: FlowField,
    pub bwd_rev: FlowField,
    /// Blurred ground-truth rigidity standing in for a semantic network.
    pub semantic: ScalarField,
}

impl SyntheticInputs {
    /// Exact ground truth as inputs, with an unblurred semantic map.
    pub fn exact(scene: &SyntheticScene) -> Self {
        let gt = &scene.gt;
        Self {
            fwd: gt.flow_fwd.clone(),
            bwd: gt.flow_bwd.clone(),
            fwd_rev: gt.flow_fwd_rev.clone(),
            bwd_rev: gt.flow_bwd_rev.clone(),
            semantic: gt.rigidity.to_field(),
        }
    }

    /// Ground truth corrupted by `noise`, each flow with its own stream,
    /// and the rigidity blurred by `semantic_blur` px.
    pub fn noisy(scene: &SyntheticScene, noise: &FlowNoise, semantic_blur: f64, seed: u64) -> Result<Self> {
        let gt = &scene.gt;
        Ok(Self {
            fwd: perturb_flow(&gt.flow_fwd, noise, seed)?,
            bwd: perturb_flow(&gt.flow_bwd, noise, seed.wrapping_add(1))?,
            fwd_rev: perturb_flow(&gt.flow_fwd_rev, noise, seed.wrapping_add(2))?,
            bwd_rev: perturb_flow(&gt.flow_bwd_rev, noise, seed.wrapping_add(3))?,
            semantic: gaussian_blur(&gt.rigidity.to_field(), semantic_blur)?,
        })
    }

    pub fn flows(&self) -> FlowQuad<'_> {
        FlowQuad {
            fwd: &self.fwd,
            bwd: &self.bwd,
            fwd_rev: &self.fwd_rev,
            bwd_rev: &self.bwd_rev,
        }
    }
}
