//! Rigid / independently moving segmentation.

pub mod bessel;
pub mod cues;
pub mod mrf;
pub mod semantic;

pub use bessel::bessel_i0_scaled;
pub use cues::{
    direction_field, direction_rigidity, fuse_direction, motion_rigidity, rigidity_unary, structure_consistency,
    UnaryEnergies, PROB_CLAMP,
};
pub use mrf::{labeling_energy, potts_weights, potts_weights_checked, solve_rigidity_mrf, PottsWeights};
pub use semantic::{load_semantic_rigidity, rigid_hint, SEMANTIC_THRESHOLD};

use crate::field::ScalarField;

/// All cue fields of one frame, for diagnostics and output.
#[derive(Clone, Debug)]
pub struct RigidityCues {
    pub p_sem: ScalarField,
    pub p_dir: ScalarField,
    pub p_struct: ScalarField,
    pub p_motion: ScalarField,
    pub p_unary: ScalarField,
}
