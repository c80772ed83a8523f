//! Plane+Parallax refinement of optical flow for mostly rigid scenes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod refinement;
pub mod rigidity;
pub mod robust;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
pub use field::{BinaryMask, FlowField, Image, ScalarField};
pub use geometry::{Homography, Point2, PppParams};
pub use robust::RobustScale;
