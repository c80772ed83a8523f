//! Synthetic scene description and its TOML form.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plane `n . X = distance` in reference-camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub distance: f64,
}

impl PlaneSpec {
    /// Unit normal and distance.
    pub fn normalized(&self) -> Result<(Vector3<f64>, f64)> {
        let n = Vector3::from(self.normal);
        let len = n.norm();
        if !(len > 0.0) || !len.is_finite() || !self.distance.is_finite() {
            return Err(Error::InvalidSpec(format!("bad plane {self:?}")));
        }
        Ok((n / len, self.distance / len))
    }
}

/// Motion of a neighbouring camera: `X_cam = R X + t`, with `R` given as an
/// axis-angle vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

/// Textured planar patch. Its support is the back-projection of `rect`
/// (reference pixels, `[x0, y0, x1, y1]`) onto its plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    #[serde(flatten)]
    pub plane: PlaneSpec,
    pub rect: [f64; 4],
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Independent translation at the forward frame; the backward frame
    /// sees the opposite translation. Zero for static patches.
    #[serde(default)]
    pub motion: [f64; 3],
}

fn default_intensity() -> f64 {
    0.5
}

fn default_contrast() -> f64 {
    0.3
}

impl PatchSpec {
    pub fn is_moving(&self) -> bool {
        self.motion.iter().any(|&v| v != 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub seed: u64,
    pub focal: f64,
    /// Defaults to the image center.
    #[serde(default)]
    pub principal_point: Option<[f64; 2]>,
    /// Reference plane of the decomposition.
    pub plane: PlaneSpec,
    pub next: MotionSpec,
    pub prev: MotionSpec,
    #[serde(rename = "patch")]
    pub patches: Vec<PatchSpec>,
}

/// Pinhole camera `x ~ K (R X + t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal_point: [f64; 2],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::InvalidSpec(format!("focal length {focal} must be positive")));
        }
        if (rotation.transpose() * rotation - Matrix3::identity()).norm() > 1e-10 || rotation.determinant() < 0.0 {
            return Err(Error::InvalidSpec("camera rotation is not orthonormal".into()));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("camera translation is not finite".into()));
        }
        Ok(Self {
            focal,
            principal_point,
            rotation,
            translation,
        })
    }

    pub fn k(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point;
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point;
        let f = self.focal;
        Matrix3::new(1.0 / f, 0.0, -cx / f, 0.0, 1.0 / f, -cy / f, 0.0, 0.0, 1.0)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera coordinates of a world point.
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Pixel and depth of a world point.
    pub fn project(&self, x: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(x);
        let [cx, cy] = self.principal_point;
        (self.focal * c.x / c.z + cx, self.focal * c.y / c.z + cy, c.z)
    }

    /// World-space ray through a pixel, scaled so that the camera-space
    /// depth grows by one per unit of the parameter.
    pub fn ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.k_inv() * Vector3::new(px, py, 1.0);
        (self.center(), self.rotation.transpose() * d)
    }
}

/// Cameras of the three frames; the reference camera is the world frame.
#[derive(Clone, Copy, Debug)]
pub struct CameraTriplet {
    pub prev: CameraModel,
    pub reference: CameraModel,
    pub next: CameraModel,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn principal_point(&self) -> [f64; 2] {
        self.principal_point
            .unwrap_or([0.5 * (self.width as f64 - 1.0), 0.5 * (self.height as f64 - 1.0)])
    }

    pub fn cameras(&self) -> Result<CameraTriplet> {
        let pp = self.principal_point();
        let cam = |m: &MotionSpec| {
            let r = Rotation3::new(Vector3::from(m.rotation)).into_inner();
            CameraModel::new(self.focal, pp, r, Vector3::from(m.translation))
        };
        Ok(CameraTriplet {
            prev: cam(&self.prev)?,
            reference: CameraModel::new(self.focal, pp, Matrix3::identity(), Vector3::zeros())?,
            next: cam(&self.next)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidSpec(format!(
                "image {}x{} is smaller than 8x8",
                self.width, self.height
            )));
        }
        if self.patches.is_empty() {
            return Err(Error::InvalidSpec("scene has no patches".into()));
        }
        let cams = self.cameras()?;
        let (n, d) = self.plane.normalized()?;
        for (name, cam) in [
            ("reference", &cams.reference),
            ("next", &cams.next),
            ("prev", &cams.prev),
        ] {
            let c = cam.center();
            if (d - n.dot(&c)).abs() < 1e-9 {
                return Err(Error::InvalidSpec(format!(
                    "reference plane passes through the {name} camera center"
                )));
            }
        }
        for (name, cam) in [("next", &cams.next), ("prev", &cams.prev)] {
            if cam.center().z.abs() < 1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "{name} camera has no depth displacement, its epipole is at infinity"
                )));
            }
        }
        let (wmax, hmax) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        for (i, p) in self.patches.iter().enumerate() {
            let (pn, pd) = p.plane.normalized()?;
            let [x0, y0, x1, y1] = p.rect;
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::InvalidSpec(format!("patch {i} has an empty rect")));
            }
            // only the part seen by the reference camera has to be valid
            let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(wmax), y1.min(hmax));
            if !(x1 >= x0 && y1 >= y0) {
                return Err(Error::InvalidSpec(format!("patch {i} is outside the reference view")));
            }
            let motion = Vector3::from(p.motion);
            for (x, y) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                let (o, dir) = cams.reference.ray(x, y);
                let lambda = (pd - pn.dot(&o)) / pn.dot(&dir);
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::InvalidSpec(format!(
                        "patch {i} is not in front of the reference camera"
                    )));
                }
                let rest = o + dir * lambda;
                for (cam, offset) in [(&cams.next, motion), (&cams.prev, -motion)] {
                    if !(cam.to_camera(&(rest + offset)).z > 0.0) {
                        return Err(Error::InvalidSpec(format!("patch {i} is behind a neighbouring camera")));
                    }
                }
            }
        }
        Ok(())
    }
}
