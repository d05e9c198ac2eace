//! Simplified parametric articulated body.
//!
//! The body is a kinematic tree of joints whose bones are covered by capsules.
//! Points sampled on the capsule surfaces carry a region label and stand in
//! for mesh vertices in the contact and vertex losses. The parameter interface
//! is the usual one: per-joint axis-angle pose `theta`, shape `beta`, age
//! blend `sigma`, root translation `gamma` and global orientation `phi`.
//!
//! Model space is camera-friendly: `+y` points down, the body faces `-z` and
//! its left side is `+x`.

mod asset;
mod authoring;
mod camera;
mod kinematics;
pub mod so3;

pub use asset::{BodyError, BodyModelAsset, CapsuleDef, KeypointDef, Laterality, SurfaceSample, ASSET_SCHEMA_VERSION};
pub use authoring::{build_default_asset, default_asset};
pub use camera::{project, project_point, Camera, Projection};
pub use kinematics::{forward, model_keypoints, BodyGrad, CapsuleWorld, ModelKeypoint, PosedBody};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Number of articulated joints carrying a pose rotation.
pub const POSE_JOINTS: usize = 21;
/// Number of shape coefficients.
pub const SHAPE_DIM: usize = 10;
/// Length of the flattened optimizable parameter block of one person:
/// `phi (3) | theta (63) | beta (10) | gamma (3)`.
pub const PARAM_DIM: usize = 3 + 3 * POSE_JOINTS + SHAPE_DIM + 3;

pub const PHI_OFFSET: usize = 0;
pub const THETA_OFFSET: usize = 3;
pub const BETA_OFFSET: usize = THETA_OFFSET + 3 * POSE_JOINTS;
pub const GAMMA_OFFSET: usize = BETA_OFFSET + SHAPE_DIM;

/// Pose, shape and placement of one person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Axis-angle rotation of each articulated joint (joints `1..=21`).
    pub theta: Vec<Vector3<f64>>,
    pub beta: [f64; SHAPE_DIM],
    /// Age blend; 0 is the adult template, 1 the infant template.
    pub sigma: f64,
    /// Root joint position.
    pub gamma: Vector3<f64>,
    /// Root orientation.
    pub phi: Vector3<f64>,
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams {
            theta: vec![Vector3::zeros(); POSE_JOINTS],
            beta: [0.0; SHAPE_DIM],
            sigma: 0.0,
            gamma: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }
}

impl BodyParams {
    pub fn validate(&self) -> Result<(), BodyError> {
        if self.theta.len() != POSE_JOINTS {
            return Err(BodyError::InvalidParams(format!(
                "theta has {} joints, expected {POSE_JOINTS}",
                self.theta.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(BodyError::InvalidParams(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        let finite = self.to_flat().iter().all(|v| v.is_finite()) && self.sigma.is_finite();
        if !finite {
            return Err(BodyError::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Wraps every rotation to an angle in `[0, pi]`.
    pub fn canonicalized(&self) -> BodyParams {
        let mut p = self.clone();
        p.phi = so3::canonicalize(&p.phi);
        for t in &mut p.theta {
            *t = so3::canonicalize(t);
        }
        p
    }

    /// Flattened `phi | theta | beta | gamma` block.
    pub fn to_flat(&self) -> [f64; PARAM_DIM] {
        let mut out = [0.0; PARAM_DIM];
        out[PHI_OFFSET..PHI_OFFSET + 3].copy_from_slice(self.phi.as_slice());
        for (j, t) in self.theta.iter().enumerate() {
            out[THETA_OFFSET + 3 * j..THETA_OFFSET + 3 * j + 3].copy_from_slice(t.as_slice());
        }
        out[BETA_OFFSET..BETA_OFFSET + SHAPE_DIM].copy_from_slice(&self.beta);
        out[GAMMA_OFFSET..GAMMA_OFFSET + 3].copy_from_slice(self.gamma.as_slice());
        out
    }

    pub fn from_flat(flat: &[f64], sigma: f64) -> BodyParams {
        assert_eq!(flat.len(), PARAM_DIM, "flat parameter block has wrong length");
        let v3 = |o: usize| Vector3::new(flat[o], flat[o + 1], flat[o + 2]);
        let mut beta = [0.0; SHAPE_DIM];
        beta.copy_from_slice(&flat[BETA_OFFSET..BETA_OFFSET + SHAPE_DIM]);
        BodyParams {
            theta: (0..POSE_JOINTS).map(|j| v3(THETA_OFFSET + 3 * j)).collect(),
            beta,
            sigma,
            gamma: v3(GAMMA_OFFSET),
            phi: v3(PHI_OFFSET),
        }
    }

    /// Pose rotations flattened to 63 values.
    pub fn theta_flat(&self) -> Vec<f64> {
        self.theta.iter().flat_map(|t| [t.x, t.y, t.z]).collect()
    }
}
