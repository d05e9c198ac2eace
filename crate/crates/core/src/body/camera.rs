use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::BodyError;

/// Pinhole intrinsics. Points are expressed in camera coordinates
/// (`+z` forward, `+y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Depth below which a point counts as at or behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Camera, BodyError> {
        let cam = Camera { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(BodyError::Invalid("focal lengths must be positive".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(BodyError::Invalid("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        (0.0..self.width as f64).contains(&uv.x) && (0.0..self.height as f64).contains(&uv.y)
    }
}

/// A projected point, or `Invalid` when it lies at or behind the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Valid(Vector2<f64>),
    Invalid,
}

impl Projection {
    pub fn valid(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Valid(p) => Some(p),
            Projection::Invalid => None,
        }
    }
}

pub fn project_point(camera: &Camera, p: &Vector3<f64>) -> Projection {
    if p.z <= MIN_DEPTH {
        return Projection::Invalid;
    }
    Projection::Valid(Vector2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy))
}

pub fn project(camera: &Camera, points: &[Vector3<f64>]) -> Vec<Projection> {
    points.iter().map(|p| project_point(camera, p)).collect()
}
