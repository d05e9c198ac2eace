use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{POSE_JOINTS, SHAPE_DIM};
use crate::taxonomy::PartMap;

pub const ASSET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("cannot read body asset {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse body asset: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported asset schema version {found}, expected {ASSET_SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("skeleton not a tree")]
    NotATree,
    #[error("region {0} unassigned")]
    RegionUnassigned(usize),
    #[error("invalid asset: {0}")]
    Invalid(String),
    #[error("invalid body parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Left,
    Right,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointDef {
    pub name: String,
    pub joint: usize,
    pub laterality: Laterality,
}

/// A capsule rigidly attached to a joint frame.
///
/// `start` and `end` are adult rest-pose coordinates in the frame of `joint`.
/// The capsule is scaled by the age and shape factors of `scale_joint`, the
/// joint whose bone it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleDef {
    pub name: String,
    pub joint: usize,
    pub scale_joint: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    /// How strongly the radius follows the bone-length scale.
    pub radius_shape: f64,
}

/// A point on a capsule's cylindrical surface. `axial` in `[0, 1]` runs from
/// the capsule start to its end; `azimuth` (radians) is measured in the
/// capsule's perpendicular frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub capsule: usize,
    pub axial: f64,
    pub azimuth: f64,
    pub region: usize,
}

/// Data-driven body model definition, loaded from JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyModelAsset {
    pub schema_version: u32,
    pub joint_names: Vec<String>,
    /// Parent of every joint; `None` only for the root at index 0.
    pub parents: Vec<Option<usize>>,
    pub rest_offsets_adult: Vec<[f64; 3]>,
    pub rest_offsets_infant: Vec<[f64; 3]>,
    /// Per-joint bone-length sensitivity to each shape coefficient.
    pub shape_basis: Vec<[f64; SHAPE_DIM]>,
    pub capsules: Vec<CapsuleDef>,
    pub surface_samples: Vec<SurfaceSample>,
    pub region_count: usize,
    pub region_names: Vec<String>,
    pub keypoints: Vec<KeypointDef>,
    /// Body part to surface region ids.
    pub part_regions: PartMap,
    /// Body part to keypoint indices, used for laterality correction.
    pub part_keypoints: PartMap,
    #[serde(skip)]
    pub(crate) derived: Derived,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Derived {
    /// Joints sorted so that parents precede children.
    pub order: Vec<usize>,
    /// Perpendicular frame of each capsule in its joint's rest frame.
    pub capsule_frames: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Sample indices of each region, indexed by `region - 1`.
    pub region_samples: Vec<Vec<usize>>,
}

impl BodyModelAsset {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Reads and validates an asset file.
    pub fn load(path: impl AsRef<Path>) -> Result<BodyModelAsset, BodyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| BodyError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<BodyModelAsset, BodyError> {
        let asset: BodyModelAsset = serde_json::from_str(text)?;
        asset.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("asset serializes")
    }

    /// Checks every invariant and computes derived lookup data.
    pub fn validated(mut self) -> Result<BodyModelAsset, BodyError> {
        if self.schema_version != ASSET_SCHEMA_VERSION {
            return Err(BodyError::SchemaVersion { found: self.schema_version });
        }
        let j = self.joint_count();
        if j != POSE_JOINTS + 1 {
            return Err(BodyError::Invalid(format!("expected {} joints, found {j}", POSE_JOINTS + 1)));
        }
        let lens = [
            ("joint_names", self.joint_names.len()),
            ("rest_offsets_adult", self.rest_offsets_adult.len()),
            ("rest_offsets_infant", self.rest_offsets_infant.len()),
            ("shape_basis", self.shape_basis.len()),
        ];
        for (name, n) in lens {
            if n != j {
                return Err(BodyError::Invalid(format!("{name} has {n} entries, expected {j}")));
            }
        }
        self.derived.order = topological_order(&self.parents)?;

        let mut frames = Vec::with_capacity(self.capsules.len());
        for (k, c) in self.capsules.iter().enumerate() {
            if c.joint >= j || c.scale_joint >= j {
                return Err(BodyError::Invalid(format!("capsule {k} references a missing joint")));
            }
            if !(c.radius > 0.0) {
                return Err(BodyError::Invalid(format!("capsule {k} has non-positive radius")));
            }
            let axis = Vector3::from(c.end) - Vector3::from(c.start);
            if axis.norm() < 1e-9 {
                return Err(BodyError::Invalid(format!("capsule {k} has zero length")));
            }
            frames.push(perpendicular_frame(&axis));
        }
        self.derived.capsule_frames = frames;

        let r = self.region_count;
        if self.region_names.len() != r {
            return Err(BodyError::Invalid(format!(
                "region_names has {} entries, expected {r}",
                self.region_names.len()
            )));
        }
        let mut region_samples = vec![Vec::new(); r];
        for (i, s) in self.surface_samples.iter().enumerate() {
            if s.capsule >= self.capsules.len() {
                return Err(BodyError::Invalid(format!("sample {i} references a missing capsule")));
            }
            if !(0.0..=1.0).contains(&s.axial) {
                return Err(BodyError::Invalid(format!("sample {i} axial coordinate outside [0, 1]")));
            }
            if s.region == 0 || s.region > r {
                return Err(BodyError::Invalid(format!("sample {i} region {} out of range", s.region)));
            }
            region_samples[s.region - 1].push(i);
        }
        if let Some(missing) = region_samples.iter().position(|v| v.is_empty()) {
            return Err(BodyError::RegionUnassigned(missing + 1));
        }
        self.derived.region_samples = region_samples;

        for (i, kp) in self.keypoints.iter().enumerate() {
            if kp.joint >= j {
                return Err(BodyError::Invalid(format!("keypoint {i} references a missing joint")));
            }
        }
        let covered = self.part_regions.covered();
        if let Some(bad) = covered.iter().find(|&&id| id == 0 || id > r) {
            return Err(BodyError::Invalid(format!("part table references region {bad}")));
        }
        if let Some(missing) = (1..=r).find(|id| !covered.contains(id)) {
            return Err(BodyError::Invalid(format!("region {missing} not covered by any body part")));
        }
        for (part, ids) in self.part_regions.entries() {
            if part.side == crate::taxonomy::Side::Left {
                let other = self.part_regions.lookup(part.flipped()).unwrap_or_default();
                if ids.intersection(&other).next().is_some() {
                    return Err(BodyError::Invalid(format!("left and right regions of {} overlap", part.name)));
                }
            }
        }
        let kp_ids: BTreeSet<usize> = self.part_keypoints.covered();
        if let Some(bad) = kp_ids.iter().find(|&&id| id >= self.keypoints.len()) {
            return Err(BodyError::Invalid(format!("part keypoint map references keypoint {bad}")));
        }
        Ok(self)
    }

    /// Sample indices belonging to a region id.
    pub fn region_samples(&self, region: usize) -> &[usize] {
        &self.derived.region_samples[region - 1]
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k.name == name)
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.region_names.iter().position(|n| n == name).map(|i| i + 1)
    }
}

/// Unit vectors perpendicular to `axis`. The reference direction is the body
/// front (`-z`), or up (`-y`) for capsules nearly parallel to it, so that a
/// left/right mirror maps frames onto each other with negated azimuth.
pub(crate) fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = axis.normalize();
    let front = Vector3::new(0.0, 0.0, -1.0);
    let reference = if d.dot(&front).abs() > 0.9 { Vector3::new(0.0, -1.0, 0.0) } else { front };
    let e1 = (reference - d * reference.dot(&d)).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>, BodyError> {
    let n = parents.len();
    if n == 0 || parents[0].is_some() {
        return Err(BodyError::NotATree);
    }
    let mut children = vec![Vec::new(); n];
    for (j, p) in parents.iter().enumerate().skip(1) {
        match p {
            Some(p) if *p < n && *p != j => children[*p].push(j),
            _ => return Err(BodyError::NotATree),
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev().copied());
    }
    // Joints on a cycle are never reached from the root.
    if order.len() != n {
        return Err(BodyError::NotATree);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_asset;

    #[test]
    fn default_asset_dimensions() {
        let a = default_asset();
        assert_eq!(a.joint_count(), 22);
        assert_eq!(a.region_count, 75);
        assert_eq!(a.keypoints.len(), 17);
    }

    #[test]
    fn cycle_rejected() {
        let mut a = default_asset().clone();
        a.parents[3] = Some(6);
        let err = a.validated().unwrap_err();
        assert_eq!(err.to_string(), "skeleton not a tree");
    }

    #[test]
    fn missing_region_rejected() {
        let mut a = default_asset().clone();
        a.surface_samples.retain(|s| s.region != 13);
        let err = a.validated().unwrap_err();
        assert_eq!(err.to_string(), "region 13 unassigned");
    }

    #[test]
    fn schema_version_checked() {
        let mut a = default_asset().clone();
        a.schema_version = 99;
        assert!(matches!(a.validated(), Err(BodyError::SchemaVersion { found: 99 })));
    }

    #[test]
    fn json_roundtrip_and_file_load() {
        let a = default_asset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.json");
        std::fs::write(&path, a.to_json()).unwrap();
        let b = BodyModelAsset::load(&path).unwrap();
        assert_eq!(b.surface_samples, a.surface_samples);
        assert_eq!(b.part_regions, a.part_regions);
        assert!(BodyModelAsset::load(dir.path().join("missing.json")).is_err());
        assert!(matches!(BodyModelAsset::from_json("{"), Err(BodyError::Parse(_))));
    }
}
