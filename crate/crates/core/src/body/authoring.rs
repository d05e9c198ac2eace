//! Construction of the default capsule body asset.
//!
//! The shipped `assets/default_body.json` is the serialized output of
//! [`build_default_asset`]; a unit test keeps the two in sync.

use std::sync::OnceLock;

use super::asset::{BodyModelAsset, CapsuleDef, Derived, KeypointDef, Laterality, SurfaceSample, ASSET_SCHEMA_VERSION};
use super::SHAPE_DIM;
use crate::taxonomy::{BodyPart, PartMap, PartName, Side};

const SHIPPED: &str = include_str!("../../assets/default_body.json");

/// The shipped default asset: 22 joints, 75 surface regions, 17 keypoints.
pub fn default_asset() -> &'static BodyModelAsset {
    static ASSET: OnceLock<BodyModelAsset> = OnceLock::new();
    ASSET.get_or_init(|| BodyModelAsset::from_json(SHIPPED).expect("shipped body asset is valid"))
}

const JOINTS: [(&str, Option<usize>, [f64; 3]); 22] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("left_hip", Some(0), [0.09, 0.07, 0.0]),
    ("right_hip", Some(0), [-0.09, 0.07, 0.0]),
    ("spine1", Some(0), [0.0, -0.11, 0.0]),
    ("left_knee", Some(1), [0.0, 0.40, 0.0]),
    ("right_knee", Some(2), [0.0, 0.40, 0.0]),
    ("spine2", Some(3), [0.0, -0.13, 0.0]),
    ("left_ankle", Some(4), [0.0, 0.40, 0.0]),
    ("right_ankle", Some(5), [0.0, 0.40, 0.0]),
    ("spine3", Some(6), [0.0, -0.06, 0.0]),
    ("left_foot", Some(7), [0.0, 0.05, -0.12]),
    ("right_foot", Some(8), [0.0, 0.05, -0.12]),
    ("neck", Some(9), [0.0, -0.21, 0.0]),
    ("left_collar", Some(9), [0.07, -0.13, 0.0]),
    ("right_collar", Some(9), [-0.07, -0.13, 0.0]),
    ("head", Some(12), [0.0, -0.10, 0.0]),
    ("left_shoulder", Some(13), [0.11, 0.02, 0.0]),
    ("right_shoulder", Some(14), [-0.11, 0.02, 0.0]),
    ("left_elbow", Some(16), [0.26, 0.0, 0.0]),
    ("right_elbow", Some(17), [-0.26, 0.0, 0.0]),
    ("left_wrist", Some(18), [0.25, 0.0, 0.0]),
    ("right_wrist", Some(19), [-0.25, 0.0, 0.0]),
];

fn mirror_joint(j: usize) -> usize {
    match j {
        1 | 4 | 7 | 10 | 13 | 16 | 18 | 20 => j + 1,
        2 | 5 | 8 | 11 | 14 | 17 | 19 | 21 => j - 1,
        _ => j,
    }
}

fn infant_ratio(j: usize) -> f64 {
    match j {
        0 => 0.0,
        1 | 2 | 4 | 5 | 7 | 8 | 10 | 11 => 0.45,
        15 => 0.75,
        16..=21 => 0.5,
        _ => 0.55,
    }
}

fn shape_row(j: usize) -> [f64; SHAPE_DIM] {
    let mut row = [0.0; SHAPE_DIM];
    row[0] = 0.06;
    match j {
        4 | 5 => {
            row[1] = 0.08;
            row[8] = -0.05;
        }
        7 | 8 => {
            row[1] = 0.08;
            row[8] = 0.05;
        }
        18 | 19 => {
            row[2] = 0.08;
            row[7] = -0.05;
        }
        20 | 21 => {
            row[2] = 0.08;
            row[7] = 0.05;
        }
        3 | 6 | 9 | 12 => row[3] = 0.07,
        13 | 14 | 16 | 17 => row[4] = 0.10,
        1 | 2 => row[5] = 0.10,
        0 => row[5] = 0.05,
        15 => row[6] = 0.08,
        10 | 11 => row[9] = 0.10,
        _ => {}
    }
    row
}

/// One group of regions: every (band, sector) pair becomes a region sampled
/// on an `n_axial x n_azimuth` grid.
struct RegionSpec {
    part: PartName,
    bands: &'static [(f64, f64)],
    sectors: &'static [(f64, f64)],
    grid: (usize, usize),
}

struct CapsuleSpec {
    name: &'static str,
    joint: usize,
    scale_joint: usize,
    start: [f64; 3],
    end: [f64; 3],
    radius: f64,
    regions: &'static [RegionSpec],
}

const FULL: &[(f64, f64)] = &[(0.0, 1.0)];
const AROUND: &[(f64, f64)] = &[(-180.0, 180.0)];
const THIRDS: &[(f64, f64)] = &[(0.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0), (2.0 / 3.0, 1.0)];
const HALVES: &[(f64, f64)] = &[(0.0, 0.5), (0.5, 1.0)];
const THREE_SECTORS: &[(f64, f64)] = &[(-60.0, 60.0), (60.0, 180.0), (180.0, 300.0)];
const FRONT_BACK: &[(f64, f64)] = &[(-90.0, 90.0), (90.0, 270.0)];

const MIDLINE: &[CapsuleSpec] = &[
    CapsuleSpec {
        name: "pelvis",
        joint: 0,
        scale_joint: 0,
        start: [-0.08, 0.05, 0.0],
        end: [0.08, 0.05, 0.0],
        radius: 0.11,
        regions: &[
            RegionSpec { part: PartName::Waist, bands: HALVES, sectors: &[(-90.0, 90.0)], grid: (3, 8) },
            RegionSpec { part: PartName::Back, bands: THIRDS, sectors: &[(90.0, 270.0)], grid: (2, 8) },
        ],
    },
    CapsuleSpec {
        name: "lower_torso",
        joint: 3,
        scale_joint: 3,
        start: [-0.07, 0.0, 0.0],
        end: [0.07, 0.0, 0.0],
        radius: 0.12,
        regions: &[
            RegionSpec {
                part: PartName::Stomach,
                bands: &[(0.2, 0.5), (0.5, 0.8)],
                sectors: &[(-60.0, 0.0), (0.0, 60.0)],
                grid: (3, 7),
            },
            RegionSpec { part: PartName::Waist, bands: &[(0.0, 0.2)], sectors: &[(-90.0, 270.0)], grid: (2, 12) },
            RegionSpec { part: PartName::Waist, bands: &[(0.8, 1.0)], sectors: &[(-90.0, 270.0)], grid: (2, 12) },
            RegionSpec { part: PartName::Back, bands: &[(0.2, 0.5), (0.5, 0.8)], sectors: &[(120.0, 240.0)], grid: (3, 6) },
        ],
    },
    CapsuleSpec {
        name: "chest",
        joint: 6,
        scale_joint: 6,
        start: [-0.08, -0.06, 0.0],
        end: [0.08, -0.06, 0.0],
        radius: 0.12,
        regions: &[
            RegionSpec { part: PartName::Chest, bands: THIRDS, sectors: &[(-70.0, 70.0)], grid: (3, 8) },
            RegionSpec { part: PartName::Back, bands: HALVES, sectors: &[(110.0, 250.0)], grid: (3, 7) },
        ],
    },
    CapsuleSpec {
        name: "upper_chest",
        joint: 9,
        scale_joint: 9,
        start: [-0.08, -0.12, 0.0],
        end: [0.08, -0.12, 0.0],
        radius: 0.10,
        regions: &[
            RegionSpec { part: PartName::Chest, bands: THIRDS, sectors: &[(-70.0, 70.0)], grid: (3, 7) },
            RegionSpec { part: PartName::Back, bands: HALVES, sectors: &[(110.0, 250.0)], grid: (3, 6) },
        ],
    },
    CapsuleSpec {
        name: "neck",
        joint: 12,
        scale_joint: 15,
        start: [0.0, 0.0, 0.0],
        end: [0.0, -0.10, 0.0],
        radius: 0.05,
        regions: &[RegionSpec { part: PartName::Neck, bands: FULL, sectors: FRONT_BACK, grid: (2, 6) }],
    },
    CapsuleSpec {
        name: "head",
        joint: 15,
        scale_joint: 15,
        start: [0.0, -0.03, -0.01],
        end: [0.0, -0.15, -0.01],
        radius: 0.09,
        regions: &[
            RegionSpec { part: PartName::Face, bands: HALVES, sectors: &[(-50.0, 50.0)], grid: (2, 5) },
            RegionSpec { part: PartName::Head, bands: HALVES, sectors: &[(50.0, 180.0), (180.0, 310.0)], grid: (2, 5) },
        ],
    },
];

/// Left-side capsules; the right side is their mirror image.
const LATERAL: &[CapsuleSpec] = &[
    CapsuleSpec {
        name: "shoulder",
        joint: 13,
        scale_joint: 16,
        start: [0.0, 0.0, 0.0],
        end: [0.11, 0.02, 0.0],
        radius: 0.055,
        regions: &[RegionSpec { part: PartName::Shoulder, bands: FULL, sectors: FRONT_BACK, grid: (3, 5) }],
    },
    CapsuleSpec {
        name: "upper_arm",
        joint: 16,
        scale_joint: 18,
        start: [0.0, 0.0, 0.0],
        end: [0.26, 0.0, 0.0],
        radius: 0.05,
        regions: &[
            RegionSpec { part: PartName::UpperArm, bands: &[(0.0, 0.8)], sectors: THREE_SECTORS, grid: (3, 3) },
            RegionSpec { part: PartName::Elbow, bands: &[(0.8, 1.0)], sectors: AROUND, grid: (2, 6) },
        ],
    },
    CapsuleSpec {
        name: "forearm",
        joint: 18,
        scale_joint: 20,
        start: [0.0, 0.0, 0.0],
        end: [0.25, 0.0, 0.0],
        radius: 0.04,
        regions: &[RegionSpec { part: PartName::Forearm, bands: FULL, sectors: THREE_SECTORS, grid: (4, 3) }],
    },
    CapsuleSpec {
        name: "hand",
        joint: 20,
        scale_joint: 20,
        start: [0.02, 0.0, 0.0],
        end: [0.16, 0.0, 0.0],
        radius: 0.035,
        regions: &[RegionSpec { part: PartName::Hand, bands: FULL, sectors: THREE_SECTORS, grid: (3, 3) }],
    },
    CapsuleSpec {
        name: "thigh",
        joint: 1,
        scale_joint: 4,
        start: [0.0, 0.0, 0.0],
        end: [0.0, 0.40, 0.0],
        radius: 0.075,
        regions: &[
            RegionSpec {
                part: PartName::Thigh,
                bands: &[(0.0, 0.85)],
                sectors: &[(-45.0, 45.0), (45.0, 135.0), (135.0, 225.0), (225.0, 315.0)],
                grid: (3, 3),
            },
            RegionSpec { part: PartName::Knee, bands: &[(0.85, 1.0)], sectors: AROUND, grid: (2, 6) },
        ],
    },
    CapsuleSpec {
        name: "shin",
        joint: 4,
        scale_joint: 7,
        start: [0.0, 0.0, 0.0],
        end: [0.0, 0.40, 0.0],
        radius: 0.05,
        regions: &[RegionSpec { part: PartName::Leg, bands: FULL, sectors: THREE_SECTORS, grid: (4, 3) }],
    },
    CapsuleSpec {
        name: "foot",
        joint: 7,
        scale_joint: 10,
        start: [0.0, 0.05, 0.03],
        end: [0.0, 0.06, -0.15],
        radius: 0.035,
        regions: &[RegionSpec { part: PartName::Foot, bands: FULL, sectors: FRONT_BACK, grid: (3, 3) }],
    },
];

const KEYPOINTS: [(&str, usize, Laterality); 17] = [
    ("head", 15, Laterality::Center),
    ("neck", 12, Laterality::Center),
    ("left_shoulder", 16, Laterality::Left),
    ("right_shoulder", 17, Laterality::Right),
    ("left_elbow", 18, Laterality::Left),
    ("right_elbow", 19, Laterality::Right),
    ("left_wrist", 20, Laterality::Left),
    ("right_wrist", 21, Laterality::Right),
    ("pelvis", 0, Laterality::Center),
    ("left_hip", 1, Laterality::Left),
    ("right_hip", 2, Laterality::Right),
    ("left_knee", 4, Laterality::Left),
    ("right_knee", 5, Laterality::Right),
    ("left_ankle", 7, Laterality::Left),
    ("right_ankle", 8, Laterality::Right),
    ("left_foot", 10, Laterality::Left),
    ("right_foot", 11, Laterality::Right),
];

/// Keypoint names (without side prefix) evidencing each lateral part.
const LATERAL_PART_KEYPOINTS: [(PartName, &[&str]); 10] = [
    (PartName::Hand, &["wrist"]),
    (PartName::Forearm, &["elbow", "wrist"]),
    (PartName::Elbow, &["elbow"]),
    (PartName::UpperArm, &["shoulder", "elbow"]),
    (PartName::Arm, &["shoulder", "elbow", "wrist"]),
    (PartName::Shoulder, &["shoulder"]),
    (PartName::Thigh, &["hip", "knee"]),
    (PartName::Knee, &["knee"]),
    (PartName::Leg, &["hip", "knee", "ankle"]),
    (PartName::Foot, &["ankle", "foot"]),
];

const MIDLINE_PART_KEYPOINTS: [(PartName, &[&str]); 7] = [
    (PartName::Head, &["head"]),
    (PartName::Face, &["head"]),
    (PartName::Neck, &["neck"]),
    (PartName::Chest, &["neck", "left_shoulder", "right_shoulder"]),
    (PartName::Stomach, &["pelvis", "left_hip", "right_hip"]),
    (PartName::Back, &["neck", "pelvis"]),
    (PartName::Waist, &["pelvis", "left_hip", "right_hip"]),
];

struct Builder {
    capsules: Vec<CapsuleDef>,
    samples: Vec<SurfaceSample>,
    region_names: Vec<String>,
    parts: PartMap,
}

impl Builder {
    fn add_capsule(&mut self, spec: &CapsuleSpec, side: Side) {
        let mirrored = side == Side::Right;
        let m = |v: [f64; 3]| if mirrored { [-v[0], v[1], v[2]] } else { v };
        let (joint, scale_joint) = if mirrored {
            (mirror_joint(spec.joint), mirror_joint(spec.scale_joint))
        } else {
            (spec.joint, spec.scale_joint)
        };
        let suffix = match side {
            Side::Left => "_left",
            Side::Right => "_right",
            _ => "",
        };
        let capsule = self.capsules.len();
        self.capsules.push(CapsuleDef {
            name: format!("{}{suffix}", spec.name),
            joint,
            scale_joint,
            start: m(spec.start),
            end: m(spec.end),
            radius: spec.radius,
            radius_shape: 0.5,
        });
        for r in spec.regions {
            for &(t0, t1) in r.bands {
                for &(a0, a1) in r.sectors {
                    let region = self.region_names.len() + 1;
                    let count = self.region_names.iter().filter(|n| n.starts_with(&format!("{}{suffix}_", r.part.as_str().replace(' ', "_")))).count();
                    self.region_names.push(format!("{}{suffix}_{}", r.part.as_str().replace(' ', "_"), count + 1));
                    self.parts.insert(BodyPart { name: r.part, side }, [region]);
                    let (nt, na) = r.grid;
                    for i in 0..nt {
                        let t = t0 + (i as f64 + 0.5) / nt as f64 * (t1 - t0);
                        for k in 0..na {
                            let deg = a0 + (k as f64 + 0.5) / na as f64 * (a1 - a0);
                            let deg = if mirrored { -deg } else { deg };
                            self.samples.push(SurfaceSample { capsule, axial: t, azimuth: deg.to_radians(), region });
                        }
                    }
                }
            }
        }
    }
}

/// Builds the default asset from the tables in this module.
pub fn build_default_asset() -> BodyModelAsset {
    let mut b = Builder { capsules: Vec::new(), samples: Vec::new(), region_names: Vec::new(), parts: PartMap::default() };
    for side in [Side::Left, Side::Right] {
        for spec in LATERAL {
            b.add_capsule(spec, side);
        }
    }
    for spec in MIDLINE {
        b.add_capsule(spec, Side::None);
    }

    // Composite lateral parts.
    for side in [Side::Left, Side::Right] {
        let get = |p: PartName| b.parts.lookup(BodyPart { name: p, side }).unwrap_or_default();
        let arm: Vec<usize> = [PartName::UpperArm, PartName::Elbow, PartName::Forearm].into_iter().flat_map(get).collect();
        let mut leg: Vec<usize> = [PartName::Thigh, PartName::Knee].into_iter().flat_map(get).collect();
        leg.extend(get(PartName::Leg));
        b.parts.insert(BodyPart { name: PartName::Arm, side }, arm);
        b.parts.insert(BodyPart { name: PartName::Leg, side }, leg);
    }

    let keypoints: Vec<KeypointDef> = KEYPOINTS
        .iter()
        .map(|&(name, joint, laterality)| KeypointDef { name: name.to_string(), joint, laterality })
        .collect();
    let kp = |name: &str| keypoints.iter().position(|k| k.name == name).expect("keypoint exists");
    let mut part_keypoints = PartMap::default();
    for (part, names) in LATERAL_PART_KEYPOINTS {
        for (side, prefix) in [(Side::Left, "left_"), (Side::Right, "right_")] {
            part_keypoints.insert(BodyPart { name: part, side }, names.iter().map(|n| kp(&format!("{prefix}{n}"))));
        }
    }
    for (part, names) in MIDLINE_PART_KEYPOINTS {
        part_keypoints.insert(BodyPart { name: part, side: Side::None }, names.iter().map(|n| kp(n)));
    }

    let asset = BodyModelAsset {
        schema_version: ASSET_SCHEMA_VERSION,
        joint_names: JOINTS.iter().map(|j| j.0.to_string()).collect(),
        parents: JOINTS.iter().map(|j| j.1).collect(),
        rest_offsets_adult: JOINTS.iter().map(|j| j.2).collect(),
        rest_offsets_infant: JOINTS
            .iter()
            .enumerate()
            .map(|(i, j)| j.2.map(|v| v * infant_ratio(i)))
            .collect(),
        shape_basis: (0..JOINTS.len()).map(shape_row).collect(),
        capsules: b.capsules,
        surface_samples: b.samples,
        region_count: b.region_names.len(),
        region_names: b.region_names,
        keypoints,
        part_regions: b.parts,
        part_keypoints,
        derived: Derived::default(),
    };
    asset.validated().expect("default asset is valid")
}
