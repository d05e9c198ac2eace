//! Forward kinematics and its reverse-mode derivative.

use nalgebra::{Matrix3, Vector3};

use super::asset::{BodyModelAsset, Laterality};
use super::so3;
use super::{BodyParams, BETA_OFFSET, GAMMA_OFFSET, PARAM_DIM, PHI_OFFSET, SHAPE_DIM, THETA_OFFSET};

/// Minimum bone scale relative to the rest length.
const MIN_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleWorld {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub radius: f64,
}

/// A body posed in world (camera) coordinates.
///
/// `surface[i]` is the world position of `asset.surface_samples[i]`.
#[derive(Clone, Debug)]
pub struct PosedBody {
    pub joints: Vec<Vector3<f64>>,
    pub surface: Vec<Vector3<f64>>,
    pub capsules: Vec<CapsuleWorld>,
    cache: Cache,
}

#[derive(Clone, Debug)]
struct Cache {
    local_rot: Vec<Matrix3<f64>>,
    local_jac: Vec<[Matrix3<f64>; 3]>,
    global_rot: Vec<Matrix3<f64>>,
    /// Age-blended, unscaled offset of each joint from its parent.
    offsets: Vec<Vector3<f64>>,
    /// Bone-length scale and whether it hit the lower clamp.
    scale: Vec<(f64, bool)>,
    age: Vec<f64>,
    /// Capsule size factor `age * scale`, and radius clamp flag.
    capsule_kappa: Vec<f64>,
    radius_clamped: Vec<bool>,
}

/// Upstream gradients with respect to every output of [`forward`].
#[derive(Clone, Debug)]
pub struct BodyGrad {
    pub joints: Vec<Vector3<f64>>,
    pub surface: Vec<Vector3<f64>>,
    pub capsule_start: Vec<Vector3<f64>>,
    pub capsule_end: Vec<Vector3<f64>>,
    pub capsule_radius: Vec<f64>,
}

impl BodyGrad {
    pub fn zeros(asset: &BodyModelAsset) -> Self {
        BodyGrad {
            joints: vec![Vector3::zeros(); asset.joint_count()],
            surface: vec![Vector3::zeros(); asset.surface_samples.len()],
            capsule_start: vec![Vector3::zeros(); asset.capsules.len()],
            capsule_end: vec![Vector3::zeros(); asset.capsules.len()],
            capsule_radius: vec![0.0; asset.capsules.len()],
        }
    }
}

fn age_factors(asset: &BodyModelAsset, offsets: &[Vector3<f64>]) -> Vec<f64> {
    let n = asset.joint_count();
    let mut age = vec![1.0; n];
    for j in 1..n {
        let adult = Vector3::from(asset.rest_offsets_adult[j]).norm();
        if adult > 1e-12 {
            age[j] = offsets[j].norm() / adult;
        }
    }
    // The root has no bone; it follows the mean of its children.
    let kids: Vec<f64> = (1..n).filter(|&j| asset.parents[j] == Some(0)).map(|j| age[j]).collect();
    if !kids.is_empty() {
        age[0] = kids.iter().sum::<f64>() / kids.len() as f64;
    }
    age
}

/// Poses the body.
pub fn forward(asset: &BodyModelAsset, params: &BodyParams) -> PosedBody {
    let n = asset.joint_count();
    let sigma = params.sigma;
    let offsets: Vec<Vector3<f64>> = (0..n)
        .map(|j| {
            Vector3::from(asset.rest_offsets_adult[j]) * (1.0 - sigma)
                + Vector3::from(asset.rest_offsets_infant[j]) * sigma
        })
        .collect();
    let age = age_factors(asset, &offsets);
    let scale: Vec<(f64, bool)> = asset
        .shape_basis
        .iter()
        .map(|row| {
            let s = 1.0 + row.iter().zip(&params.beta).map(|(b, x)| b * x).sum::<f64>();
            if s < MIN_SCALE {
                (MIN_SCALE, true)
            } else {
                (s, false)
            }
        })
        .collect();

    let mut local_rot = vec![Matrix3::identity(); n];
    let mut local_jac = vec![[Matrix3::zeros(); 3]; n];
    let mut global_rot = vec![Matrix3::identity(); n];
    let mut joints = vec![Vector3::zeros(); n];
    for &j in &asset.derived.order {
        let v = if j == 0 { params.phi } else { params.theta[j - 1] };
        let (r, d) = so3::exp_with_jacobian(&v);
        local_rot[j] = r;
        local_jac[j] = d;
        match asset.parents[j] {
            None => {
                global_rot[j] = r;
                joints[j] = params.gamma;
            }
            Some(p) => {
                global_rot[j] = global_rot[p] * r;
                joints[j] = joints[p] + global_rot[p] * (offsets[j] * scale[j].0);
            }
        }
    }

    let mut capsules = Vec::with_capacity(asset.capsules.len());
    let mut capsule_kappa = Vec::with_capacity(asset.capsules.len());
    let mut radius_clamped = Vec::with_capacity(asset.capsules.len());
    for c in &asset.capsules {
        let (s, _) = scale[c.scale_joint];
        let a = age[c.scale_joint];
        let kappa = a * s;
        let g = &global_rot[c.joint];
        let o = joints[c.joint];
        let rs = 1.0 + c.radius_shape * (s - 1.0);
        let (rs, clamped) = if rs < MIN_SCALE { (MIN_SCALE, true) } else { (rs, false) };
        capsules.push(CapsuleWorld {
            start: o + g * (Vector3::from(c.start) * kappa),
            end: o + g * (Vector3::from(c.end) * kappa),
            radius: c.radius * a * rs,
        });
        capsule_kappa.push(kappa);
        radius_clamped.push(clamped);
    }

    let surface = asset
        .surface_samples
        .iter()
        .map(|smp| {
            let c = &asset.capsules[smp.capsule];
            let (e1, e2) = &asset.derived.capsule_frames[smp.capsule];
            let kappa = capsule_kappa[smp.capsule];
            let axis_pt = Vector3::from(c.start) + (Vector3::from(c.end) - Vector3::from(c.start)) * smp.axial;
            let dir = e1 * smp.azimuth.cos() + e2 * smp.azimuth.sin();
            let local = axis_pt * kappa + dir * capsules[smp.capsule].radius;
            joints[c.joint] + global_rot[c.joint] * local
        })
        .collect();

    PosedBody {
        joints,
        surface,
        capsules,
        cache: Cache {
            local_rot,
            local_jac,
            global_rot,
            offsets,
            scale,
            age,
            capsule_kappa,
            radius_clamped,
        },
    }
}

impl PosedBody {
    /// Back-propagates output gradients to the flattened parameter block
    /// (`phi | theta | beta | gamma`). `sigma` is not differentiated.
    pub fn backward(&self, asset: &BodyModelAsset, grad: &BodyGrad) -> [f64; PARAM_DIM] {
        let n = asset.joint_count();
        let c = &self.cache;
        let mut g_pos = grad.joints.clone();
        let mut g_rot = vec![Matrix3::<f64>::zeros(); n];
        let mut g_scale = vec![0.0; n];
        let mut g_kappa = vec![0.0; asset.capsules.len()];
        let mut g_radius = grad.capsule_radius.clone();

        for (i, smp) in asset.surface_samples.iter().enumerate() {
            let gs = &grad.surface[i];
            if gs.x == 0.0 && gs.y == 0.0 && gs.z == 0.0 {
                continue;
            }
            let cap = &asset.capsules[smp.capsule];
            let (e1, e2) = &asset.derived.capsule_frames[smp.capsule];
            let kappa = c.capsule_kappa[smp.capsule];
            let axis_pt = Vector3::from(cap.start) + (Vector3::from(cap.end) - Vector3::from(cap.start)) * smp.axial;
            let dir = e1 * smp.azimuth.cos() + e2 * smp.azimuth.sin();
            let local = axis_pt * kappa + dir * self.capsules[smp.capsule].radius;
            g_pos[cap.joint] += gs;
            g_rot[cap.joint] += gs * local.transpose();
            let gl = c.global_rot[cap.joint].transpose() * gs;
            g_kappa[smp.capsule] += gl.dot(&axis_pt);
            g_radius[smp.capsule] += gl.dot(&dir);
        }

        for (k, cap) in asset.capsules.iter().enumerate() {
            let kappa = c.capsule_kappa[k];
            for (g, local) in [(&grad.capsule_start[k], cap.start), (&grad.capsule_end[k], cap.end)] {
                let l = Vector3::from(local);
                g_pos[cap.joint] += g;
                g_rot[cap.joint] += g * (l * kappa).transpose();
                g_kappa[k] += (c.global_rot[cap.joint].transpose() * g).dot(&l);
            }
            let m = cap.scale_joint;
            let a = c.age[m];
            if !c.radius_clamped[k] {
                g_scale[m] += g_radius[k] * cap.radius * a * cap.radius_shape;
            }
            g_scale[m] += g_kappa[k] * a;
        }

        let mut out = [0.0; PARAM_DIM];
        for &j in asset.derived.order.iter().rev() {
            let jac = &c.local_jac[j];
            let g_local;
            match asset.parents[j] {
                None => {
                    g_local = g_rot[j];
                    let gp = g_pos[j];
                    out[GAMMA_OFFSET..GAMMA_OFFSET + 3].copy_from_slice(gp.as_slice());
                }
                Some(p) => {
                    let gp = g_pos[j];
                    let v = c.offsets[j] * c.scale[j].0;
                    g_pos[p] += gp;
                    g_rot[p] += gp * v.transpose();
                    g_scale[j] += (c.global_rot[p].transpose() * gp).dot(&c.offsets[j]);
                    let gr = g_rot[j];
                    g_rot[p] += gr * c.local_rot[j].transpose();
                    g_local = c.global_rot[p].transpose() * gr;
                }
            }
            let base = if j == 0 { PHI_OFFSET } else { THETA_OFFSET + 3 * (j - 1) };
            for (i, d) in jac.iter().enumerate() {
                out[base + i] = g_local.component_mul(d).sum();
            }
        }

        for (j, row) in asset.shape_basis.iter().enumerate() {
            if c.scale[j].1 || g_scale[j] == 0.0 {
                continue;
            }
            for k in 0..SHAPE_DIM {
                out[BETA_OFFSET + k] += g_scale[j] * row[k];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelKeypoint {
    pub position: Vector3<f64>,
    pub laterality: Laterality,
}

/// Joints mapped to the asset's keypoint convention, in keypoint order.
pub fn model_keypoints(posed: &PosedBody, asset: &BodyModelAsset) -> Vec<ModelKeypoint> {
    asset
        .keypoints
        .iter()
        .map(|k| ModelKeypoint { position: posed.joints[k.joint], laterality: k.laterality })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{default_asset, POSE_JOINTS};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
        let mut p = BodyParams::default();
        p.phi = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        for t in &mut p.theta {
            *t = Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6));
        }
        for b in &mut p.beta {
            *b = rng.random_range(-1.0..1.0);
        }
        p.gamma = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        p.sigma = rng.random_range(0.0..1.0);
        p
    }

    #[test]
    fn rest_pose_accumulates_offsets() {
        let asset = default_asset();
        let posed = forward(asset, &BodyParams::default());
        for j in 1..asset.joint_count() {
            let p = asset.parents[j].unwrap();
            let expected = posed.joints[p] + Vector3::from(asset.rest_offsets_adult[j]);
            assert_relative_eq!(posed.joints[j], expected, epsilon = 1e-12);
        }
        assert_eq!(posed.joints[0], Vector3::zeros());
        assert_eq!(posed.surface.len(), asset.surface_samples.len());
    }

    #[test]
    fn translation_equivariance() {
        let asset = default_asset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng);
        let mut q = p.clone();
        q.gamma += Vector3::new(1.0, 0.0, 0.0);
        let a = forward(asset, &p);
        let b = forward(asset, &q);
        for (x, y) in a.joints.iter().zip(&b.joints).chain(a.surface.iter().zip(&b.surface)) {
            assert_relative_eq!(y - x, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        }
        assert_eq!(b.joints[0], q.gamma);
    }

    #[test]
    fn global_rotation_equivariance() {
        let asset = default_asset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng);
        let q_rot = so3::exp(&Vector3::new(0.2, -0.7, 0.4));
        let mut q = p.clone();
        q.phi = so3::log(&(q_rot * so3::exp(&p.phi)));
        let a = forward(asset, &p);
        let b = forward(asset, &q);
        for (x, y) in a.joints.iter().zip(&b.joints) {
            assert_relative_eq!(*y - p.gamma, q_rot * (x - p.gamma), epsilon = 1e-9);
        }
    }

    #[test]
    fn two_bone_chain_oracle() {
        // Independent check: joint 1 rotated 90 degrees about z, chain of
        // unit offsets along y.
        let mut asset = default_asset().clone();
        for o in asset.rest_offsets_adult.iter_mut().chain(asset.rest_offsets_infant.iter_mut()) {
            *o = [0.0, 1.0, 0.0];
        }
        asset.rest_offsets_adult[0] = [0.0; 3];
        asset.rest_offsets_infant[0] = [0.0; 3];
        let mut parents = vec![None];
        parents.extend((1..asset.joint_count()).map(|j| Some(j - 1)));
        asset.parents = parents;
        let asset = asset.validated().unwrap();
        let mut p = BodyParams::default();
        p.theta[0] = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let posed = forward(&asset, &p);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = Vector3::new(0.0, 1.0, 0.0) + rz * Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(posed.joints[2], expected, epsilon = 1e-12);
        assert_relative_eq!(posed.joints[2], Vector3::new(-1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn samples_lie_on_capsule_surface() {
        let asset = default_asset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let posed = forward(asset, &random_params(&mut rng));
            for (i, s) in asset.surface_samples.iter().enumerate() {
                let cap = &posed.capsules[s.capsule];
                let d = crate::geometry::point_segment_distance(&posed.surface[i], &cap.start, &cap.end);
                assert!((d - cap.radius).abs() < 1e-9, "sample {i}: {d} vs {}", cap.radius);
            }
        }
    }

    #[test]
    fn shape_affine_until_clamp() {
        let asset = default_asset();
        let bone = |beta0: f64| {
            let mut p = BodyParams::default();
            p.beta[0] = beta0;
            let posed = forward(asset, &p);
            (posed.joints[4] - posed.joints[1]).norm()
        };
        let l0 = bone(0.0);
        let l1 = bone(1.0);
        let l2 = bone(2.0);
        assert_relative_eq!(l2 - l1, l1 - l0, epsilon = 1e-12);
        assert_relative_eq!(l0, Vector3::from(asset.rest_offsets_adult[4]).norm(), epsilon = 1e-12);
        assert_relative_eq!(bone(-1e4), 0.1 * l0, epsilon = 1e-12);
    }

    #[test]
    fn sigma_zero_is_adult() {
        let asset = default_asset();
        let a = forward(asset, &BodyParams::default());
        let mut p = BodyParams::default();
        p.sigma = 1.0;
        let b = forward(asset, &p);
        let height = |x: &PosedBody| (x.joints[15] - x.joints[7]).norm();
        assert!(height(&b) < height(&a));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let asset = default_asset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng);
        let posed = forward(asset, &p);
        let mut g = BodyGrad::zeros(asset);
        for v in g.joints.iter_mut().chain(g.surface.iter_mut()).chain(g.capsule_start.iter_mut()) {
            *v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        }
        for r in &mut g.capsule_radius {
            *r = rng.random_range(-1.0..1.0);
        }
        let scalar = |q: &BodyParams| {
            let b = forward(asset, q);
            let mut s = 0.0;
            for (x, w) in b.joints.iter().zip(&g.joints) {
                s += x.dot(w);
            }
            for (x, w) in b.surface.iter().zip(&g.surface) {
                s += x.dot(w);
            }
            for (k, c) in b.capsules.iter().enumerate() {
                s += c.start.dot(&g.capsule_start[k]) + c.radius * g.capsule_radius[k];
            }
            s
        };
        let analytic = posed.backward(asset, &g);
        let flat = p.to_flat();
        let h = 1e-5;
        for i in 0..PARAM_DIM {
            let mut a = flat;
            let mut b = flat;
            a[i] += h;
            b[i] -= h;
            let fd = (scalar(&BodyParams::from_flat(&a, p.sigma)) - scalar(&BodyParams::from_flat(&b, p.sigma))) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
        assert_eq!(POSE_JOINTS * 3 + 16, PARAM_DIM);
    }
}
