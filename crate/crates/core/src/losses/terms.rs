//! Individual loss terms. Each `*_grad` variant adds its gradient with respect
//! to the posed outputs into the supplied [`BodyGrad`]s and returns the value.

use nalgebra::{Vector2, Vector3};

use super::LossError;
use crate::body::{project_point, BodyGrad, BodyModelAsset, Camera, PosedBody, Projection};
use crate::geometry::closest_segment_params;
use crate::keypoints::Keypoints2D;
use crate::taxonomy::{ContactMap, SoftWeights};

/// Scale `c` of the Geman-McClure robustifier, in pixels.
pub const GM_SCALE: f64 = 50.0;

/// Geman-McClure `e^2 / (e^2 + c^2)` of a squared residual.
pub fn geman_mcclure(e2: f64, c: f64) -> f64 {
    e2 / (e2 + c * c)
}

fn reprojection_one(
    posed: &PosedBody,
    kps: &Keypoints2D,
    camera: &Camera,
    asset: &BodyModelAsset,
    conf_min: f64,
    person: usize,
    mut grad: Option<&mut BodyGrad>,
) -> Result<f64, LossError> {
    if kps.valid_count(conf_min) == 0 {
        return Err(LossError::Unconstrained { person });
    }
    let c2 = GM_SCALE * GM_SCALE;
    let mut total = 0.0;
    for (i, kp) in asset.keypoints.iter().enumerate() {
        if !kps.is_valid(i, conf_min) {
            continue;
        }
        let x = posed.joints[kp.joint];
        let Projection::Valid(uv) = project_point(camera, &x) else { continue };
        let det = &kps.points[i];
        let r = uv - Vector2::new(det.x, det.y);
        let e2 = r.norm_squared();
        total += det.confidence * geman_mcclure(e2, GM_SCALE);
        if let Some(g) = grad.as_deref_mut() {
            let d_e2 = det.confidence * c2 / ((e2 + c2) * (e2 + c2));
            let g_uv = r * (2.0 * d_e2);
            let iz = 1.0 / x.z;
            g.joints[kp.joint] += Vector3::new(
                g_uv.x * camera.fx * iz,
                g_uv.y * camera.fy * iz,
                -(g_uv.x * camera.fx * x.x + g_uv.y * camera.fy * x.y) * iz * iz,
            );
        }
    }
    Ok(total)
}

/// Robust keypoint reprojection loss `L_J` summed over both people.
pub fn reprojection_loss(
    posed: [&PosedBody; 2],
    kps: [&Keypoints2D; 2],
    camera: &Camera,
    asset: &BodyModelAsset,
    conf_min: f64,
) -> Result<f64, LossError> {
    let a = reprojection_one(posed[0], kps[0], camera, asset, conf_min, 0, None)?;
    let b = reprojection_one(posed[1], kps[1], camera, asset, conf_min, 1, None)?;
    Ok(a + b)
}

pub fn reprojection_loss_grad(
    posed: [&PosedBody; 2],
    kps: [&Keypoints2D; 2],
    camera: &Camera,
    asset: &BodyModelAsset,
    conf_min: f64,
    grads: &mut [BodyGrad; 2],
) -> Result<f64, LossError> {
    let [ga, gb] = grads;
    let a = reprojection_one(posed[0], kps[0], camera, asset, conf_min, 0, Some(ga))?;
    let b = reprojection_one(posed[1], kps[1], camera, asset, conf_min, 1, Some(gb))?;
    Ok(a + b)
}

/// Closest sample pair between region `ra` on `a` and region `rb` on `b`.
fn closest_pair(a: &PosedBody, b: &PosedBody, asset: &BodyModelAsset, ra: usize, rb: usize) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for &i in asset.region_samples(ra) {
        let p = a.surface[i];
        for &j in asset.region_samples(rb) {
            let d2 = (p - b.surface[j]).norm_squared();
            if d2 < best.0 {
                best = (d2, i, j);
            }
        }
    }
    best
}

/// Contact loss with the cells of `c` read either as (region of a, region of
/// b) or, when `transposed`, as (region of b, region of a).
pub(crate) fn contact_eval(
    a: &PosedBody,
    b: &PosedBody,
    c: &ContactMap,
    w: &SoftWeights,
    asset: &BodyModelAsset,
    transposed: bool,
    mut grads: Option<&mut [BodyGrad; 2]>,
) -> f64 {
    let mut total = 0.0;
    for (i, j) in c.active() {
        let wij = w.get(i, j);
        if wij == 0.0 {
            continue;
        }
        let (ra, rb) = if transposed { (j, i) } else { (i, j) };
        let (d2, si, sj) = closest_pair(a, b, asset, ra, rb);
        total += wij * d2;
        if let Some(g) = grads.as_deref_mut() {
            let diff = (a.surface[si] - b.surface[sj]) * (2.0 * wij);
            g[0].surface[si] += diff;
            g[1].surface[sj] -= diff;
        }
    }
    total
}

/// Soft contact loss `sum W_ij C_ij min ||v - u||^2` with `v` on region `i` of
/// body `a` and `u` on region `j` of body `b`.
pub fn contact_loss(a: &PosedBody, b: &PosedBody, c: &ContactMap, w: &SoftWeights, asset: &BodyModelAsset) -> f64 {
    contact_eval(a, b, c, w, asset, false, None)
}

pub fn contact_loss_grad(
    a: &PosedBody,
    b: &PosedBody,
    c: &ContactMap,
    w: &SoftWeights,
    asset: &BodyModelAsset,
    grads: &mut [BodyGrad; 2],
) -> f64 {
    contact_eval(a, b, c, w, asset, false, Some(grads))
}

fn penetration_eval(a: &PosedBody, b: &PosedBody, mut grads: Option<&mut [BodyGrad; 2]>) -> f64 {
    let mut total = 0.0;
    for (ka, ca) in a.capsules.iter().enumerate() {
        for (kb, cb) in b.capsules.iter().enumerate() {
            let reach = ca.radius + cb.radius;
            // Cheap reject on the bounding spheres of the two segments.
            let mid = ((ca.start + ca.end) - (cb.start + cb.end)).norm() * 0.5;
            if mid > reach + 0.5 * ((ca.end - ca.start).norm() + (cb.end - cb.start).norm()) {
                continue;
            }
            let (s, t) = closest_segment_params(&ca.start, &ca.end, &cb.start, &cb.end);
            let p = ca.start + (ca.end - ca.start) * s;
            let q = cb.start + (cb.end - cb.start) * t;
            let d = (p - q).norm();
            let pen = reach - d;
            if pen <= 0.0 {
                continue;
            }
            total += pen * pen;
            if let Some(g) = grads.as_deref_mut() {
                let gp = 2.0 * pen;
                g[0].capsule_radius[ka] += gp;
                g[1].capsule_radius[kb] += gp;
                if d > 0.0 {
                    let n: Vector3<f64> = (p - q) * (-gp / d);
                    g[0].capsule_start[ka] += n * (1.0 - s);
                    g[0].capsule_end[ka] += n * s;
                    g[1].capsule_start[kb] -= n * (1.0 - t);
                    g[1].capsule_end[kb] -= n * t;
                }
            }
        }
    }
    total
}

/// Interpenetration penalty `sum max(0, r_a + r_b - d)^2` over capsule pairs
/// of different people, `d` the distance between capsule axes.
pub fn penetration_loss(a: &PosedBody, b: &PosedBody) -> f64 {
    penetration_eval(a, b, None)
}

pub fn penetration_loss_grad(a: &PosedBody, b: &PosedBody, grads: &mut [BodyGrad; 2]) -> f64 {
    penetration_eval(a, b, Some(grads))
}

/// `||beta||^2`.
pub fn shape_prior(beta: &[f64]) -> f64 {
    beta.iter().map(|b| b * b).sum()
}

/// `||theta - theta_init||^2`.
pub fn pose_deviation(theta: &[f64], theta_init: &[f64]) -> f64 {
    assert_eq!(theta.len(), theta_init.len(), "pose dimensions differ");
    theta.iter().zip(theta_init).map(|(a, b)| (a - b) * (a - b)).sum()
}
