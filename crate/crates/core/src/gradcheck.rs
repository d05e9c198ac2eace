//! Central finite-difference checks of every analytic gradient.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{default_asset, forward, model_keypoints, project_point, BodyGrad, BodyParams, Camera, PosedBody, PARAM_DIM};
use crate::keypoints::{Keypoint2D, Keypoints2D};
use crate::losses::{LossWeights, Objective, PairFlat, PairPrior, Stage};
use crate::prior::{guidance_value_grad, GuidanceWeights};
use crate::synth::default_pose_prior;
use crate::taxonomy::{ContactMap, SoftWeights};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CONFIGS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Reprojection,
    Contact,
    PosePrior,
    Shape,
    PoseDeviation,
    Penetration,
    Guidance,
    Kinematics,
}

impl Target {
    pub const ALL: [Target; 8] = [
        Target::Reprojection,
        Target::Contact,
        Target::PosePrior,
        Target::Shape,
        Target::PoseDeviation,
        Target::Penetration,
        Target::Guidance,
        Target::Kinematics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Reprojection => "L_J",
            Target::Contact => "L_C",
            Target::PosePrior => "L_GMM",
            Target::Shape => "L_beta",
            Target::PoseDeviation => "L_theta_bar",
            Target::Penetration => "L_P",
            Target::Guidance => "guidance",
            Target::Kinematics => "forward_kinematics",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub target: Target,
    pub configs: usize,
    /// Worst full-vector relative error over all configurations.
    pub max_relative_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let hi = f(&probe);
            probe[i] = x[i] - h;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

fn camera() -> Camera {
    Camera::new(600.0, 600.0, 320.0, 240.0, 640, 480).expect("valid camera")
}

fn random_person(rng: &mut ChaCha8Rng, x: f64) -> BodyParams {
    let mut p = BodyParams::default();
    for t in &mut p.theta {
        *t = Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4));
    }
    for b in &mut p.beta {
        *b = rng.random_range(-0.8..0.8);
    }
    p.phi = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3));
    p.gamma = Vector3::new(x + rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1), 4.0 + rng.random_range(-0.3..0.3));
    p.sigma = rng.random_range(0.0..0.4);
    p
}

fn noisy_keypoints(rng: &mut ChaCha8Rng, posed: &PosedBody, cam: &Camera) -> Keypoints2D {
    Keypoints2D::new(
        model_keypoints(posed, default_asset())
            .iter()
            .map(|k| {
                let uv = project_point(cam, &k.position).valid().expect("person in front of the camera");
                Keypoint2D::new(uv.x + rng.random_range(-30.0..30.0), uv.y + rng.random_range(-30.0..30.0), rng.random_range(0.0..1.0))
            })
            .collect(),
    )
}

struct Config {
    params: [BodyParams; 2],
    kps: [Keypoints2D; 2],
    contact: (ContactMap, SoftWeights),
    theta_init: [Vec<f64>; 2],
}

fn random_config(rng: &mut ChaCha8Rng, overlap: bool) -> Config {
    let asset = default_asset();
    let cam = camera();
    let a = random_person(rng, -0.25);
    // Overlapping people exercise the penetration term.
    let b = if overlap { random_person(rng, -0.1) } else { random_person(rng, 0.25) };
    let kps = [noisy_keypoints(rng, &forward(asset, &a), &cam), noisy_keypoints(rng, &forward(asset, &b), &cam)];
    let r = asset.region_count;
    let mut c = ContactMap::zeros(r);
    let mut w = SoftWeights::zeros(r);
    for _ in 0..rng.random_range(1..10) {
        let (i, j) = (rng.random_range(1..=r), rng.random_range(1..=r));
        c.set(i, j, true);
        w.set(i, j, rng.random_range(0.1..1.0));
    }
    let jitter = |p: &BodyParams, rng: &mut ChaCha8Rng| p.theta_flat().iter().map(|t| t + rng.random_range(-0.2..0.2)).collect();
    let theta_init = [jitter(&a, rng), jitter(&b, rng)];
    Config { params: [a, b], kps, contact: (c, w), theta_init }
}

fn flatten(f: &PairFlat) -> Vec<f64> {
    f.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64]) -> PairFlat {
    let mut out = [[0.0; PARAM_DIM]; 2];
    out[0].copy_from_slice(&x[..PARAM_DIM]);
    out[1].copy_from_slice(&x[PARAM_DIM..]);
    out
}

fn objective_error(target: Target, cfg: &Config) -> f64 {
    let asset = default_asset();
    let cam = camera();
    let mut w = LossWeights::zero();
    let (stage, prior): (Stage, Option<(&dyn PairPrior, f64)>) = match target {
        Target::Reprojection => {
            w.lambda_j = 1.0;
            (Stage::One, None)
        }
        Target::Contact => {
            w.lambda_c = 1.0;
            (Stage::One, None)
        }
        Target::PosePrior => (Stage::One, Some((default_pose_prior() as &dyn PairPrior, 1.0))),
        Target::Shape => {
            w.lambda_beta = 1.0;
            (Stage::One, None)
        }
        Target::PoseDeviation => {
            w.lambda_theta_bar = 1.0;
            (Stage::One, None)
        }
        Target::Penetration => {
            w.lambda_p = 1.0;
            (Stage::Two, None)
        }
        _ => unreachable!("not an objective term"),
    };
    let objective = Objective {
        asset,
        camera: &cam,
        keypoints: [&cfg.kps[0], &cfg.kps[1]],
        conf_min: 0.3,
        contact: Some((&cfg.contact.0, &cfg.contact.1)),
        theta_init: cfg.theta_init.clone(),
        sigma: [cfg.params[0].sigma, cfg.params[1].sigma],
        weights: w,
    };
    let flat = [cfg.params[0].to_flat(), cfg.params[1].to_flat()];
    let eval = |f: &PairFlat, grad: bool| objective.evaluate(stage, f, prior, grad).expect("finite loss");
    let analytic = flatten(&eval(&flat, true).grad.expect("gradient requested"));
    let numeric = numeric_gradient(&flatten(&flat), FD_STEP, |x| eval(&unflatten(x), false).total);
    relative_error(&analytic, &numeric)
}

fn guidance_error(rng: &mut ChaCha8Rng, cfg: &Config) -> f64 {
    let current = [cfg.params[0].to_flat(), cfg.params[1].to_flat()];
    let mut target = current;
    for v in target.iter_mut().flatten() {
        *v += rng.random_range(-0.5..0.5);
    }
    let gw = GuidanceWeights {
        lambda_phi_hat: rng.random_range(0.0..2.0),
        lambda_theta_hat: rng.random_range(0.0..2.0),
        lambda_beta_hat: rng.random_range(0.0..2.0),
        lambda_gamma_hat: rng.random_range(0.0..2.0),
        ..Default::default()
    };
    let mut grad = [[0.0; PARAM_DIM]; 2];
    guidance_value_grad(&current, &target, &gw, Some(&mut grad));
    let numeric = numeric_gradient(&flatten(&current), FD_STEP, |x| guidance_value_grad(&unflatten(x), &target, &gw, None));
    relative_error(&flatten(&grad), &numeric)
}

/// Random linear functional of every forward-kinematics output.
fn kinematics_error(rng: &mut ChaCha8Rng, cfg: &Config) -> f64 {
    let asset = default_asset();
    let p = &cfg.params[0];
    let mut g = BodyGrad::zeros(asset);
    for v in g.joints.iter_mut().chain(g.surface.iter_mut()).chain(g.capsule_start.iter_mut()).chain(g.capsule_end.iter_mut()) {
        *v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    }
    for r in &mut g.capsule_radius {
        *r = rng.random_range(-1.0..1.0);
    }
    let scalar = |b: &PosedBody| {
        let dot = |xs: &[Vector3<f64>], ws: &[Vector3<f64>]| xs.iter().zip(ws).map(|(x, w)| x.dot(w)).sum::<f64>();
        let starts: Vec<_> = b.capsules.iter().map(|c| c.start).collect();
        let ends: Vec<_> = b.capsules.iter().map(|c| c.end).collect();
        dot(&b.joints, &g.joints)
            + dot(&b.surface, &g.surface)
            + dot(&starts, &g.capsule_start)
            + dot(&ends, &g.capsule_end)
            + b.capsules.iter().zip(&g.capsule_radius).map(|(c, w)| c.radius * w).sum::<f64>()
    };
    let analytic = forward(asset, p).backward(asset, &g);
    let numeric = numeric_gradient(&p.to_flat(), FD_STEP, |x| scalar(&forward(asset, &BodyParams::from_flat(x, p.sigma))));
    relative_error(&analytic, &numeric)
}

/// Checks one target on `configs` configurations derived from `seed`.
pub fn check(target: Target, configs: usize, seed: u64) -> CheckReport {
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((target as u64) << 32) ^ k as u64);
        let cfg = random_config(&mut rng, target == Target::Penetration);
        let err = match target {
            Target::Guidance => guidance_error(&mut rng, &cfg),
            Target::Kinematics => kinematics_error(&mut rng, &cfg),
            _ => objective_error(target, &cfg),
        };
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    CheckReport { target, configs, max_relative_error: worst, passed: worst <= TOLERANCE }
}

pub fn check_all(configs: usize, seed: u64) -> Vec<CheckReport> {
    Target::ALL.iter().map(|&t| check(t, configs, seed)).collect()
}
