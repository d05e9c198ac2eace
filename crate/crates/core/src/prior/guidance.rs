//! Test-time guidance: the prior's denoised estimate as a regression target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{Denoise, PRIOR_DIM};
use super::schedule::{diffuse, DiffusionSchedule};
use super::PriorError;
use crate::body::{BodyModelAsset, BodyParams, Camera, BETA_OFFSET, GAMMA_OFFSET, PARAM_DIM, PHI_OFFSET, THETA_OFFSET};
use crate::keypoints::Keypoints2D;
use crate::losses::{LossWeights, Objective, PairFlat, PairPrior, WeightOverrides};
use crate::optimize::{fit_two_stage, FitInit, FitResult, OptimConfig};

pub const DEFAULT_T_GUID: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceWeights {
    pub lambda_phi_hat: f64,
    pub lambda_theta_hat: f64,
    pub lambda_beta_hat: f64,
    pub lambda_gamma_hat: f64,
    pub t_guid: usize,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights { lambda_phi_hat: 1.0, lambda_theta_hat: 1.0, lambda_beta_hat: 1.0, lambda_gamma_hat: 1.0, t_guid: DEFAULT_T_GUID }
    }
}

impl GuidanceWeights {
    /// All group weights zero; the guidance term vanishes.
    pub fn zero() -> Self {
        GuidanceWeights { lambda_phi_hat: 0.0, lambda_theta_hat: 0.0, lambda_beta_hat: 0.0, lambda_gamma_hat: 0.0, ..Default::default() }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<(), PriorError> {
        let l = [self.lambda_phi_hat, self.lambda_theta_hat, self.lambda_beta_hat, self.lambda_gamma_hat];
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(PriorError::Config("guidance weights must be non-negative".into()));
        }
        if self.t_guid == 0 || self.t_guid > schedule.steps() {
            return Err(PriorError::Config(format!("t_guid {} outside [1, {}]", self.t_guid, schedule.steps())));
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        [self.lambda_phi_hat, self.lambda_theta_hat, self.lambda_beta_hat, self.lambda_gamma_hat].iter().all(|l| *l == 0.0)
    }

    fn groups(&self) -> [(std::ops::Range<usize>, f64); 4] {
        [
            (PHI_OFFSET..THETA_OFFSET, self.lambda_phi_hat),
            (THETA_OFFSET..BETA_OFFSET, self.lambda_theta_hat),
            (BETA_OFFSET..GAMMA_OFFSET, self.lambda_beta_hat),
            (GAMMA_OFFSET..PARAM_DIM, self.lambda_gamma_hat),
        ]
    }
}

/// Diffuses `current` to step `t` with fresh noise and returns the
/// denoiser's clean estimate in raw parameter units.
pub fn denoise_at(current: &PairFlat, denoiser: &dyn Denoise, schedule: &DiffusionSchedule, t: usize, rng: &mut ChaCha8Rng) -> PairFlat {
    let norm = denoiser.normalizer();
    let raw: Vec<f64> = current.iter().flatten().copied().collect();
    let x0 = norm.normalize(&raw);
    let eps: Vec<f64> = (0..PRIOR_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let est = norm.denormalize(&denoiser.predict(&diffuse(&x0, t, &eps, schedule), t));
    let mut out = [[0.0; PARAM_DIM]; 2];
    out[0].copy_from_slice(&est[..PARAM_DIM]);
    out[1].copy_from_slice(&est[PARAM_DIM..]);
    out
}

/// Weighted squared group distances between `current` and a fixed `target`;
/// adds the gradient with respect to `current` when given.
pub fn guidance_value_grad(current: &PairFlat, target: &PairFlat, gw: &GuidanceWeights, mut grad: Option<&mut PairFlat>) -> f64 {
    let mut total = 0.0;
    for p in 0..2 {
        for (range, lambda) in gw.groups() {
            if lambda == 0.0 {
                continue;
            }
            for k in range {
                let d = current[p][k] - target[p][k];
                total += lambda * d * d;
                if let Some(g) = grad.as_deref_mut() {
                    g[p][k] += 2.0 * lambda * d;
                }
            }
        }
    }
    total
}

/// One draw of the guidance term at `gw.t_guid`.
pub fn guidance_loss(
    current: &PairFlat,
    denoiser: &dyn Denoise,
    schedule: &DiffusionSchedule,
    gw: &GuidanceWeights,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let target = denoise_at(current, denoiser, schedule, gw.t_guid, rng);
    guidance_value_grad(current, &target, gw, None)
}

/// The guidance term as an optimizer prior: every iteration draws fresh
/// noise and holds the resulting estimate fixed as the target.
pub struct GuidancePrior<'a> {
    denoiser: &'a dyn Denoise,
    schedule: &'a DiffusionSchedule,
    weights: GuidanceWeights,
    rng: ChaCha8Rng,
    target: Option<PairFlat>,
}

impl<'a> GuidancePrior<'a> {
    pub fn new(denoiser: &'a dyn Denoise, schedule: &'a DiffusionSchedule, weights: GuidanceWeights, rng: ChaCha8Rng) -> Self {
        GuidancePrior { denoiser, schedule, weights, rng, target: None }
    }
}

impl PairPrior for GuidancePrior<'_> {
    fn begin_step(&mut self, flat: &PairFlat) {
        if !self.weights.is_zero() {
            self.target = Some(denoise_at(flat, self.denoiser, self.schedule, self.weights.t_guid, &mut self.rng));
        }
    }

    fn value_grad(&self, flat: &PairFlat, grad: Option<&mut PairFlat>) -> f64 {
        match &self.target {
            Some(target) => guidance_value_grad(flat, target, &self.weights, grad),
            None => 0.0,
        }
    }
}

/// Two-stage fit with the diffusion prior in place of the contact map,
/// the mixture pose prior and the shape prior. The pose anchor is the
/// initialization after one diffuse-and-denoise pass.
#[allow(clippy::too_many_arguments)]
pub fn fit_with_prior(
    init: &FitInit,
    keypoints: [&Keypoints2D; 2],
    camera: &Camera,
    denoiser: &dyn Denoise,
    schedule: &DiffusionSchedule,
    weights: &LossWeights,
    gw: &GuidanceWeights,
    cfg: &OptimConfig,
    asset: &BodyModelAsset,
    conf_min: f64,
) -> Result<FitResult, PriorError> {
    gw.validate(schedule)?;
    weights.validate()?;
    cfg.validate().map_err(PriorError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = [init.params[0].to_flat(), init.params[1].to_flat()];
    let denoised = denoise_at(&start, denoiser, schedule, gw.t_guid, &mut rng);
    let theta = |p: usize| denoised[p][THETA_OFFSET..BETA_OFFSET].to_vec();
    let drop = |o: WeightOverrides| WeightOverrides { lambda_c: None, lambda_gmm: None, lambda_beta: None, ..o };
    let w = LossWeights {
        lambda_c: 0.0,
        lambda_gmm: 0.0,
        lambda_beta: 0.0,
        stage1: drop(weights.stage1),
        stage2: drop(weights.stage2),
        ..*weights
    };
    let objective = Objective {
        asset,
        camera,
        keypoints,
        conf_min,
        contact: None,
        theta_init: [theta(0), theta(1)],
        sigma: [init.params[0].sigma, init.params[1].sigma],
        weights: w,
    };
    let mut prior = GuidancePrior::new(denoiser, schedule, *gw, rng);
    let start_params: [BodyParams; 2] = init.params.clone();
    Ok(fit_two_stage(&objective, &start_params, Some((&mut prior, 1.0)), cfg)?)
}
