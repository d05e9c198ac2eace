//! Fitting objective: keypoint reprojection, soft contact, pose and shape
//! priors, pose anchoring and interpenetration.

mod gmm;
mod terms;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{forward, BodyGrad, BodyModelAsset, BodyParams, Camera, PosedBody, BETA_OFFSET, PARAM_DIM, SHAPE_DIM, THETA_OFFSET};
use crate::keypoints::Keypoints2D;
use crate::taxonomy::{ContactMap, SoftWeights};

pub use gmm::{fit_gmm, EmConfig, GmmPrior, VARIANCE_FLOOR};
pub use terms::{
    contact_loss, contact_loss_grad, geman_mcclure, penetration_loss, penetration_loss_grad, pose_deviation,
    reprojection_loss, reprojection_loss_grad, shape_prior, GM_SCALE,
};

/// Flattened parameters of both people.
pub type PairFlat = [[f64; PARAM_DIM]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("unconstrained person {person}: no valid keypoints")]
    Unconstrained { person: usize },
    #[error("non-finite {term} loss{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: &'static str, step: Option<usize> },
    #[error("invalid pose prior: {0}")]
    InvalidPrior(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Per-stage replacements for individual weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_gmm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_theta_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_c: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_j: f64,
    pub lambda_gmm: f64,
    pub lambda_beta: f64,
    pub lambda_p: f64,
    pub lambda_theta_bar: f64,
    pub lambda_c: f64,
    pub stage1: WeightOverrides,
    pub stage2: WeightOverrides,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_j: 0.02,
            lambda_gmm: 0.01,
            lambda_beta: 0.01,
            lambda_p: 1.0,
            lambda_theta_bar: 0.1,
            lambda_c: 1.0,
            stage1: WeightOverrides::default(),
            stage2: WeightOverrides::default(),
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_j: 0.0,
            lambda_gmm: 0.0,
            lambda_beta: 0.0,
            lambda_p: 0.0,
            lambda_theta_bar: 0.0,
            lambda_c: 0.0,
            stage1: WeightOverrides::default(),
            stage2: WeightOverrides::default(),
        }
    }

    /// Weights with the stage's overrides applied.
    pub fn for_stage(&self, stage: Stage) -> LossWeights {
        let o = match stage {
            Stage::One => self.stage1,
            Stage::Two => self.stage2,
        };
        LossWeights {
            lambda_j: o.lambda_j.unwrap_or(self.lambda_j),
            lambda_gmm: o.lambda_gmm.unwrap_or(self.lambda_gmm),
            lambda_beta: o.lambda_beta.unwrap_or(self.lambda_beta),
            lambda_p: o.lambda_p.unwrap_or(self.lambda_p),
            lambda_theta_bar: o.lambda_theta_bar.unwrap_or(self.lambda_theta_bar),
            lambda_c: o.lambda_c.unwrap_or(self.lambda_c),
            stage1: WeightOverrides::default(),
            stage2: WeightOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for stage in [Stage::One, Stage::Two] {
            let w = self.for_stage(stage);
            let all = [w.lambda_j, w.lambda_gmm, w.lambda_beta, w.lambda_p, w.lambda_theta_bar, w.lambda_c];
            if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(LossError::InvalidWeights("every weight must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// A regularizer over both people's flattened parameters.
pub trait PairPrior: Sync {
    /// Called once per optimizer iteration before any evaluation of that
    /// iteration; stochastic priors draw their noise here.
    fn begin_step(&mut self, _flat: &PairFlat) {}

    /// Value of the prior; adds its gradient into `grad` when given.
    fn value_grad(&self, flat: &PairFlat, grad: Option<&mut PairFlat>) -> f64;
}

impl PairPrior for GmmPrior {
    fn value_grad(&self, flat: &PairFlat, grad: Option<&mut PairFlat>) -> f64 {
        let theta = |p: usize| &flat[p][THETA_OFFSET..BETA_OFFSET];
        match grad {
            None => self.nll(theta(0)) + self.nll(theta(1)),
            Some(g) => {
                let mut total = 0.0;
                for p in 0..2 {
                    let (v, d) = self.nll_grad(theta(p));
                    total += v;
                    for (k, dk) in d.iter().enumerate() {
                        g[p][THETA_OFFSET + k] += dk;
                    }
                }
                total
            }
        }
    }
}

/// Unweighted term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub j: f64,
    pub c: f64,
    pub prior: f64,
    pub beta: f64,
    pub theta_bar: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub total: f64,
    /// The transposed contact configuration gave the lower contact loss.
    pub swapped: bool,
    pub grad: Option<PairFlat>,
}

/// Everything the fitting objective needs besides the parameters.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub asset: &'a BodyModelAsset,
    pub camera: &'a Camera,
    pub keypoints: [&'a Keypoints2D; 2],
    pub conf_min: f64,
    pub contact: Option<(&'a ContactMap, &'a SoftWeights)>,
    /// Anchor poses, 63 values per person.
    pub theta_init: [Vec<f64>; 2],
    /// Age blend per person; held fixed.
    pub sigma: [f64; 2],
    pub weights: LossWeights,
}

fn add_scaled(dst: &mut BodyGrad, src: &BodyGrad, s: f64) {
    for (d, v) in dst.joints.iter_mut().zip(&src.joints) {
        *d += v * s;
    }
    for (d, v) in dst.surface.iter_mut().zip(&src.surface) {
        *d += v * s;
    }
    for (d, v) in dst.capsule_start.iter_mut().zip(&src.capsule_start) {
        *d += v * s;
    }
    for (d, v) in dst.capsule_end.iter_mut().zip(&src.capsule_end) {
        *d += v * s;
    }
    for (d, v) in dst.capsule_radius.iter_mut().zip(&src.capsule_radius) {
        *d += v * s;
    }
}

fn check(term: &'static str, v: f64) -> Result<f64, LossError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite { term, step: None })
    }
}

impl Objective<'_> {
    pub fn pose(&self, flat: &PairFlat) -> [PosedBody; 2] {
        [
            forward(self.asset, &BodyParams::from_flat(&flat[0], self.sigma[0])),
            forward(self.asset, &BodyParams::from_flat(&flat[1], self.sigma[1])),
        ]
    }

    /// Contact loss under the better of the two person-to-map assignments.
    fn contact_min(&self, posed: &[PosedBody; 2], grads: Option<&mut [BodyGrad; 2]>) -> (f64, bool) {
        let Some((c, w)) = self.contact else { return (0.0, false) };
        let direct = terms::contact_eval(&posed[0], &posed[1], c, w, self.asset, false, None);
        let swapped = terms::contact_eval(&posed[0], &posed[1], c, w, self.asset, true, None);
        let use_swap = swapped < direct;
        if let Some(g) = grads {
            terms::contact_eval(&posed[0], &posed[1], c, w, self.asset, use_swap, Some(g));
        }
        (if use_swap { swapped } else { direct }, use_swap)
    }

    /// Evaluates the stage objective. `prior` is an optional regularizer with
    /// its weight; stage one never includes the penetration term.
    pub fn evaluate(
        &self,
        stage: Stage,
        flat: &PairFlat,
        prior: Option<(&dyn PairPrior, f64)>,
        with_grad: bool,
    ) -> Result<Evaluation, LossError> {
        let w = self.weights.for_stage(stage);
        let posed = self.pose(flat);
        let refs = [&posed[0], &posed[1]];
        let mut terms = LossTerms::default();
        let mut out: PairFlat = [[0.0; PARAM_DIM]; 2];

        let mut body = with_grad.then(|| [BodyGrad::zeros(self.asset), BodyGrad::zeros(self.asset)]);
        let mut scratch = with_grad.then(|| [BodyGrad::zeros(self.asset), BodyGrad::zeros(self.asset)]);
        let flush = |body: &mut Option<[BodyGrad; 2]>, scratch: &mut Option<[BodyGrad; 2]>, s: f64| {
            if let (Some(b), Some(t)) = (body.as_mut(), scratch.as_mut()) {
                for p in 0..2 {
                    add_scaled(&mut b[p], &t[p], s);
                    t[p] = BodyGrad::zeros(self.asset);
                }
            }
        };

        terms.j = check(
            "reprojection",
            match scratch.as_mut() {
                Some(g) => reprojection_loss_grad(refs, self.keypoints, self.camera, self.asset, self.conf_min, g)?,
                None => reprojection_loss(refs, self.keypoints, self.camera, self.asset, self.conf_min)?,
            },
        )?;
        flush(&mut body, &mut scratch, w.lambda_j);

        let mut swapped = false;
        if w.lambda_c > 0.0 {
            let (v, s) = self.contact_min(&posed, scratch.as_mut());
            terms.c = check("contact", v)?;
            swapped = s;
            flush(&mut body, &mut scratch, w.lambda_c);
        }

        if stage == Stage::Two && w.lambda_p > 0.0 {
            terms.p = check(
                "penetration",
                match scratch.as_mut() {
                    Some(g) => penetration_loss_grad(&posed[0], &posed[1], g),
                    None => penetration_loss(&posed[0], &posed[1]),
                },
            )?;
            flush(&mut body, &mut scratch, w.lambda_p);
        }

        if let Some(b) = &body {
            for p in 0..2 {
                out[p] = posed[p].backward(self.asset, &b[p]);
            }
        }

        for p in 0..2 {
            let beta = &flat[p][BETA_OFFSET..BETA_OFFSET + SHAPE_DIM];
            let theta = &flat[p][THETA_OFFSET..BETA_OFFSET];
            terms.beta += shape_prior(beta);
            terms.theta_bar += pose_deviation(theta, &self.theta_init[p]);
            if with_grad {
                for k in 0..SHAPE_DIM {
                    out[p][BETA_OFFSET + k] += 2.0 * w.lambda_beta * beta[k];
                }
                for (k, (t, t0)) in theta.iter().zip(&self.theta_init[p]).enumerate() {
                    out[p][THETA_OFFSET + k] += 2.0 * w.lambda_theta_bar * (t - t0);
                }
            }
        }
        check("shape", terms.beta)?;
        check("pose anchor", terms.theta_bar)?;

        let mut prior_weight = 0.0;
        if let Some((prior, lambda)) = prior {
            prior_weight = lambda;
            if with_grad && lambda > 0.0 {
                let mut g: PairFlat = [[0.0; PARAM_DIM]; 2];
                terms.prior = prior.value_grad(flat, Some(&mut g));
                for p in 0..2 {
                    for k in 0..PARAM_DIM {
                        out[p][k] += lambda * g[p][k];
                    }
                }
            } else {
                terms.prior = prior.value_grad(flat, None);
            }
            check("pose prior", terms.prior)?;
        }

        let total = w.lambda_j * terms.j
            + w.lambda_c * terms.c
            + prior_weight * terms.prior
            + w.lambda_beta * terms.beta
            + w.lambda_theta_bar * terms.theta_bar
            + if stage == Stage::Two { w.lambda_p * terms.p } else { 0.0 };
        Ok(Evaluation { terms, total: check("total", total)?, swapped, grad: with_grad.then_some(out) })
    }
}

/// Total stage loss of a parameter pair.
pub fn total_loss(
    objective: &Objective<'_>,
    stage: Stage,
    params: &[BodyParams; 2],
    prior: Option<(&dyn PairPrior, f64)>,
) -> Result<f64, LossError> {
    let flat = [params[0].to_flat(), params[1].to_flat()];
    Ok(objective.evaluate(stage, &flat, prior, false)?.total)
}
