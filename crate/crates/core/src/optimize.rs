//! Two-stage fitting of a pair of bodies, reprojection error and filtering.

use serde::{Deserialize, Serialize};

use crate::body::{forward, model_keypoints, project_point, BodyModelAsset, BodyParams, Camera, BETA_OFFSET, GAMMA_OFFSET, PARAM_DIM, PHI_OFFSET, SHAPE_DIM, THETA_OFFSET};
use crate::keypoints::{BBox, Keypoints2D};
use crate::losses::{GmmPrior, LossError, LossTerms, LossWeights, Objective, PairFlat, PairPrior, Stage};
use crate::taxonomy::{ContactMap, SoftWeights};

/// Height in pixels of the frame the filter error is measured in.
pub const FILTER_FRAME_HEIGHT: f64 = 256.0;
pub const DEFAULT_FILTER_THRESHOLD: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Estimator,
    SynthOracle,
    ZeroInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitInit {
    pub params: [BodyParams; 2],
    pub source: InitSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop a stage once the loss changed by less than this over `convergence_window` steps.
    pub convergence_eps: f64,
    pub convergence_window: usize,
    /// A step raising the loss by more than this fraction is retried at half size.
    pub backoff_increase: f64,
    pub max_backoffs: u32,
    pub optimize_phi_stage1: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            stage1_steps: 300,
            stage2_steps: 200,
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            convergence_eps: 1e-7,
            convergence_window: 20,
            backoff_increase: 0.1,
            max_backoffs: 5,
            optimize_phi_stage1: true,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err("step counts must be positive".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err("step size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("moment decay rates must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: u8,
    pub step: usize,
    pub total: f64,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: [BodyParams; 2],
    /// Loss per accepted step; each stage ends with the loss of its returned parameters.
    pub trace: Vec<TraceEntry>,
    pub reprojection_error: [f64; 2],
    /// The transposed contact map fitted better.
    pub swapped: bool,
    pub iterations: [usize; 2],
}

impl FitResult {
    pub fn stage_trace(&self, stage: u8) -> Vec<f64> {
        self.trace.iter().filter(|e| e.stage == stage).map(|e| e.total).collect()
    }

    /// `stage,step,term,value` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("stage,step,term,value\n");
        for e in &self.trace {
            let t = &e.terms;
            for (name, v) in [("total", e.total), ("j", t.j), ("c", t.c), ("prior", t.prior), ("beta", t.beta), ("theta_bar", t.theta_bar), ("p", t.p)] {
                out.push_str(&format!("{},{},{name},{v}\n", e.stage, e.step));
            }
        }
        out
    }
}

fn stage_mask(stage: Stage, optimize_phi: bool) -> [bool; PARAM_DIM] {
    let mut mask = [false; PARAM_DIM];
    let phi = stage == Stage::Two || optimize_phi;
    for (k, m) in mask.iter_mut().enumerate() {
        *m = match k {
            _ if k < THETA_OFFSET => phi && k >= PHI_OFFSET,
            _ if k < BETA_OFFSET => true,
            _ if k < GAMMA_OFFSET => stage == Stage::One && k < BETA_OFFSET + SHAPE_DIM,
            _ => true,
        };
    }
    mask
}

fn with_step(e: LossError, step: usize) -> LossError {
    match e {
        LossError::NonFinite { term, .. } => LossError::NonFinite { term, step: Some(step) },
        other => other,
    }
}

struct StageOutcome {
    flat: PairFlat,
    swapped: bool,
    iterations: usize,
}

/// Runs one stage of masked Adam. The returned parameters are the best seen,
/// so the final loss never exceeds the initial one.
fn run_stage(
    objective: &Objective<'_>,
    stage: Stage,
    start: PairFlat,
    mut prior: Option<(&mut dyn PairPrior, f64)>,
    cfg: &OptimConfig,
    trace: &mut Vec<TraceEntry>,
) -> Result<StageOutcome, LossError> {
    let stage_no = if stage == Stage::One { 1 } else { 2 };
    let steps = if stage == Stage::One { cfg.stage1_steps } else { cfg.stage2_steps };
    let mask = stage_mask(stage, cfg.optimize_phi_stage1);
    let eval = |x: &PairFlat, prior: &Option<(&mut dyn PairPrior, f64)>, step: usize| {
        let p = prior.as_ref().map(|(p, l)| (&**p as &dyn PairPrior, *l));
        objective.evaluate(stage, x, p, true).map_err(|e| with_step(e, step))
    };

    let mut x = start;
    if let Some((p, _)) = prior.as_mut() {
        p.begin_step(&x);
    }
    let mut cur = eval(&x, &prior, 0)?;
    trace.push(TraceEntry { stage: stage_no, step: 0, total: cur.total, terms: cur.terms });
    let mut best = (x, cur.total, cur.terms, cur.swapped);
    let mut history = vec![cur.total];

    let mut m: PairFlat = [[0.0; PARAM_DIM]; 2];
    let mut v: PairFlat = [[0.0; PARAM_DIM]; 2];
    let mut iterations = 0;
    for step in 1..=steps {
        if step > 1 {
            if let Some((p, _)) = prior.as_mut() {
                p.begin_step(&x);
                cur = eval(&x, &prior, step)?;
            }
        }
        let g = cur.grad.expect("gradient requested");
        for p in 0..2 {
            for k in 0..PARAM_DIM {
                if mask[k] {
                    m[p][k] = cfg.beta1 * m[p][k] + (1.0 - cfg.beta1) * g[p][k];
                    v[p][k] = cfg.beta2 * v[p][k] + (1.0 - cfg.beta2) * g[p][k] * g[p][k];
                }
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);

        let mut scale = 1.0;
        let mut attempt = 0;
        let (cand, next) = loop {
            let mut cand = x;
            for p in 0..2 {
                for k in 0..PARAM_DIM {
                    if mask[k] {
                        let mh = m[p][k] / bc1;
                        let vh = v[p][k] / bc2;
                        cand[p][k] -= cfg.step_size * scale * mh / (vh.sqrt() + cfg.adam_eps);
                    }
                }
            }
            let next = eval(&cand, &prior, step)?;
            let limit = cur.total + cfg.backoff_increase * cur.total.abs();
            if next.total <= limit || attempt >= cfg.max_backoffs {
                break (cand, next);
            }
            scale *= 0.5;
            attempt += 1;
        };
        x = cand;
        cur = next;
        iterations = step;
        trace.push(TraceEntry { stage: stage_no, step, total: cur.total, terms: cur.terms });
        history.push(cur.total);
        if cur.total < best.1 {
            best = (x, cur.total, cur.terms, cur.swapped);
        }
        if history.len() > cfg.convergence_window {
            let old = history[history.len() - 1 - cfg.convergence_window];
            if (cur.total - old).abs() < cfg.convergence_eps {
                break;
            }
        }
    }
    trace.push(TraceEntry { stage: stage_no, step: iterations + 1, total: best.1, terms: best.2 });
    Ok(StageOutcome { flat: best.0, swapped: best.3, iterations })
}

fn reborrow<'s>(p: &'s mut Option<(&mut dyn PairPrior, f64)>) -> Option<(&'s mut dyn PairPrior, f64)> {
    match p {
        Some((p, l)) => Some((&mut **p, *l)),
        None => None,
    }
}

/// Two-stage fit over a prepared objective. Stage one optimizes pose, shape,
/// translation (and root orientation unless disabled); stage two freezes
/// shape and adds the penetration term. `prior` is an optional weighted
/// regularizer shared by both stages.
pub fn fit_two_stage(
    objective: &Objective<'_>,
    init: &[BodyParams; 2],
    mut prior: Option<(&mut dyn PairPrior, f64)>,
    cfg: &OptimConfig,
) -> Result<FitResult, LossError> {
    let start = [init[0].to_flat(), init[1].to_flat()];
    let mut trace = Vec::new();
    let s1 = run_stage(objective, Stage::One, start, reborrow(&mut prior), cfg, &mut trace)?;
    let s2 = run_stage(objective, Stage::Two, s1.flat, reborrow(&mut prior), cfg, &mut trace)?;
    let params = [BodyParams::from_flat(&s2.flat[0], objective.sigma[0]), BodyParams::from_flat(&s2.flat[1], objective.sigma[1])];
    let reprojection_error = reprojection_error(&params, objective.keypoints, objective.camera, objective.asset, objective.conf_min)?;
    Ok(FitResult { params, trace, reprojection_error, swapped: s2.swapped, iterations: [s1.iterations, s2.iterations] })
}

/// Fits both people to their keypoints under the contact map (`None` for a
/// contact-free fit) with the mixture pose prior when given.
#[allow(clippy::too_many_arguments)]
pub fn fit_pair(
    init: &FitInit,
    keypoints: [&Keypoints2D; 2],
    camera: &Camera,
    contact: Option<(&ContactMap, &SoftWeights)>,
    weights: &LossWeights,
    pose_prior: Option<&GmmPrior>,
    cfg: &OptimConfig,
    asset: &BodyModelAsset,
    conf_min: f64,
) -> Result<FitResult, LossError> {
    weights.validate()?;
    let objective = Objective {
        asset,
        camera,
        keypoints,
        conf_min,
        contact,
        theta_init: [init.params[0].theta_flat(), init.params[1].theta_flat()],
        sigma: [init.params[0].sigma, init.params[1].sigma],
        weights: *weights,
    };
    let mut gmm = pose_prior.cloned();
    let prior = gmm.as_mut().map(|g| (g as &mut dyn PairPrior, weights.lambda_gmm));
    fit_two_stage(&objective, &init.params, prior, cfg)
}

/// Union of both people's valid keypoint boxes.
pub fn pair_bbox(keypoints: [&Keypoints2D; 2], conf_min: f64) -> Option<BBox> {
    match (keypoints[0].bbox(conf_min), keypoints[1].bbox(conf_min)) {
        (Some(a), Some(b)) => Some(a.union(&b)),
        (a, b) => a.or(b),
    }
}

/// Mean pixel distance per person between reprojected model keypoints and
/// detections, measured after scaling the pair's box to 256 px height.
/// Keypoints that project behind the camera count as infinitely far.
pub fn reprojection_error(
    params: &[BodyParams; 2],
    keypoints: [&Keypoints2D; 2],
    camera: &Camera,
    asset: &BodyModelAsset,
    conf_min: f64,
) -> Result<[f64; 2], LossError> {
    let bbox = pair_bbox(keypoints, conf_min).ok_or(LossError::Unconstrained { person: 0 })?;
    let scale = if bbox.h > 0.0 { FILTER_FRAME_HEIGHT / bbox.h } else { 1.0 };
    let mut out = [0.0; 2];
    for p in 0..2 {
        let kps = keypoints[p];
        if kps.valid_count(conf_min) == 0 {
            return Err(LossError::Unconstrained { person: p });
        }
        let posed = forward(asset, &params[p]);
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, kp) in model_keypoints(&posed, asset).iter().enumerate() {
            if !kps.is_valid(i, conf_min) {
                continue;
            }
            n += 1;
            sum += match project_point(camera, &kp.position).valid() {
                Some(uv) => (uv - kps.points[i].pos()).norm() * scale,
                None => f64::INFINITY,
            };
        }
        out[p] = sum / n as f64;
    }
    Ok(out)
}

pub fn passes_filter(errors: [f64; 2], threshold: f64) -> bool {
    errors[0] < threshold && errors[1] < threshold
}

/// Splits items into (kept, rejected): kept iff both errors are below `threshold`.
pub fn filter_pairs<T>(items: Vec<(T, [f64; 2])>, threshold: f64) -> (Vec<(T, [f64; 2])>, Vec<(T, [f64; 2])>) {
    items.into_iter().partition(|(_, e)| passes_filter(*e, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_asset;
    use crate::keypoints::Keypoint2D;
    use nalgebra::Vector3;

    fn cam() -> Camera {
        Camera::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn person(x: f64, yaw: f64) -> BodyParams {
        let mut p = BodyParams { gamma: Vector3::new(x, 0.0, 4.0), phi: Vector3::new(0.0, yaw, 0.0), ..Default::default() };
        p.theta[15] = Vector3::new(0.0, 0.0, 0.4);
        p
    }

    fn exact(p: &BodyParams) -> Keypoints2D {
        let asset = default_asset();
        let posed = forward(asset, p);
        Keypoints2D::new(
            model_keypoints(&posed, asset)
                .iter()
                .map(|k| {
                    let uv = project_point(&cam(), &k.position).valid().unwrap();
                    Keypoint2D::new(uv.x, uv.y, 1.0)
                })
                .collect(),
        )
    }

    fn quick() -> OptimConfig {
        OptimConfig { stage1_steps: 60, stage2_steps: 40, ..Default::default() }
    }

    #[test]
    fn masks() {
        let m1 = stage_mask(Stage::One, true);
        let m2 = stage_mask(Stage::Two, true);
        assert!(m1.iter().all(|&b| b));
        assert!(!m2[BETA_OFFSET] && !m2[BETA_OFFSET + SHAPE_DIM - 1]);
        assert!(m2[GAMMA_OFFSET] && m2[PHI_OFFSET] && m2[THETA_OFFSET]);
        assert!(!stage_mask(Stage::One, false)[PHI_OFFSET]);
    }

    #[test]
    fn ground_truth_is_near_fixed_point() {
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let kps = [exact(&gt[0]), exact(&gt[1])];
        let init = FitInit { params: gt.clone(), source: InitSource::SynthOracle };
        let r = fit_pair(&init, [&kps[0], &kps[1]], &cam(), None, &LossWeights::default(), None, &quick(), default_asset(), 0.3).unwrap();
        for stage in [1, 2] {
            let t = r.stage_trace(stage);
            assert!(t.last().unwrap() <= &t[0]);
        }
        for p in 0..2 {
            for (a, b) in r.params[p].theta.iter().zip(&gt[p].theta) {
                assert!((a - b).norm() < 0.05);
            }
            assert_eq!(r.params[p].sigma, gt[p].sigma);
        }
    }

    #[test]
    fn contact_free_fit_reduces_keypoint_loss_and_freezes_shape() {
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let kps = [exact(&gt[0]), exact(&gt[1])];
        let mut init = gt.clone();
        init[0].gamma.x -= 0.15;
        init[1].theta[3] = Vector3::new(0.3, 0.0, 0.0);
        init[1].beta[0] = 0.2;
        let fi = FitInit { params: init, source: InitSource::ZeroInit };
        let r = fit_pair(&fi, [&kps[0], &kps[1]], &cam(), None, &LossWeights::default(), None, &quick(), default_asset(), 0.3).unwrap();
        let s1: Vec<&TraceEntry> = r.trace.iter().filter(|e| e.stage == 1).collect();
        assert!(s1.last().unwrap().terms.j <= s1[0].terms.j);
        let stage1_beta = {
            // Stage two starts from stage one's returned parameters and never moves beta.
            let last1 = r.trace.iter().rposition(|e| e.stage == 1).unwrap();
            r.trace[last1].terms.beta
        };
        let final_beta = r.trace.last().unwrap().terms.beta;
        assert_eq!(stage1_beta, final_beta);
    }

    #[test]
    fn deterministic() {
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let kps = [exact(&gt[0]), exact(&gt[1])];
        let mut init = gt.clone();
        init[1].gamma.z += 0.2;
        let fi = FitInit { params: init, source: InitSource::Estimator };
        let run = || fit_pair(&fi, [&kps[0], &kps[1]], &cam(), None, &LossWeights::default(), None, &quick(), default_asset(), 0.3).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn reprojection_error_cases() {
        let asset = default_asset();
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let kps = [exact(&gt[0]), exact(&gt[1])];
        assert_eq!(reprojection_error(&gt, [&kps[0], &kps[1]], &cam(), asset, 0.3).unwrap(), [0.0, 0.0]);

        // Shift person a's detections by 10 px in the normalized frame.
        let bbox = pair_bbox([&kps[0], &kps[1]], 0.3).unwrap();
        let shift = 10.0 * bbox.h / FILTER_FRAME_HEIGHT;
        let mut moved = kps[0].clone();
        for p in &mut moved.points {
            p.x += shift;
        }
        let e = reprojection_error(&gt, [&moved, &kps[1]], &cam(), asset, 0.3).unwrap();
        assert!((e[0] - 10.0).abs() < 1e-9 && e[1] == 0.0, "{e:?}");
    }

    #[test]
    fn reprojection_error_brute_force() {
        let asset = default_asset();
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let mut kps = [exact(&gt[0]), exact(&gt[1])];
        for (i, p) in kps[1].points.iter_mut().enumerate() {
            p.x += (i as f64 * 1.7).sin() * 6.0;
            p.y -= (i as f64 * 0.3).cos() * 4.0;
        }
        kps[1].points[4].confidence = 0.1;
        let e = reprojection_error(&gt, [&kps[0], &kps[1]], &cam(), asset, 0.3).unwrap();
        let clean = exact(&gt[1]);
        let bbox = kps[0].bbox(0.3).unwrap().union(&kps[1].bbox(0.3).unwrap());
        let idx: Vec<usize> = (0..17).filter(|&i| i != 4).collect();
        let brute = idx.iter().map(|&i| (clean.points[i].pos() - kps[1].points[i].pos()).norm()).sum::<f64>() / idx.len() as f64 * 256.0 / bbox.h;
        assert!((e[1] - brute).abs() < 1e-9);
    }

    #[test]
    fn filter_semantics() {
        let items = vec![("a", [15.0, 18.0]), ("b", [15.0, 25.0]), ("c", [0.0, 0.0]), ("d", [20.0, 1.0])];
        let (kept, rejected) = filter_pairs(items, DEFAULT_FILTER_THRESHOLD);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(rejected.iter().map(|k| k.0).collect::<Vec<_>>(), ["b", "d"]);
    }

    #[test]
    fn unconstrained_person_is_an_error() {
        let gt = [person(-0.4, 0.5), person(0.4, -0.5)];
        let kps = exact(&gt[0]);
        let none = Keypoints2D::new(vec![Keypoint2D::new(0.0, 0.0, 0.0); 17]);
        let fi = FitInit { params: gt.clone(), source: InitSource::ZeroInit };
        let r = fit_pair(&fi, [&kps, &none], &cam(), None, &LossWeights::default(), None, &quick(), default_asset(), 0.3);
        assert_eq!(r.unwrap_err(), LossError::Unconstrained { person: 1 });
    }
}
