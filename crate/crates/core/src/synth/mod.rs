//! Synthetic contacting pairs with known ground truth, input corruption and
//! evaluation metrics.

mod metrics;
mod templates;

use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ask::{ContactEntry, InteractionAnnotation};
use crate::geometry::segment_distance;
use crate::body::{default_asset, forward, model_keypoints, project_point, BodyModelAsset, BodyParams, Camera, PosedBody};
use crate::keypoints::{Keypoint2D, Keypoints2D};
use crate::losses::{fit_gmm, penetration_loss, EmConfig, GmmPrior};
use crate::optimize::{FitInit, InitSource};
use crate::taxonomy::{BodyPart, ContactMap, PartName, Side};

pub use metrics::{evaluate, pa_mpjpe, pair_joints, summarize, EvalItem, EvalReport, EvalRow};
pub use templates::TEMPLATES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown template {0:?}; expected one of {TEMPLATES:?}")]
    UnknownTemplate(String),
    #[error("template {template} failed contact closure after {attempts} attempts")]
    ClosureFailed { template: String, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least 3 non-collinear points for alignment")]
    Degenerate,
    #[error("nothing to evaluate")]
    Empty,
}

pub const DEFAULT_TAU_C: f64 = 0.02;
/// Capsule overlap (m) tolerated while closing a contact.
pub const CLOSURE_OVERLAP: f64 = 0.015;
/// Additional overlap (m) tolerated between the capsules of a template's slack parts.
pub const CONTACT_OVERLAP: f64 = 0.02;

/// Ground truth for one synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtScene {
    pub template: String,
    pub seed: u64,
    pub params: [BodyParams; 2],
    pub camera: Camera,
    pub contact: ContactMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Region pairs closer than this (m) are in contact.
    pub tau_c: f64,
    /// Std of the per-component pose noise (rad).
    pub pose_noise: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Largest capsule interpenetration penalty accepted for a scene.
    pub max_penetration: f64,
    pub min_keypoints_in_frame: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            tau_c: DEFAULT_TAU_C,
            pose_noise: 0.05,
            depth_min: 3.6,
            depth_max: 4.4,
            max_penetration: 2e-3,
            min_keypoints_in_frame: 6,
            max_attempts: 20,
        }
    }
}

pub fn default_camera() -> Camera {
    Camera { fx: 600.0, fy: 600.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
}

/// `R x R` minimum distances between surface regions of `a` and `b`, row major, 0-based.
pub fn region_distances(a: &PosedBody, b: &PosedBody, asset: &BodyModelAsset) -> Vec<f64> {
    let r = asset.region_count;
    let mut out = vec![f64::INFINITY; r * r];
    for (i, sa) in asset.surface_samples.iter().enumerate() {
        let pa = a.surface[i];
        let row = (sa.region - 1) * r;
        for (j, sb) in asset.surface_samples.iter().enumerate() {
            let d = (pa - b.surface[j]).norm();
            let cell = &mut out[row + sb.region - 1];
            if d < *cell {
                *cell = d;
            }
        }
    }
    out
}

/// `C_ij = 1` iff regions `i` of `a` and `j` of `b` come within `tau`.
pub fn geometric_contacts(a: &PosedBody, b: &PosedBody, asset: &BodyModelAsset, tau: f64) -> ContactMap {
    let r = asset.region_count;
    let d = region_distances(a, b, asset);
    let mut c = ContactMap::zeros(r);
    for i in 1..=r {
        for j in 1..=r {
            if d[(i - 1) * r + j - 1] <= tau {
                c.set(i, j, true);
            }
        }
    }
    c
}

/// Smallest distance between any surface samples of the two people.
pub fn min_surface_distance(a: &PosedBody, b: &PosedBody) -> f64 {
    let mut best = f64::INFINITY;
    for pa in &a.surface {
        for pb in &b.surface {
            best = best.min((pa - pb).norm_squared());
        }
    }
    best.sqrt()
}

fn part_samples(posed: &PosedBody, asset: &BodyModelAsset, part: BodyPart) -> Vec<Vector3<f64>> {
    let regions = asset.part_regions.lookup(part).unwrap_or_default();
    regions.iter().flat_map(|&r| asset.region_samples(r).iter().map(|&s| posed.surface[s])).collect()
}

fn set_distance(a: &[Vector3<f64>], b: &[Vector3<f64>], shift: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for pa in a {
        for pb in b {
            best = best.min((pa - pb - shift).norm_squared());
        }
    }
    best.sqrt()
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Smallest capsule surface gap between `a` and `b` shifted by `shift`,
/// negative when they interpenetrate. Pairs where both capsules carry the
/// template's slack parts get [`CONTACT_OVERLAP`] of extra slack.
fn capsule_clearance(a: &PosedBody, b: &PosedBody, shift: &Vector3<f64>, closing: &(Vec<bool>, Vec<bool>)) -> f64 {
    let mut best = f64::INFINITY;
    for (i, ca) in a.capsules.iter().enumerate() {
        for (j, cb) in b.capsules.iter().enumerate() {
            let d = segment_distance(&ca.start, &ca.end, &(cb.start + shift), &(cb.end + shift));
            let slack = if closing.0[i] && closing.1[j] { CONTACT_OVERLAP } else { 0.0 };
            best = best.min(d - ca.radius - cb.radius + slack);
        }
    }
    best
}

fn part_capsules(asset: &BodyModelAsset, parts: &[BodyPart]) -> Vec<bool> {
    let mut out = vec![false; asset.capsules.len()];
    for r in parts.iter().flat_map(|&p| asset.part_regions.lookup(p).unwrap_or_default()) {
        for &s in asset.region_samples(r) {
            out[asset.surface_samples[s].capsule] = true;
        }
    }
    out
}

/// Translation of `b` along the centroid-to-centroid direction of the two
/// part sample sets that brings them within `tau / 2`. Steps never push the
/// capsules deeper than [`CLOSURE_OVERLAP`] into each other; a step blocked by
/// another body part fails.
fn close_by_translation(
    a: &PosedBody,
    b: &PosedBody,
    sa: &[Vector3<f64>],
    sb: &[Vector3<f64>],
    closing: &(Vec<bool>, Vec<bool>),
    tau: f64,
) -> Option<Vector3<f64>> {
    let ca = centroid(sa);
    let cb = centroid(sb);
    let mut shift = Vector3::zeros();
    for _ in 0..500 {
        let d = set_distance(sa, sb, &shift);
        if d <= tau / 2.0 {
            return Some(shift);
        }
        let u = ca - (cb + shift);
        let n = u.norm();
        let clearance = capsule_clearance(a, b, &shift, closing);
        let step = (d - tau / 4.0).min(n).min(clearance + CLOSURE_OVERLAP);
        if n < 1e-9 || step < 1e-5 {
            return None;
        }
        shift += u / n * step;
    }
    None
}

fn keypoints_in_frame(posed: &PosedBody, asset: &BodyModelAsset, camera: &Camera) -> usize {
    model_keypoints(posed, asset)
        .iter()
        .filter(|k| project_point(camera, &k.position).valid().is_some_and(|uv| camera.contains(&uv)))
        .count()
}

pub fn generate_scene(template: &str, asset: &BodyModelAsset, seed: u64) -> Result<GtScene, SynthError> {
    generate_scene_with(template, asset, seed, &SceneConfig::default())
}

/// Poses two people from `template`, translates the second until the
/// template's parts touch, derives the contact map geometrically and frames
/// both with the default camera.
pub fn generate_scene_with(template: &str, asset: &BodyModelAsset, seed: u64, cfg: &SceneConfig) -> Result<GtScene, SynthError> {
    if !TEMPLATES.contains(&template) {
        return Err(SynthError::UnknownTemplate(template.to_string()));
    }
    if !(cfg.tau_c > 0.0) {
        return Err(SynthError::Config("tau_c must be positive".into()));
    }
    let camera = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let draw = templates::draw(template, &mut rng, cfg.pose_noise).expect("template checked");
        let [mut a, mut b] = draw.params;
        a.gamma = Vector3::new(-0.4, 0.0, 0.0);
        b.gamma = Vector3::new(0.4, 0.0, 0.0);
        let pa = forward(asset, &a);
        let mut pb = forward(asset, &b);
        // Start from a separation where no capsules touch.
        let none = (vec![false; asset.capsules.len()], vec![false; asset.capsules.len()]);
        let mut start = Vector3::zeros();
        while capsule_clearance(&pa, &pb, &start, &none) < 0.05 {
            start.x += 0.05;
        }
        b.gamma += start;
        pb = forward(asset, &b);
        let sa = part_samples(&pa, asset, draw.closure.0);
        let sb = part_samples(&pb, asset, draw.closure.1);
        let closing = (part_capsules(asset, &draw.slack.0), part_capsules(asset, &draw.slack.1));
        let Some(shift) = close_by_translation(&pa, &pb, &sa, &sb, &closing, cfg.tau_c) else { continue };
        b.gamma += shift;

        let mid = (a.gamma + b.gamma) / 2.0;
        let place = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(0.0..0.1), rng.random_range(cfg.depth_min..cfg.depth_max));
        a.gamma += place - mid;
        b.gamma += place - mid;

        let pa = forward(asset, &a);
        let pb = forward(asset, &b);
        if penetration_loss(&pa, &pb) > cfg.max_penetration {
            continue;
        }
        if keypoints_in_frame(&pa, asset, &camera) < cfg.min_keypoints_in_frame || keypoints_in_frame(&pb, asset, &camera) < cfg.min_keypoints_in_frame {
            continue;
        }
        let contact = geometric_contacts(&pa, &pb, asset, cfg.tau_c);
        if contact.is_empty() {
            continue;
        }
        return Ok(GtScene { template: template.to_string(), seed, params: [a, b], camera, contact });
    }
    Err(SynthError::ClosureFailed { template: template.to_string(), attempts: cfg.max_attempts })
}

/// `count` scenes cycling through `templates`. Seeds run upward from `seed`;
/// a seed whose closure fails is skipped.
pub fn generate_scenes(templates: &[&str], count: usize, asset: &BodyModelAsset, seed: u64) -> Result<Vec<GtScene>, SynthError> {
    generate_scenes_with(templates, count, asset, seed, &SceneConfig::default())
}

pub fn generate_scenes_with(
    templates: &[&str],
    count: usize,
    asset: &BodyModelAsset,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<Vec<GtScene>, SynthError> {
    if templates.is_empty() {
        return Err(SynthError::Config("no templates given".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut s = seed;
    let mut failures = 0;
    while out.len() < count {
        match generate_scene_with(templates[out.len() % templates.len()], asset, s, cfg) {
            Ok(scene) => out.push(scene),
            Err(e @ SynthError::ClosureFailed { .. }) => {
                failures += 1;
                if failures > count.max(10) {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
        s = s.wrapping_add(1);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// Std of the isotropic keypoint noise (px).
    pub kp_noise_px: f64,
    pub p_flip: f64,
    pub p_drop: f64,
    pub p_hall: f64,
    pub confidence_min: f64,
    pub confidence_max: f64,
    /// Per-joint rotation perturbation (rad, rms norm).
    pub theta_scale: f64,
    /// Root translation perturbation (m, rms norm).
    pub gamma_scale: f64,
    pub phi_scale: f64,
    pub beta_scale: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            kp_noise_px: 2.0,
            p_flip: 0.0,
            p_drop: 0.0,
            p_hall: 0.0,
            confidence_min: 0.6,
            confidence_max: 1.0,
            theta_scale: 0.15,
            gamma_scale: 0.3,
            phi_scale: 0.0,
            beta_scale: 0.0,
        }
    }
}

impl CorruptionConfig {
    /// No noise, no annotation errors, exact init.
    pub fn clean() -> Self {
        CorruptionConfig {
            kp_noise_px: 0.0,
            confidence_min: 1.0,
            confidence_max: 1.0,
            theta_scale: 0.0,
            gamma_scale: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, p) in [("p_flip", self.p_flip), ("p_drop", self.p_drop), ("p_hall", self.p_hall)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0 <= self.confidence_min && self.confidence_min <= self.confidence_max && self.confidence_max <= 1.0) {
            return Err(SynthError::Config("confidence range must satisfy 0 <= min <= max <= 1".into()));
        }
        for (name, s) in [
            ("kp_noise_px", self.kp_noise_px),
            ("theta_scale", self.theta_scale),
            ("gamma_scale", self.gamma_scale),
            ("phi_scale", self.phi_scale),
            ("beta_scale", self.beta_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub keypoints: [Keypoints2D; 2],
    pub annotation: InteractionAnnotation,
    pub init: FitInit,
}

/// Exact projected keypoints with confidence 1.
pub fn clean_keypoints(scene: &GtScene, asset: &BodyModelAsset) -> [Keypoints2D; 2] {
    let one = |p: &BodyParams| {
        let posed = forward(asset, p);
        Keypoints2D::new(
            model_keypoints(&posed, asset)
                .iter()
                .map(|k| match project_point(&scene.camera, &k.position).valid() {
                    Some(uv) => Keypoint2D::new(uv.x, uv.y, 1.0),
                    None => Keypoint2D::new(0.0, 0.0, 0.0),
                })
                .collect(),
        )
    };
    [one(&scene.params[0]), one(&scene.params[1])]
}

/// Most specific part (fewest regions) containing each region, indexed by region id.
fn region_parts(asset: &BodyModelAsset) -> Vec<Option<BodyPart>> {
    let mut best: Vec<Option<(usize, BodyPart)>> = vec![None; asset.region_count + 1];
    for (part, ids) in asset.part_regions.entries() {
        for &r in ids {
            if r < best.len() && best[r].is_none_or(|(n, _)| ids.len() < n) {
                best[r] = Some((ids.len(), part));
            }
        }
    }
    best.into_iter().map(|b| b.map(|(_, p)| p)).collect()
}

/// Part-level entries covering the active cells of `c`, in cell order, deduplicated.
pub fn contact_entries(c: &ContactMap, asset: &BodyModelAsset) -> Vec<ContactEntry> {
    let parts = region_parts(asset);
    let mut out: Vec<ContactEntry> = Vec::new();
    for (i, j) in c.active() {
        let (Some(a), Some(b)) = (parts[i], parts[j]) else { continue };
        if !out.iter().any(|e| e.part_left == a && e.part_right == b) {
            out.push(ContactEntry { part_left: a, part_right: b, confidence: 1.0 });
        }
    }
    out
}

fn flip_entry(e: &ContactEntry) -> ContactEntry {
    ContactEntry { part_left: e.part_left.flipped(), part_right: e.part_right.flipped(), confidence: e.confidence }
}

fn random_part(rng: &mut ChaCha8Rng) -> BodyPart {
    let name = PartName::ALL[rng.random_range(0..PartName::ALL.len())];
    let side = if name.is_midline() {
        Side::None
    } else if rng.random_bool(0.5) {
        Side::Left
    } else {
        Side::Right
    };
    BodyPart::new(name, side)
}

fn perturb(rng: &mut ChaCha8Rng, v: &mut Vector3<f64>, rms: f64) {
    if rms > 0.0 {
        let n = Normal::new(0.0, rms / 3f64.sqrt()).unwrap();
        *v += Vector3::from_fn(|_, _| n.sample(rng));
    }
}

/// Noisy observations of a scene: keypoints, a part-level annotation with
/// side flips, dropouts and hallucinations, and a perturbed initialization.
pub fn corrupt(scene: &GtScene, cfg: &CorruptionConfig, asset: &BodyModelAsset, seed: u64) -> Result<Observations, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keypoints = clean_keypoints(scene, asset);
    let noise = Normal::new(0.0, cfg.kp_noise_px.max(f64::MIN_POSITIVE)).unwrap();
    for kps in &mut keypoints {
        for p in &mut kps.points {
            if p.confidence == 0.0 {
                continue;
            }
            if cfg.kp_noise_px > 0.0 {
                p.x += noise.sample(&mut rng);
                p.y += noise.sample(&mut rng);
            }
            p.confidence = if cfg.confidence_max > cfg.confidence_min {
                rng.random_range(cfg.confidence_min..cfg.confidence_max)
            } else {
                cfg.confidence_max
            };
        }
    }

    let mut contacts = Vec::new();
    for e in contact_entries(&scene.contact, asset) {
        if rng.random_bool(cfg.p_drop) {
            continue;
        }
        let lateral = e.part_left.is_lateral() || e.part_right.is_lateral();
        contacts.push(if lateral && rng.random_bool(cfg.p_flip) { flip_entry(&e) } else { e });
        if rng.random_bool(cfg.p_hall) {
            contacts.push(ContactEntry { part_left: random_part(&mut rng), part_right: random_part(&mut rng), confidence: rng.random_range(0.3..1.0) });
        }
    }
    let annotation = InteractionAnnotation {
        interaction: scene.template.clone(),
        person_left: "person a".into(),
        person_right: "person b".into(),
        orientation: String::new(),
        contacts,
    };

    let mut params = scene.params.clone();
    for p in &mut params {
        for t in &mut p.theta {
            perturb(&mut rng, t, cfg.theta_scale);
        }
        perturb(&mut rng, &mut p.gamma, cfg.gamma_scale);
        perturb(&mut rng, &mut p.phi, cfg.phi_scale);
        if cfg.beta_scale > 0.0 {
            let n = Normal::new(0.0, cfg.beta_scale).unwrap();
            for b in &mut p.beta {
                *b += n.sample(&mut rng);
            }
        }
    }
    Ok(Observations { keypoints, annotation, init: FitInit { params, source: InitSource::SynthOracle } })
}

/// Flattened poses (63 values each) from every template, both people.
pub fn pose_library(count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let draw = templates::draw(TEMPLATES[k % TEMPLATES.len()], &mut rng, SceneConfig::default().pose_noise).expect("shipped template");
        for p in &draw.params {
            if out.len() < count {
                out.push(p.theta_flat());
            }
        }
        k += 1;
    }
    out
}

pub const DEFAULT_PRIOR_COMPONENTS: usize = 8;

/// Mixture pose prior fitted once on [`pose_library`].
pub fn default_pose_prior() -> &'static GmmPrior {
    static PRIOR: OnceLock<GmmPrior> = OnceLock::new();
    PRIOR.get_or_init(|| {
        let library = pose_library(1000, 7);
        fit_gmm(&library, DEFAULT_PRIOR_COMPONENTS, &EmConfig { seed: 7, ..Default::default() }).expect("library large enough")
    })
}

/// Scenes over the default asset.
pub fn default_scene(template: &str, seed: u64) -> Result<GtScene, SynthError> {
    generate_scene(template, default_asset(), seed)
}
