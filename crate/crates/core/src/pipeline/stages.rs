use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{record_seed, sort_records, PairRecord, PipelineConfig, PipelineError, RecordError, RecordStage};
use crate::ask::{build_prompt, crop_image, parse_annotation, propose_candidates, AskClient, ImageDetections, ProposalConfig};
use crate::body::{BodyModelAsset, BodyParams, Camera};
use crate::denoise::{denoise_annotation, KeypointEvidence};
use crate::keypoints::{pair_scale, BBox};
use crate::losses::GmmPrior;
use crate::optimize::{fit_pair, pair_bbox, passes_filter, FitInit, InitSource};
use crate::prior::{fit_with_prior, Checkpoint};
use crate::synth::{corrupt, CorruptionConfig, GtScene};
use crate::taxonomy::build_contact_map;

/// Depth (m) at which people without an initial estimate are placed.
pub const ZERO_INIT_DEPTH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ask,
    Denoise,
    Fit,
    FitWithPrior,
    Filter,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ask => "ask",
            Stage::Denoise => "denoise",
            Stage::Fit => "fit",
            Stage::FitWithPrior => "fit-with-prior",
            Stage::Filter => "filter",
        }
    }

    /// Stage a record must have reached before this one applies.
    fn input(self) -> RecordStage {
        match self {
            Stage::Ask | Stage::FitWithPrior => RecordStage::Proposed,
            Stage::Denoise => RecordStage::Asked,
            Stage::Fit => RecordStage::Denoised,
            Stage::Filter => RecordStage::Fitted,
        }
    }

    pub fn output(self) -> RecordStage {
        match self {
            Stage::Ask => RecordStage::Asked,
            Stage::Denoise => RecordStage::Denoised,
            Stage::Fit | Stage::FitWithPrior => RecordStage::Fitted,
            Stage::Filter => RecordStage::Filtered,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Stage::Ask, Stage::Denoise, Stage::Fit, Stage::FitWithPrior, Stage::Filter]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Everything a stage may need besides the records.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub config: &'a PipelineConfig,
    pub asset: &'a BodyModelAsset,
    /// Required by the ask stage.
    pub ask_client: Option<&'a AskClient>,
    /// Directory holding the source images, for the ask stage.
    pub images_dir: Option<&'a Path>,
    /// Mixture pose prior for the plain fit; `None` disables the term.
    pub pose_prior: Option<&'a GmmPrior>,
    /// Required by the guided fit.
    pub checkpoint: Option<&'a Checkpoint>,
}

impl<'a> StageContext<'a> {
    pub fn new(config: &'a PipelineConfig, asset: &'a BodyModelAsset) -> Self {
        StageContext { config, asset, ask_client: None, images_dir: None, pose_prior: None, checkpoint: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    /// Records the stage was applied to, failed ones included.
    pub processed: usize,
    pub failed: usize,
    /// Records the filter rejected.
    pub filtered: usize,
    /// Records left untouched: already past the stage or carrying an earlier error.
    pub skipped: usize,
}

enum Outcome {
    Done(Box<PairRecord>),
    Failed(Box<PairRecord>),
    Skipped(Box<PairRecord>),
}

/// Applies `stage` to every eligible record on a worker pool. Per-record
/// failures are written to the record's `error` field; only configuration
/// problems abort. Output is sorted by record identity.
pub fn run_stage(stage: Stage, records: Vec<PairRecord>, ctx: &StageContext<'_>) -> Result<(Vec<PairRecord>, StageSummary), PipelineError> {
    ctx.config.validate()?;
    match stage {
        Stage::Ask if ctx.ask_client.is_none() || ctx.images_dir.is_none() => {
            return Err(PipelineError::Config("the ask stage needs a provider and an image directory".into()))
        }
        Stage::FitWithPrior if ctx.checkpoint.is_none() => {
            return Err(PipelineError::Config("the guided fit needs a prior checkpoint".into()))
        }
        _ => {}
    }
    let digest = ctx.config.digest();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| records.into_par_iter().map(|r| process(stage, r, ctx, &digest)).collect());

    let mut summary = StageSummary::default();
    let mut out = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let r = match o {
            Outcome::Done(r) => {
                summary.processed += 1;
                if stage == Stage::Filter && r.kept == Some(false) {
                    summary.filtered += 1;
                }
                r
            }
            Outcome::Failed(r) => {
                summary.processed += 1;
                summary.failed += 1;
                r
            }
            Outcome::Skipped(r) => {
                summary.skipped += 1;
                r
            }
        };
        out.push(*r);
    }
    sort_records(&mut out);
    Ok((out, summary))
}

fn process(stage: Stage, mut r: PairRecord, ctx: &StageContext<'_>, digest: &str) -> Outcome {
    if r.error.is_some() || r.stage >= stage.output() {
        return Outcome::Skipped(Box::new(r));
    }
    let result = if r.stage < stage.input() {
        Err(format!("record is at stage {}, {} needs {}", r.stage.as_str(), stage.as_str(), stage.input().as_str()))
    } else {
        apply(stage, &mut r, ctx)
    };
    match result {
        Ok(()) => {
            r.stage = stage.output();
            r.provenance.config_digest = digest.to_string();
            debug_assert!(r.validate().is_ok());
            Outcome::Done(Box::new(r))
        }
        Err(message) => {
            r.error = Some(RecordError { stage: stage.as_str().into(), message });
            Outcome::Failed(Box::new(r))
        }
    }
}

fn apply(stage: Stage, r: &mut PairRecord, ctx: &StageContext<'_>) -> Result<(), String> {
    let cfg = ctx.config;
    let conf_min = cfg.proposal.kp_conf_min;
    match stage {
        Stage::Ask => {
            let (client, dir) = (ctx.ask_client.expect("checked"), ctx.images_dir.expect("checked"));
            let path = dir.join(&r.image_name);
            let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let crop = crop_image(&bytes, &r.bbox, cfg.provider.crop_margin).map_err(|e| e.to_string())?;
            let raw = client.query(&crop, &build_prompt(r.interaction.as_deref())).map_err(|e| e.to_string())?;
            r.lvlm_output = Some(parse_annotation(&raw).map_err(|e| e.to_string())?);
        }
        Stage::Denoise => {
            let ann = r.lvlm_output.as_ref().ok_or("missing annotation")?;
            let denoised = if ann.contacts.is_empty() {
                Vec::new()
            } else {
                let scale = pair_scale(&r.keypoints[0], &r.keypoints[1], conf_min).ok_or("no valid keypoints to measure the pair scale")?;
                let ev = KeypointEvidence {
                    kps_a: &r.keypoints[0],
                    kps_b: &r.keypoints[1],
                    part_keypoints: &ctx.asset.part_keypoints,
                    scale,
                    conf_min,
                };
                denoise_annotation(ann, &ev)
            };
            r.denoised_contacts = Some(denoised);
        }
        Stage::Fit => {
            let contacts = r.denoised_contacts.as_deref().ok_or("missing denoised contacts")?;
            let (c, w) = build_contact_map(contacts, &ctx.asset.part_regions, ctx.asset.region_count, cfg.confidence_floor)
                .map_err(|e| e.to_string())?;
            let camera = r.camera.ok_or("record has no camera")?;
            let init = fit_init(r, &camera, conf_min);
            let seed = record_seed(cfg.seed, &r.image_name, r.person_ids);
            let optim = crate::optimize::OptimConfig { seed, ..cfg.optim };
            let contact = (!c.is_empty()).then_some((&c, &w));
            let kps = [&r.keypoints[0], &r.keypoints[1]];
            let fit = fit_pair(&init, kps, &camera, contact, &cfg.weights, ctx.pose_prior, &optim, ctx.asset, conf_min)
                .map_err(|e| e.to_string())?;
            r.provenance.seeds.insert("fit".into(), seed);
            r.params = Some(fit.params);
            r.filter_error = Some(fit.reprojection_error);
        }
        Stage::FitWithPrior => {
            let ckpt = ctx.checkpoint.expect("checked");
            let camera = r.camera.ok_or("record has no camera")?;
            let init = fit_init(r, &camera, conf_min);
            let seed = record_seed(cfg.seed, &r.image_name, r.person_ids);
            let optim = crate::optimize::OptimConfig { seed, ..cfg.optim };
            let kps = [&r.keypoints[0], &r.keypoints[1]];
            let fit = fit_with_prior(&init, kps, &camera, &ckpt.denoiser, &ckpt.schedule, &cfg.weights, &cfg.guidance, &optim, ctx.asset, conf_min)
                .map_err(|e| e.to_string())?;
            r.provenance.seeds.insert("fit".into(), seed);
            r.params = Some(fit.params);
            r.filter_error = Some(fit.reprojection_error);
        }
        Stage::Filter => {
            let err = r.filter_error.ok_or("missing reprojection error")?;
            r.kept = Some(passes_filter(err, cfg.filter_threshold));
        }
    }
    Ok(())
}

/// The record's initial estimate, or a neutral pose placed under each
/// person's keypoint box at a fixed depth.
fn fit_init(r: &PairRecord, camera: &Camera, conf_min: f64) -> FitInit {
    if let Some(params) = &r.init {
        return FitInit { params: params.clone(), source: InitSource::Estimator };
    }
    let place = |p: usize| {
        let center = r.keypoints[p].bbox(conf_min).unwrap_or(r.bbox).center();
        BodyParams {
            gamma: Vector3::new(
                (center.x - camera.cx) / camera.fx * ZERO_INIT_DEPTH,
                (center.y - camera.cy) / camera.fy * ZERO_INIT_DEPTH,
                ZERO_INIT_DEPTH,
            ),
            ..BodyParams::default()
        }
    };
    FitInit { params: [place(0), place(1)], source: InitSource::ZeroInit }
}

/// Records for every candidate pair found in the detections, sorted.
pub fn propose_records(detections: &[ImageDetections], cfg: &ProposalConfig, asset: Option<&BodyModelAsset>) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for det in detections {
        for cand in propose_candidates(det, cfg, asset) {
            let person = |id: usize| det.people.iter().find(|p| p.id == id).expect("candidate ids come from the detections");
            let (a, b) = (person(cand.a), person(cand.b));
            let mut r = PairRecord::new(det.image.clone(), [a.id, b.id], cand.bbox, [a.keypoints.clone(), b.keypoints.clone()], "detections");
            r.interaction = cand.action.clone();
            r.camera = det.camera;
            if let (Some(ia), Some(ib)) = (&a.init, &b.init) {
                r.init = Some([ia.clone(), ib.clone()]);
            }
            out.push(r);
        }
    }
    sort_records(&mut out);
    out
}

/// Name of the record built from a synthetic scene.
pub fn scene_record_name(scene: &GtScene) -> String {
    format!("synth-{}-{}", scene.template, scene.seed)
}

/// Asked-stage records from synthetic scenes: corrupted keypoints, a corrupted
/// annotation and a perturbed initialization per scene.
pub fn records_from_scenes(scenes: &[GtScene], corruption: &CorruptionConfig, asset: &BodyModelAsset, seed: u64) -> Result<Vec<PairRecord>, PipelineError> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let name = scene_record_name(scene);
        let s = record_seed(seed, &name, [0, 1]);
        let obs = corrupt(scene, corruption, asset, s).map_err(|e| PipelineError::Config(e.to_string()))?;
        let bbox = pair_bbox([&obs.keypoints[0], &obs.keypoints[1]], 0.0).unwrap_or(BBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 });
        let mut r = PairRecord::new(name, [0, 1], bbox, obs.keypoints, "synth");
        r.interaction = Some(scene.template.clone());
        r.camera = Some(scene.camera);
        r.init = Some(obs.init.params);
        r.lvlm_output = Some(obs.annotation);
        r.stage = RecordStage::Asked;
        r.provenance.seeds.insert("scene".into(), scene.seed);
        r.provenance.seeds.insert("corrupt".into(), s);
        out.push(r);
    }
    sort_records(&mut out);
    Ok(out)
}
