//! Trains a small diffusion prior on synthetic pairs, draws samples from it,
//! and uses it to fit a pair without any contact annotation.
//!
//! ```text
//! cargo run --release --example diffusion_prior -- 400 prior.json
//! ```

use pairfit::body::{default_asset, forward};
use pairfit::keypoints::DEFAULT_KP_CONF_MIN;
use pairfit::losses::LossWeights;
use pairfit::optimize::OptimConfig;
use pairfit::prior::{fit_with_prior, sample, train, Checkpoint, DiffusionSchedule, GuidanceWeights, TrainConfig, TrainingPair};
use pairfit::synth::{corrupt, generate_scene, generate_scenes, min_surface_distance, pa_mpjpe, pair_joints, CorruptionConfig, TEMPLATES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let out = std::env::args().nth(2);
    let asset = default_asset();

    let data: Vec<TrainingPair> = generate_scenes(&TEMPLATES, pairs, asset, 1)?
        .into_iter()
        .map(|s| TrainingPair { params: s.params, source: "synth".into() })
        .collect();
    let schedule = DiffusionSchedule::default();
    let cfg = TrainConfig { steps: 600, hidden_width: 256, ..Default::default() };
    let (denoiser, report) = train(&data, &schedule, &cfg, asset)?;
    println!("trained {} steps on {} pairs, loss reduction {:.1}%", cfg.steps, data.len(), report.loss_reduction() * 100.0);

    for seed in 0..3 {
        let pair = denoiser.normalizer.decode(&sample(&denoiser, &schedule, seed), [0.0, 0.0]);
        let gap = min_surface_distance(&forward(asset, &pair[0]), &forward(asset, &pair[1]));
        println!("sample {seed}: people {:.2} m apart at the closest surface point", gap);
    }

    let scene = generate_scene("hug", asset, 90_001)?;
    let obs = corrupt(&scene, &CorruptionConfig::default(), asset, 2)?;
    let kps = [&obs.keypoints[0], &obs.keypoints[1]];
    let gt = pair_joints(&scene.params, asset);
    let optim = OptimConfig::default();
    for (label, gw) in [("guided", GuidanceWeights::default()), ("unguided", GuidanceWeights::zero())] {
        let fit = fit_with_prior(&obs.init, kps, &scene.camera, &denoiser, &schedule, &LossWeights::default(), &gw, &optim, asset, DEFAULT_KP_CONF_MIN)?;
        println!("{label:<9} fit: PA-MPJPE {:.1} mm", pa_mpjpe(&pair_joints(&fit.params, asset), &gt)?);
    }

    if let Some(path) = out {
        Checkpoint::new(schedule, denoiser, &report).save(&path)?;
        println!("saved checkpoint to {path}");
    }
    Ok(())
}
