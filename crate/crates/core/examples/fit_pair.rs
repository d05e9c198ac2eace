//! Fits a synthetic pair from noisy keypoints and a perturbed start, once
//! with its contact map and once without, and compares joint errors.
//!
//! ```text
//! cargo run --release --example fit_pair -- hug 3 trace.csv
//! ```

use pairfit::body::default_asset;
use pairfit::keypoints::DEFAULT_KP_CONF_MIN;
use pairfit::losses::LossWeights;
use pairfit::optimize::{fit_pair, passes_filter, OptimConfig, DEFAULT_FILTER_THRESHOLD};
use pairfit::synth::{corrupt, default_pose_prior, generate_scene, pa_mpjpe, pair_joints, CorruptionConfig};
use pairfit::taxonomy::SoftWeights;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let template = args.next().unwrap_or_else(|| "handshake".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let trace_path = args.next();

    let asset = default_asset();
    let scene = generate_scene(&template, asset, seed)?;
    let obs = corrupt(&scene, &CorruptionConfig::default(), asset, seed)?;
    let kps = [&obs.keypoints[0], &obs.keypoints[1]];
    let weights = LossWeights::default();
    let cfg = OptimConfig::default();
    let soft = SoftWeights::uniform(&scene.contact);
    let gt = pair_joints(&scene.params, asset);
    let error = |p: &[_; 2]| pa_mpjpe(&pair_joints(p, asset), &gt);

    println!("{template} seed {seed}: {} contact cells", scene.contact.count());
    println!("initialization      PA-MPJPE {:7.2} mm", error(&obs.init.params)?);
    for (label, contact) in [("with contact map", Some((&scene.contact, &soft))), ("without contacts", None)] {
        let fit = fit_pair(&obs.init, kps, &scene.camera, contact, &weights, Some(default_pose_prior()), &cfg, asset, DEFAULT_KP_CONF_MIN)?;
        println!(
            "{label:<19} PA-MPJPE {:7.2} mm  reprojection {:.1?} px  kept {}  iterations {:?}",
            error(&fit.params)?,
            fit.reprojection_error,
            passes_filter(fit.reprojection_error, DEFAULT_FILTER_THRESHOLD),
            fit.iterations
        );
        if let (Some(path), Some(_)) = (&trace_path, contact) {
            std::fs::write(path, fit.trace_csv())?;
            println!("wrote loss trace to {path}");
        }
    }
    Ok(())
}
