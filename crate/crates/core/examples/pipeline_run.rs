//! Runs the dataset pipeline on synthetic scenes: corrupted annotations are
//! denoised, pairs are fitted and filtered, and the kept fits are scored.
//! Records are written as JSON lines after every stage.
//!
//! ```text
//! cargo run --release --example pipeline_run -- 10 out_dir
//! ```

use std::path::PathBuf;

use pairfit::body::default_asset;
use pairfit::pipeline::{records_from_scenes, run_stage, scene_record_name, write_records, PipelineConfig, Stage, StageContext};
use pairfit::synth::{default_pose_prior, evaluate, generate_scenes, EvalItem, TEMPLATES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let dir = PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "pipeline_out".into()));
    std::fs::create_dir_all(&dir)?;
    let asset = default_asset();
    let mut config = PipelineConfig::default();
    config.seed = 42;

    let scenes = generate_scenes(&TEMPLATES, count, asset, config.seed)?;
    let mut records = records_from_scenes(&scenes, &config.corruption, asset, config.seed)?;
    write_records(&records, dir.join("asked.jsonl"))?;

    let ctx = StageContext { pose_prior: Some(default_pose_prior()), ..StageContext::new(&config, asset) };
    for (stage, file) in [(Stage::Denoise, "denoised.jsonl"), (Stage::Fit, "fitted.jsonl"), (Stage::Filter, "filtered.jsonl")] {
        let (out, summary) = run_stage(stage, records, &ctx)?;
        println!(
            "{:<8} processed {:>3}  failed {}  filtered {}  skipped {}",
            stage.as_str(),
            summary.processed,
            summary.failed,
            summary.filtered,
            summary.skipped
        );
        write_records(&out, dir.join(file))?;
        records = out;
    }

    let items: Vec<EvalItem> = records
        .iter()
        .filter(|r| r.kept == Some(true))
        .filter_map(|r| {
            let scene = scenes.iter().find(|s| scene_record_name(s) == r.image_name)?;
            Some(EvalItem { template: scene.template.clone(), gt: scene.params.clone(), init: r.init.clone()?, fitted: r.params.clone()? })
        })
        .collect();
    if items.is_empty() {
        println!("no pair passed the filter");
    } else {
        print!("{}", evaluate(&items, asset)?.to_csv());
    }
    println!("records in {}", dir.display());
    Ok(())
}
