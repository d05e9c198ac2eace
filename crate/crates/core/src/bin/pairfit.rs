use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use pairfit::ask::{AnnotationProvider, AskClient, HttpProvider, ImageDetections, MockProvider};
use pairfit::body::{default_asset, BodyModelAsset};
use pairfit::gradcheck::{check_all, DEFAULT_CONFIGS, TOLERANCE};
use pairfit::losses::GmmPrior;
use pairfit::pipeline::{
    propose_records, read_jsonl, read_records, records_from_scenes, run_stage, scene_record_name, write_jsonl, write_records,
    PairRecord, PipelineConfig, ProviderKind, RecordStage, Stage, StageContext, StageSummary,
};
use pairfit::prior::{train, Checkpoint, TrainingPair};
use pairfit::synth::{default_pose_prior, evaluate, generate_scenes_with, EvalItem, GtScene, TEMPLATES};

/// Pseudo-ground-truth 3D pose pairs for people in close contact.
#[derive(Parser)]
#[command(name = "pairfit", version)]
struct Cli {
    /// Pipeline configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Body model asset (JSON); the built-in body when absent.
    #[arg(long, global = true)]
    assets: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InOut {
    /// Input records (JSON lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output records (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Candidate pairs from per-image detections.
    Propose {
        /// Detections, one image per line.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Queries the annotation provider for each proposed pair.
    Ask {
        #[command(flatten)]
        io: InOut,
        /// Directory holding the images named in the records.
        #[arg(long)]
        images: PathBuf,
    },
    /// Corrects the laterality of annotated contacts.
    Denoise {
        #[command(flatten)]
        io: InOut,
    },
    /// Fits both people under their contact map.
    Fit {
        #[command(flatten)]
        io: InOut,
        /// Mixture pose prior (JSON); the built-in one when absent.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Keeps pairs whose reprojection error is below the threshold for both people.
    Filter {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the rejected records here.
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Trains the diffusion prior on fitted records and/or synthetic scenes.
    PriorTrain {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Checkpoint output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits without contact maps, guided by a trained prior.
    FitWithPrior {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generates synthetic contacting scenes.
    Synth {
        /// Comma-separated template names.
        #[arg(long, value_delimiter = ',')]
        templates: Option<Vec<String>>,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write corrupted, ready-to-denoise records.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Joint PA-MPJPE of fitted records against their synthetic scenes (CSV).
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_CONFIGS)]
        configs: usize,
    },
}

enum Failure {
    /// Configuration or asset problem.
    Setup(String),
    /// The batch finished but some records failed.
    Records(usize),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Setup(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Setup(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Records(n)) => {
            eprintln!("{n} record(s) failed");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_asset(path: Option<&Path>) -> Result<BodyModelAsset, Failure> {
    match path {
        Some(p) => Ok(BodyModelAsset::load(p)?),
        None => Ok(default_asset().clone()),
    }
}

fn report(stage: Stage, s: &StageSummary) -> Result<(), Failure> {
    info!("{}: processed {}, failed {}, filtered {}, skipped {}", stage.as_str(), s.processed, s.failed, s.filtered, s.skipped);
    if s.failed > 0 {
        Err(Failure::Records(s.failed))
    } else {
        Ok(())
    }
}

fn stage_io(stage: Stage, io: &InOut, ctx: &StageContext<'_>) -> Result<(), Failure> {
    let records = read_records(&io.input)?;
    let (out, summary) = run_stage(stage, records, ctx)?;
    write_records(&out, &io.out)?;
    report(stage, &summary)
}

fn ask_client(cfg: &PipelineConfig) -> Result<AskClient, Failure> {
    let p = &cfg.provider;
    let provider: Arc<dyn AnnotationProvider> = match p.kind {
        ProviderKind::Mock => {
            let dir = p.mock_dir.clone().ok_or_else(|| Failure::Setup("provider.mock_dir is required for the mock provider".into()))?;
            Arc::new(MockProvider::new(dir))
        }
        ProviderKind::Http => {
            let endpoint = p.endpoint.clone().ok_or_else(|| Failure::Setup("provider.endpoint is required for the http provider".into()))?;
            Arc::new(HttpProvider::new(endpoint, p.model.clone(), Duration::from_secs_f64(p.timeout_secs))?)
        }
    };
    Ok(AskClient::new(provider, p.cache_dir.clone(), p.retry_policy(), p.max_in_flight))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let asset = load_asset(cli.assets.as_deref())?;
    let ctx = StageContext::new(&cfg, &asset);
    match &cli.command {
        Command::Propose { detections, out } => {
            let dets: Vec<ImageDetections> = read_jsonl(detections)?;
            let records = propose_records(&dets, &cfg.proposal, Some(&asset));
            info!("propose: {} pairs from {} images", records.len(), dets.len());
            write_records(&records, out)?;
        }
        Command::Ask { io, images } => {
            let client = ask_client(&cfg)?;
            let ctx = StageContext { ask_client: Some(&client), images_dir: Some(images), ..ctx };
            stage_io(Stage::Ask, io, &ctx)?;
        }
        Command::Denoise { io } => stage_io(Stage::Denoise, io, &ctx)?,
        Command::Fit { io, prior } => {
            let loaded: Option<GmmPrior> = match prior {
                Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let gmm = loaded.as_ref().unwrap_or_else(|| default_pose_prior());
            gmm.validate()?;
            stage_io(Stage::Fit, io, &StageContext { pose_prior: Some(gmm), ..ctx })?;
        }
        Command::Filter { io, threshold, rejected } => {
            let mut cfg = cfg.clone();
            if let Some(t) = threshold {
                cfg.filter_threshold = *t;
            }
            cfg.validate()?;
            let records = read_records(&io.input)?;
            let (out, summary) = run_stage(Stage::Filter, records, &StageContext { config: &cfg, ..ctx })?;
            let (kept, dropped): (Vec<PairRecord>, Vec<PairRecord>) = out.into_iter().partition(|r| r.kept != Some(false));
            write_records(&kept, &io.out)?;
            if let Some(path) = rejected {
                write_records(&dropped, path)?;
            }
            report(Stage::Filter, &summary)?;
        }
        Command::PriorTrain { records, scenes, out } => {
            let mut data = Vec::new();
            if let Some(path) = records {
                for r in read_records(path)? {
                    let usable = r.error.is_none() && r.stage >= RecordStage::Fitted && r.kept != Some(false);
                    if let (true, Some(params)) = (usable, r.params) {
                        data.push(TrainingPair { params, source: r.provenance.source.clone() });
                    }
                }
            }
            if let Some(path) = scenes {
                let scenes: Vec<GtScene> = read_jsonl(path)?;
                data.extend(scenes.into_iter().map(|s| TrainingPair { params: s.params, source: "synth".into() }));
            }
            let schedule = cfg.schedule.build()?;
            let train_cfg = pairfit::prior::TrainConfig { seed: cfg.train.seed ^ cfg.seed, ..cfg.train.clone() };
            info!("prior-train: {} pairs, {} steps", data.len(), train_cfg.steps);
            let (denoiser, rep) = train(&data, &schedule, &train_cfg, &asset)?;
            info!("prior-train: loss reduction {:.3}", rep.loss_reduction());
            Checkpoint::new(schedule, denoiser, &rep).save(out)?;
        }
        Command::FitWithPrior { io, checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            stage_io(Stage::FitWithPrior, io, &StageContext { checkpoint: Some(&ckpt), ..ctx })?;
        }
        Command::Synth { templates, count, out, records } => {
            let names: Vec<&str> = match templates {
                Some(t) => t.iter().map(String::as_str).collect(),
                None => TEMPLATES.to_vec(),
            };
            let scenes = generate_scenes_with(&names, *count, &asset, cfg.seed, &cfg.scene)?;
            write_jsonl(&scenes, out)?;
            info!("synth: {} scenes", scenes.len());
            if let Some(path) = records {
                write_records(&records_from_scenes(&scenes, &cfg.corruption, &asset, cfg.seed)?, path)?;
            }
        }
        Command::Eval { scenes, records, out } => {
            let scenes: Vec<GtScene> = read_jsonl(scenes)?;
            let records = read_records(records)?;
            let mut items = Vec::new();
            for r in records.iter().filter(|r| r.params.is_some() && r.kept != Some(false)) {
                let Some(scene) = scenes.iter().find(|s| scene_record_name(s) == r.image_name) else { continue };
                let Some(init) = &r.init else { continue };
                items.push(EvalItem {
                    template: scene.template.clone(),
                    gt: scene.params.clone(),
                    init: init.clone(),
                    fitted: r.params.clone().expect("filtered above"),
                });
            }
            let csv = evaluate(&items, &asset)?.to_csv();
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { configs } => {
            let mut failed = 0;
            for r in check_all(*configs, cfg.seed) {
                println!(
                    "{:<20} {} configs  max relative error {:.3e}  {}",
                    r.target.name(),
                    r.configs,
                    r.max_relative_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Setup(format!("{failed} gradient check(s) above tolerance {TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}
