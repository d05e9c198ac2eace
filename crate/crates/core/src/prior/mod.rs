//! Diffusion prior over two-person parameter vectors: noising schedule,
//! denoiser training, unconditional sampling and test-time guidance.

mod guidance;
mod network;
mod schedule;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use guidance::{
    denoise_at, fit_with_prior, guidance_loss, guidance_value_grad, GuidancePrior, GuidanceWeights, DEFAULT_T_GUID,
};
pub use network::{
    pair_to_raw, time_embedding, Denoise, Denoiser, Linear, ParamNormalizer, DEFAULT_EMBED_DIM, PRIOR_DIM, STD_FLOOR,
};
pub use schedule::{diffuse, make_schedule, DiffusionSchedule, DEFAULT_SIGMA_FIRST, DEFAULT_SIGMA_LAST, DEFAULT_STEPS};
pub use train::{batch_loss, sample, train, Batch, TrainConfig, TrainReport, TrainingPair, MIN_DATASET};

use crate::losses::LossError;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("dataset has {found} pairs, at least {required} required")]
    DatasetTooSmall { found: usize, required: usize },
    #[error("dataset contains non-finite parameters")]
    NonFiniteData,
    #[error("non-finite training loss at step {step}")]
    NonFinite { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Fit(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Everything needed to reuse a trained prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub schedule: DiffusionSchedule,
    pub denoiser: Denoiser,
    pub loss_curve: Vec<f64>,
}

impl Checkpoint {
    pub fn new(schedule: DiffusionSchedule, denoiser: Denoiser, report: &TrainReport) -> Self {
        Checkpoint { schema_version: CHECKPOINT_SCHEMA_VERSION, schedule, denoiser, loss_curve: report.loss_curve.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_SCHEMA_VERSION {
            return Err(PriorError::SchemaVersion { found, expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.denoiser.validate()?;
        DiffusionSchedule::from_rates(ckpt.schedule.sigma.clone())
            .ok()
            .filter(|s| s == &ckpt.schedule)
            .ok_or_else(|| PriorError::Checkpoint("schedule products do not match its rates".into()))?;
        if !ckpt.denoiser.signal.is_empty() && ckpt.denoiser.signal != ckpt.schedule.sigma_prime {
            return Err(PriorError::Checkpoint("denoiser was trained on a different schedule".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PriorError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
