use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::ask::{ProposalConfig, RetryPolicy};
use crate::losses::LossWeights;
use crate::optimize::{OptimConfig, DEFAULT_FILTER_THRESHOLD};
use crate::prior::{make_schedule, DiffusionSchedule, GuidanceWeights, TrainConfig, DEFAULT_SIGMA_FIRST, DEFAULT_SIGMA_LAST, DEFAULT_STEPS};
use crate::synth::{CorruptionConfig, SceneConfig};
use crate::taxonomy::DEFAULT_CONFIDENCE_FLOOR;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub mock_dir: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: f64,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retry_base_secs: f64,
    pub retry_factor: f64,
    pub max_attempts: u32,
    /// Extra margin around the pair box when cropping, as a fraction of its size.
    pub crop_margin: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            mock_dir: None,
            endpoint: None,
            model: None,
            timeout_secs: 60.0,
            cache_dir: None,
            max_in_flight: 4,
            retry_base_secs: 1.0,
            retry_factor: 2.0,
            max_attempts: 5,
            crop_margin: 0.1,
        }
    }
}

impl ProviderConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { base: Duration::from_secs_f64(self.retry_base_secs), factor: self.retry_factor, max_attempts: self.max_attempts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_first: f64,
    pub sigma_last: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, sigma_first: DEFAULT_SIGMA_FIRST, sigma_last: DEFAULT_SIGMA_LAST }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, PipelineError> {
        make_schedule(self.steps, self.sigma_first, self.sigma_last).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Every tunable of the pipeline. Unknown keys are rejected; missing keys
/// take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub proposal: ProposalConfig,
    /// Contacts below this annotation confidence are ignored when fitting.
    pub confidence_floor: f64,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub filter_threshold: f64,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceWeights,
    pub train: TrainConfig,
    pub provider: ProviderConfig,
    pub scene: SceneConfig,
    pub corruption: CorruptionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            workers: 0,
            proposal: ProposalConfig::default(),
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
            schedule: ScheduleConfig::default(),
            guidance: GuidanceWeights::default(),
            train: TrainConfig::default(),
            provider: ProviderConfig::default(),
            scene: SceneConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("config schema version {}, expected {}", self.schema_version, CONFIG_SCHEMA_VERSION));
        }
        let p = &self.proposal;
        if p.k_min == 0 || !(p.d_max > 0.0) || !(0.0..=1.0).contains(&p.kp_conf_min) || !(p.align_max > 0.0) {
            return bad("proposal: need k_min > 0, d_max > 0, kp_conf_min in [0, 1], align_max > 0".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return bad("confidence_floor must lie in [0, 1]".into());
        }
        if !(self.filter_threshold > 0.0) {
            return bad("filter_threshold must be positive".into());
        }
        self.weights.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.optim.validate().map_err(PipelineError::Config)?;
        let schedule = self.schedule.build()?;
        self.guidance.validate(&schedule).map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.corruption.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.scene.tau_c > 0.0) {
            return bad("scene.tau_c must be positive".into());
        }
        let pr = &self.provider;
        if !(pr.timeout_secs > 0.0) || pr.max_in_flight == 0 || pr.max_attempts == 0 || !(pr.retry_base_secs >= 0.0) || !(pr.retry_factor >= 1.0) || !(pr.crop_margin >= 0.0) {
            return bad("provider: need timeout > 0, max_in_flight > 0, max_attempts > 0, retry_factor >= 1, crop_margin >= 0".into());
        }
        Ok(())
    }
}
