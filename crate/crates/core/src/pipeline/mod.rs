//! Dataset records, their JSON-lines storage, pipeline configuration and
//! stage orchestration.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ask::InteractionAnnotation;
use crate::body::{BodyParams, Camera};
use crate::denoise::DenoisedContact;
use crate::keypoints::{BBox, Keypoints2D};

pub use config::{PipelineConfig, ProviderConfig, ProviderKind, ScheduleConfig, CONFIG_SCHEMA_VERSION};
pub use stages::{propose_records, records_from_scenes, run_stage, scene_record_name, Stage, StageContext, StageSummary, ZERO_INIT_DEPTH};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("asset error: {0}")]
    Asset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How far a record has progressed. Stages only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStage {
    Proposed,
    Asked,
    Denoised,
    Fitted,
    Filtered,
}

impl RecordStage {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStage::Proposed => "proposed",
            RecordStage::Asked => "asked",
            RecordStage::Denoised => "denoised",
            RecordStage::Fitted => "fitted",
            RecordStage::Filtered => "filtered",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Where the record came from, e.g. `detections` or `synth`.
    pub source: String,
    /// Named seeds used by the stages that touched the record.
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Digest of the configuration the most recent stage ran with.
    #[serde(default)]
    pub config_digest: String,
}

/// Failure of one stage on one record; the record keeps its previous stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordError {
    pub stage: String,
    pub message: String,
}

/// One interacting pair and everything derived for it so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub schema_version: u32,
    pub image_name: String,
    /// Detection ids of the left and right person.
    pub person_ids: [usize; 2],
    pub bbox: BBox,
    #[serde(default)]
    pub interaction: Option<String>,
    pub keypoints: [Keypoints2D; 2],
    #[serde(default)]
    pub camera: Option<Camera>,
    /// Initial estimates from an external regressor.
    #[serde(default)]
    pub init: Option<[BodyParams; 2]>,
    #[serde(default)]
    pub lvlm_output: Option<InteractionAnnotation>,
    #[serde(default)]
    pub denoised_contacts: Option<Vec<DenoisedContact>>,
    #[serde(default)]
    pub params: Option<[BodyParams; 2]>,
    /// Per-person reprojection error; non-finite values serialize as `null`.
    #[serde(default, with = "lossy_pair")]
    pub filter_error: Option<[f64; 2]>,
    /// Filter verdict, present once filtered.
    #[serde(default)]
    pub kept: Option<bool>,
    pub stage: RecordStage,
    pub provenance: Provenance,
    #[serde(default)]
    pub error: Option<RecordError>,
}

mod lossy_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<[f64; 2]>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|p| p.map(|x| x.is_finite().then_some(x))).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[f64; 2]>, D::Error> {
        let v: Option<[Option<f64>; 2]> = Deserialize::deserialize(d)?;
        Ok(v.map(|p| p.map(|x| x.unwrap_or(f64::INFINITY))))
    }
}

impl PairRecord {
    /// A fresh record at the proposed stage.
    pub fn new(image_name: impl Into<String>, person_ids: [usize; 2], bbox: BBox, keypoints: [Keypoints2D; 2], source: &str) -> Self {
        PairRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            image_name: image_name.into(),
            person_ids,
            bbox,
            interaction: None,
            keypoints,
            camera: None,
            init: None,
            lvlm_output: None,
            denoised_contacts: None,
            params: None,
            filter_error: None,
            kept: None,
            stage: RecordStage::Proposed,
            provenance: Provenance { source: source.into(), ..Default::default() },
            error: None,
        }
    }

    /// Identity used for sorting and seeding.
    pub fn key(&self) -> (&str, [usize; 2]) {
        (&self.image_name, self.person_ids)
    }

    /// Checks the field-presence rules of the record's stage.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(format!("record schema version {}, expected {}", self.schema_version, RECORD_SCHEMA_VERSION));
        }
        let at_least = |s: RecordStage| self.stage >= s;
        let rules = [
            ("lvlm_output", self.lvlm_output.is_some(), at_least(RecordStage::Asked)),
            ("denoised_contacts", self.denoised_contacts.is_some(), at_least(RecordStage::Denoised)),
            ("params", self.params.is_some(), at_least(RecordStage::Fitted)),
            ("filter_error", self.filter_error.is_some(), at_least(RecordStage::Fitted)),
            ("kept", self.kept.is_some(), at_least(RecordStage::Filtered)),
        ];
        for (field, present, required) in rules {
            // Guided fits may skip the annotation stages.
            let optional = matches!(field, "lvlm_output" | "denoised_contacts") && at_least(RecordStage::Fitted);
            if present && !required {
                return Err(format!("{field} present at stage {}", self.stage.as_str()));
            }
            if required && !present && !optional {
                return Err(format!("{field} missing at stage {}", self.stage.as_str()));
            }
        }
        Ok(())
    }
}

/// Deterministic per-record seed from the global seed and the record identity.
pub fn record_seed(global: u64, image_name: &str, person_ids: [usize; 2]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((image_name.len() as u64).to_le_bytes());
    h.update(image_name.as_bytes());
    for id in person_ids {
        h.update((id as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Sorts records by image name, then person ids.
pub fn sort_records(records: &mut [PairRecord]) {
    records.sort_by(|a, b| a.key().cmp(&b.key()));
}

/// Parses JSON-lines text. Blank lines are ignored.
pub fn parse_records(text: &str) -> Result<Vec<PairRecord>, PipelineError> {
    parse_lines(text.as_bytes())
}

fn parse_lines(reader: impl BufRead) -> Result<Vec<PairRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Line { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(RECORD_SCHEMA_VERSION as u64) {
            return Err(err(format!("record schema version {version:?}, expected {RECORD_SCHEMA_VERSION}")));
        }
        let record: PairRecord = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(err)?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PairRecord>, PipelineError> {
    parse_lines(BufReader::new(std::fs::File::open(path)?))
}

/// One JSON object per line, in the given order.
pub fn records_to_string(records: &[PairRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records(records: &[PairRecord], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads any JSON-lines file of `T`, reporting the failing line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, PipelineError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Line { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
