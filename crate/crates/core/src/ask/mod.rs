//! Candidate pairs, annotation prompts, provider querying and response parsing.

mod candidates;
mod parse;
mod prompt;
mod provider;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyParams;
use crate::keypoints::{BBox, Keypoints2D};
use crate::taxonomy::BodyPart;

pub use candidates::{crop_image, propose_candidates, ImageDetections, ProposalConfig};
pub use parse::{parse_annotation, parse_annotation_report, ParseReport};
pub use prompt::{build_prompt, build_prompt_with};
pub use provider::{
    cache_key, image_digest, AnnotationProvider, AskClient, HttpProvider, MockProvider, ProviderError, RetryPolicy,
    API_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum AskError {
    #[error("no JSON object found in response")]
    NoJson,
    #[error("malformed annotation JSON: {0}")]
    Json(String),
    #[error("annotation schema error: {0}")]
    Schema(String),
    #[error("provider failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// One detected person in an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonDetection {
    pub id: usize,
    pub keypoints: Keypoints2D,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<BodyParams>,
}

/// Two people proposed for annotation. `a` is the person further left in the
/// image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub a: usize,
    pub b: usize,
    pub image: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

/// A single raw contact, parts as named by the annotator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactEntry {
    pub part_left: BodyPart,
    pub part_right: BodyPart,
    pub confidence: f64,
}

/// Parsed annotation. Serializes to the same JSON layout the prompt asks for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "parse::WireAnnotation", try_from = "parse::WireAnnotation")]
pub struct InteractionAnnotation {
    pub interaction: String,
    pub person_left: String,
    pub person_right: String,
    pub orientation: String,
    pub contacts: Vec<ContactEntry>,
}
