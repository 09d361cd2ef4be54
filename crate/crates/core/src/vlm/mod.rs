//! Deciders: given the annotated image, the prompt and the candidate set,
//! choose which marker to suction.
//!
//! Three backends share the [`Decider`] trait:
//!
//! - [`LiveDecider`] posts a chat-completions request with a strict JSON
//!   schema response format and validates the reply.
//! - [`OracleDecider`] ranks candidates with geometric scores; an optional
//!   pixel mask stands in for the model's object grounding.
//! - [`ReplayDecider`] returns decisions recorded by a live session.
//!
//! Every backend rejects labels that were not offered.

mod live;
mod replay;
mod scoring;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Fingerprint;
use crate::projection::{candidate_digest, SuctionCandidate};
use crate::prompting::{AnnotatedImage, PromptBundle};
use crate::rgbd::{PixelMask, PointCloud};

pub use live::{build_request, parse_response, response_schema, LiveDecider};
pub use replay::{replay_decide, ReplayDecider, ReplayLog, ReplayRecord, ReplayWriter};
pub use scoring::{
    oracle_decide, score_all, score_candidate, score_candidate_in, OracleDecider, ScoringFrame,
};

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("response violates the output schema: {0}")]
    SchemaViolation(String),
    #[error("decider selected label {label}, which is not among the offered labels {offered:?}")]
    HallucinatedLabel { label: u32, offered: Vec<u32> },
    #[error("no recorded decision for key {0}")]
    MissingKey(String),
    #[error("replay log {path}: {message}")]
    ReplayLog { path: String, message: String },
    #[error("decider misconfigured: {0}")]
    Config(String),
}

impl VlmError {
    /// Output-format failures, which evaluation keeps out of the
    /// format-excluded accuracy denominator.
    pub fn is_format_error(&self) -> bool {
        matches!(self, VlmError::SchemaViolation(_))
    }
}

/// A selection: ranked labels (best first) plus what the decider saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmDecision {
    pub selected_labels: Vec<u32>,
    pub detected_items: Vec<String>,
    pub rationale: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refusal {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Selected(VlmDecision),
    Refused(Refusal),
}

impl Decision {
    pub fn head(&self) -> Option<u32> {
        match self {
            Decision::Selected(d) => d.selected_labels.first().copied(),
            Decision::Refused(_) => None,
        }
    }

    pub fn selected_labels(&self) -> &[u32] {
        match self {
            Decision::Selected(d) => &d.selected_labels,
            Decision::Refused(_) => &[],
        }
    }

    pub fn is_refusal(&self) -> bool {
        matches!(self, Decision::Refused(_))
    }

    /// Rejects empty selections and labels outside `candidates`.
    pub fn check_labels(&self, candidates: &[SuctionCandidate]) -> Result<(), VlmError> {
        let Decision::Selected(d) = self else {
            return Ok(());
        };
        if d.selected_labels.is_empty() {
            return Err(VlmError::SchemaViolation(
                "target reported found but no point numbers selected".into(),
            ));
        }
        let offered: Vec<u32> = candidates.iter().map(|c| c.label).collect();
        match d.selected_labels.iter().find(|l| !offered.contains(l)) {
            Some(&label) => Err(VlmError::HallucinatedLabel { label, offered }),
            None => Ok(()),
        }
    }
}

/// Component scores in [0, 1] and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricScores {
    pub flatness: f64,
    pub accessibility: f64,
    pub perpendicularity: f64,
    pub stability: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub flatness: f64,
    pub perpendicularity: f64,
    pub accessibility: f64,
    pub stability: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            flatness: 0.4,
            perpendicularity: 0.3,
            accessibility: 0.2,
            stability: 0.1,
        }
    }
}

impl ScoreWeights {
    pub fn sum(&self) -> f64 {
        self.flatness + self.perpendicularity + self.accessibility + self.stability
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub weights: ScoreWeights,
    /// Minimum total for a candidate to be selectable.
    pub threshold: f64,
    /// Residual scale of the flatness score, meters.
    pub sigma_flat: f64,
    pub cup_radius: f64,
    /// Upper bound on the ranked list length.
    pub max_selected: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            threshold: 0.5,
            sigma_flat: 0.002,
            cup_radius: 0.015,
            max_selected: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Live,
    Oracle,
    Replay,
}

impl std::str::FromStr for Backend {
    type Err = VlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Backend::Live),
            "oracle" => Ok(Backend::Oracle),
            "replay" => Ok(Backend::Replay),
            other => Err(VlmError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Full URL of a chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Use a strict `json_schema` response format; otherwise `json_object`.
    /// Replies are validated against the schema either way.
    pub strict_schema: bool,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
    /// Append every live decision to this replay log.
    pub record_log: Option<PathBuf>,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            strict_schema: true,
            api_key_env: "OPENAI_API_KEY".into(),
            record_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeciderConfig {
    pub backend: Backend,
    pub live: LiveConfig,
    pub replay_log: Option<PathBuf>,
    pub oracle: OracleConfig,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl Default for DeciderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Oracle,
            live: LiveConfig::default(),
            replay_log: None,
            oracle: OracleConfig::default(),
            timeout_secs: 60.0,
            max_retries: 2,
        }
    }
}

impl DeciderConfig {
    pub fn validate(&self) -> Result<(), VlmError> {
        let w = &self.oracle.weights;
        let parts = [w.flatness, w.perpendicularity, w.accessibility, w.stability];
        if parts.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (w.sum() - 1.0).abs() > 1e-9 {
            return Err(VlmError::Config("score weights must be in [0,1] and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.oracle.threshold) {
            return Err(VlmError::Config("threshold must be in [0,1]".into()));
        }
        if !(self.oracle.cup_radius > 0.0 && self.oracle.sigma_flat > 0.0) {
            return Err(VlmError::Config("cup_radius and sigma_flat must be positive".into()));
        }
        if self.oracle.max_selected == 0 {
            return Err(VlmError::Config("max_selected must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(VlmError::Config("timeout must be positive".into()));
        }
        if self.backend == Backend::Replay && self.replay_log.is_none() {
            return Err(VlmError::Config("replay backend needs replay_log".into()));
        }
        Ok(())
    }
}

/// Everything a decider may look at for one observation.
pub struct Query<'a> {
    pub image: &'a AnnotatedImage,
    pub prompt: &'a PromptBundle,
    pub candidates: &'a [SuctionCandidate],
    pub cloud: &'a PointCloud,
    /// Image region of the requested item, when grounding is available.
    pub target_mask: Option<&'a PixelMask>,
}

impl Query<'_> {
    /// Replay key: what a remote model would have been shown.
    pub fn scene_key(&self) -> String {
        let px = &self.image.pixels;
        let mut dims = Vec::with_capacity(8);
        dims.extend_from_slice(&px.width.to_le_bytes());
        dims.extend_from_slice(&px.height.to_le_bytes());
        Fingerprint::new()
            .part(&dims)
            .part(&px.data)
            .part(self.prompt.role.as_bytes())
            .part(self.prompt.premise.as_bytes())
            .part(self.prompt.directive.as_bytes())
            .part(candidate_digest(self.candidates).as_bytes())
            .finish()
    }
}

pub trait Decider {
    fn decide(&mut self, query: &Query<'_>) -> Result<Decision, VlmError>;
}

/// Instantiates the configured backend.
pub fn build_decider(cfg: &DeciderConfig) -> Result<Box<dyn Decider + Send>, VlmError> {
    cfg.validate()?;
    Ok(match cfg.backend {
        Backend::Oracle => Box::new(OracleDecider::new(cfg.oracle)),
        Backend::Replay => {
            let path = cfg.replay_log.as_ref().expect("validated");
            Box::new(ReplayDecider::new(ReplayLog::load(path)?))
        }
        Backend::Live => Box::new(LiveDecider::new(cfg.clone())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decider_config_validation() {
        assert!(DeciderConfig::default().validate().is_ok());
        let mut c = DeciderConfig::default();
        c.oracle.weights.flatness = 0.5;
        assert!(c.validate().is_err());
        let mut c = DeciderConfig::default();
        c.oracle.threshold = 1.5;
        assert!(c.validate().is_err());
        let c = DeciderConfig {
            backend: Backend::Replay,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn decision_json_is_tagged() {
        let d = Decision::Refused(Refusal {
            reason: "target not found".into(),
        });
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"kind":"refused","reason":"target not found"}"#
        );
        assert_eq!(d.head(), None);
        assert!(d.is_refusal());
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("oracle".parse::<Backend>().unwrap(), Backend::Oracle);
        assert!("gpt".parse::<Backend>().is_err());
    }
}
