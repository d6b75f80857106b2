//! Model backends: an OpenAI-compatible completion client and simulated
//! learners for desk-scale runs.

mod http;
mod sim;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::CipheredSet;
use crate::corpus::TaskKind;
use crate::prompting::RenderedPrompt;

pub use http::{HttpBackend, API_KEY_ENV};
pub use sim::{
    analytic_positive_rate, generate_synthetic, label_sign, load_lexicon, sim_incontext_learner,
    sim_retrieval_learner, LearnerLexicon, SimBackend, SimKind, SyntheticData, SyntheticTask,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error("unsupported request: {0}")]
    Unsupported(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A model answer: generated text, plus one score per candidate when
/// candidates were requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub option_scores: Option<Vec<f64>>,
}

/// Everything a backend may look at for one prompt.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub prompt: &'a RenderedPrompt,
    pub kind: TaskKind,
    /// Continuations to score, e.g. `" positive"` or `" (2)"`.
    pub candidates: Option<&'a [String]>,
    /// Tokens whose meaning the cipher may have changed. Simulated learners
    /// treat them as unknown; real models never see this.
    pub ciphered_set: &'a CipheredSet,
}

pub trait Backend: Send + Sync {
    fn complete(&self, query: &Query<'_>) -> Result<Completion, BackendError>;

    fn name(&self) -> String;

    /// Concurrent requests the backend tolerates.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    SimRetrieval,
    SimInContext,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_max_tokens() -> u32 {
    8
}
fn default_logprobs() -> u32 {
    1
}
fn default_positive() -> String {
    "positive".into()
}
fn default_negative() -> String {
    "negative".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_logprobs")]
    pub logprobs: u32,
    /// Polarity lexicon TSV (`id<TAB>weight`) for simulated learners.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_positive")]
    pub positive_label: String,
    #[serde(default = "default_negative")]
    pub negative_label: String,
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint_url: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
            max_tokens: default_max_tokens(),
            logprobs: default_logprobs(),
            lexicon: None,
            positive_label: default_positive(),
            negative_label: default_negative(),
        }
    }

    pub fn http(endpoint_url: impl Into<String>) -> Self {
        BackendConfig {
            endpoint_url: Some(endpoint_url.into()),
            ..Self::new(BackendKind::Http)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => Err(BackendError::Config(
                "backend.endpoint_url is required for kind \"http\"".into(),
            )),
            _ if self.max_in_flight == 0 => Err(BackendError::Config(
                "backend.max_in_flight must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Builds a backend from its config. Simulated learners need a lexicon,
/// either passed in or named by `cfg.lexicon`.
pub fn build_backend(
    cfg: &BackendConfig,
    lexicon: Option<LearnerLexicon>,
) -> Result<Box<dyn Backend>, BackendError> {
    cfg.validate()?;
    let sim = |kind| -> Result<Box<dyn Backend>, BackendError> {
        let lexicon = match (lexicon, &cfg.lexicon) {
            (Some(l), _) => l,
            (None, Some(path)) => load_lexicon(path)?,
            (None, None) => {
                return Err(BackendError::Config(
                    "backend.lexicon is required for simulated learners".into(),
                ))
            }
        };
        Ok(Box::new(SimBackend::new(
            kind,
            lexicon,
            &cfg.positive_label,
            &cfg.negative_label,
        )))
    };
    match cfg.kind {
        BackendKind::Http => Ok(Box::new(HttpBackend::new(cfg.clone())?)),
        BackendKind::SimRetrieval => sim(SimKind::Retrieval),
        BackendKind::SimInContext => sim(SimKind::InContext),
    }
}
