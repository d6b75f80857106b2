use thiserror::Error;

use crate::backends::BackendError;
use crate::cipher::CipherError;
use crate::corpus::CorpusError;
use crate::lexicon::LexiconError;
use crate::probe::ProbeError;
use crate::prompting::PromptError;
use crate::runner::RunError;
use crate::sampling::SamplingError;
use crate::stats::StatsError;
use crate::tokenization::TokenizerError;

/// Umbrella error for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
